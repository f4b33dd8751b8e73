#include "docparser/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace docparser {

namespace {

using GlyphRows = std::array<const char*, 7>;

// 5x7 bitmap glyphs; '#' marks ink.
const GlyphRows* glyph_for(char c) {
  static const std::map<char, GlyphRows> glyphs = {
      {'A', {".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"}},
      {'B', {"####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."}},
      {'C', {".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."}},
      {'D', {"####.", "#...#", "#...#", "#...#", "#...#", "#...#", "####."}},
      {'E', {"#####", "#....", "#....", "####.", "#....", "#....", "#####"}},
      {'F', {"#####", "#....", "#....", "####.", "#....", "#....", "#...."}},
      {'G', {".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".###."}},
      {'H', {"#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"}},
      {'I', {".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."}},
      {'J', {"..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."}},
      {'K', {"#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"}},
      {'L', {"#....", "#....", "#....", "#....", "#....", "#....", "#####"}},
      {'M', {"#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"}},
      {'N', {"#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#", "#...#"}},
      {'O', {".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."}},
      {'P', {"####.", "#...#", "#...#", "####.", "#....", "#....", "#...."}},
      {'Q', {".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"}},
      {'R', {"####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"}},
      {'S', {".####", "#....", "#....", ".###.", "....#", "....#", "####."}},
      {'T', {"#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."}},
      {'U', {"#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."}},
      {'V', {"#...#", "#...#", "#...#", "#...#", ".#.#.", ".#.#.", "..#.."}},
      {'W', {"#...#", "#...#", "#...#", "#.#.#", "#.#.#", "##.##", "#...#"}},
      {'X', {"#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"}},
      {'Y', {"#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."}},
      {'Z', {"#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"}},
      {'0', {".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."}},
      {'1', {"..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."}},
      {'2', {".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"}},
      {'3', {".###.", "#...#", "....#", "..##.", "....#", "#...#", ".###."}},
      {'4', {"...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."}},
      {'5', {"#####", "#....", "####.", "....#", "....#", "#...#", ".###."}},
      {'6', {".###.", "#....", "#....", "####.", "#...#", "#...#", ".###."}},
      {'7', {"#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."}},
      {'8', {".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."}},
      {'9', {".###.", "#...#", "#...#", ".####", "....#", "....#", ".###."}},
      {'-', {".....", ".....", ".....", "#####", ".....", ".....", "....."}},
      {'.', {".....", ".....", ".....", ".....", ".....", ".##..", ".##.."}},
      {':', {".....", ".##..", ".##..", ".....", ".##..", ".##..", "....."}},
      {'/', {"....#", "...#.", "...#.", "..#..", ".#...", ".#...", "#...."}},
      {'$', {"..#..", ".####", "#.#..", ".###.", "..#.#", "####.", "..#.."}},
      {'#', {".#.#.", ".#.#.", "#####", ".#.#.", "#####", ".#.#.", ".#.#."}},
  };
  auto it = glyphs.find(c);
  return it == glyphs.end() ? nullptr : &it->second;
}

constexpr std::int64_t kGlyphW = 5;
constexpr std::int64_t kGlyphH = 7;

// Item names and store names are slices of the shared word inventory, so
// the built-in vocabulary has merges for everything the generator writes.
std::vector<std::string> item_words() {
  const auto& all = builtin_receipt_words();
  return {all.begin(), all.begin() + 20};
}
std::vector<std::string> store_words() {
  const auto& all = builtin_receipt_words();
  return {all.begin() + 20, all.begin() + 30};
}

std::string random_price(Rng& rng) {
  const auto digits = 3 + rng.below(3);
  std::string s;
  s += static_cast<char>('1' + rng.below(9));
  for (std::uint64_t i = 1; i < digits; ++i) {
    s += static_cast<char>('0' + rng.below(10));
  }
  return s;
}

std::string random_date(Rng& rng) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d-%02d-%02d", int(2015 + rng.below(10)),
                int(1 + rng.below(12)), int(1 + rng.below(28)));
  return buf;
}

}  // namespace

std::int64_t glyph_advance(std::int64_t scale) { return (kGlyphW + 1) * scale; }
std::int64_t glyph_height(std::int64_t scale) { return kGlyphH * scale; }

void draw_text(Image& img, std::int64_t x, std::int64_t y, const std::string& text,
               std::int64_t scale, double ink) {
  std::int64_t cx = x;
  for (char c : text) {
    const GlyphRows* rows = glyph_for(std::toupper(static_cast<unsigned char>(c)));
    if (rows) {
      for (std::int64_t gy = 0; gy < kGlyphH; ++gy) {
        for (std::int64_t gx = 0; gx < kGlyphW; ++gx) {
          if ((*rows)[static_cast<size_t>(gy)][gx] != '#') continue;
          for (std::int64_t sy = 0; sy < scale; ++sy) {
            for (std::int64_t sx = 0; sx < scale; ++sx) {
              const std::int64_t py = y + gy * scale + sy;
              const std::int64_t px = cx + gx * scale + sx;
              if (py < 0 || py >= img.height || px < 0 || px >= img.width) continue;
              for (int ch = 0; ch < 3; ++ch) img.at(ch, py, px) = ink;
            }
          }
        }
      }
    }
    cx += glyph_advance(scale);
  }
}

TaskSchema synth_schema() { return TaskSchema::builtin_receipt(); }

DocumentSample generate(std::uint64_t seed, const SynthOpts& opts) {
  if (opts.template_id != "receipt") {
    throw std::invalid_argument("unknown template '" + opts.template_id +
                                "' (available: receipt)");
  }
  Rng rng(Rng::mix(seed, 0x7ec1a7e5u,
                   static_cast<std::uint64_t>(opts.height * 1000003 + opts.width)));

  const std::int64_t scale = 2;  // glyph height 14px, legible after /32 patches
  const std::int64_t line_h = glyph_height(scale) + 3 * scale;
  const std::int64_t margin_x = 8 + static_cast<std::int64_t>(rng.below(9));
  const std::int64_t margin_y = 8 + static_cast<std::int64_t>(rng.below(9));

  const auto items = item_words();
  const auto stores = store_words();

  // Values of interest.
  FieldRecord record;
  const std::string store =
      stores[rng.below(stores.size())] + " " + stores[rng.below(stores.size())];
  const std::string date = random_date(rng);

  std::int64_t n_items = 2 + static_cast<std::int64_t>(rng.below(3));
  const std::int64_t fixed_lines = 6;  // store, date, 2 rules, total, cash
  const std::int64_t max_items =
      (opts.height - 2 * margin_y) / line_h - fixed_lines;
  if (max_items < 1) {
    throw std::invalid_argument("resolution " + std::to_string(opts.height) + "x" +
                                std::to_string(opts.width) +
                                " too small for template 'receipt'");
  }
  n_items = std::min(n_items, max_items);

  std::vector<std::pair<std::string, std::string>> menu;
  long long sum = 0;
  for (std::int64_t i = 0; i < n_items; ++i) {
    std::string name = items[rng.below(items.size())];
    std::string price = random_price(rng);
    sum += std::stoll(price);
    menu.emplace_back(std::move(name), std::move(price));
  }
  const std::string total_price = std::to_string(sum);
  const std::string cash_price =
      std::to_string(sum + static_cast<long long>(rng.below(500)));

  record.set("store", FieldValue::text(store));
  record.set("date", FieldValue::text(date));
  std::vector<FieldValue> menu_items;
  for (auto& [name, price] : menu) {
    FieldRecord item;
    item.set("name", FieldValue::text(name));
    item.set("price", FieldValue::text(price));
    menu_items.push_back(FieldValue::group(std::move(item)));
  }
  record.set("menu", FieldValue::list(std::move(menu_items)));
  FieldRecord total;
  total.set("total-price", FieldValue::text(total_price));
  total.set("cash-price", FieldValue::text(cash_price));
  record.set("total", FieldValue::group(std::move(total)));

  // Reading-order lines; every record value appears verbatim.
  std::vector<std::string> lines;
  lines.push_back(store);
  lines.push_back("DATE " + date);
  lines.push_back("--------");
  for (auto& [name, price] : menu) lines.push_back(name + " " + price);
  lines.push_back("--------");
  lines.push_back("TOTAL " + total_price);
  lines.push_back("CASH " + cash_price);

  size_t max_chars = 0;
  for (const auto& l : lines) max_chars = std::max(max_chars, l.size());
  if (margin_x + static_cast<std::int64_t>(max_chars) * glyph_advance(scale) >
      opts.width - 4) {
    throw std::invalid_argument("resolution " + std::to_string(opts.height) + "x" +
                                std::to_string(opts.width) +
                                " too narrow for template 'receipt'");
  }

  const double bg = 0.90 + 0.08 * rng.uniform();
  const double ink = 0.04 + 0.10 * rng.uniform();
  Image img = Image::filled(opts.height, opts.width, bg);
  std::int64_t y = margin_y;
  for (const auto& line : lines) {
    const std::int64_t jitter = static_cast<std::int64_t>(rng.below(5));
    draw_text(img, margin_x + jitter, y, line, scale, ink);
    y += line_h;
  }

  DocumentSample sample;
  sample.image = std::move(img);
  sample.record = std::move(record);
  std::string transcription;
  for (size_t i = 0; i < lines.size(); ++i) {
    if (i) transcription += "\n";
    transcription += lines[i];
  }
  sample.transcription = std::move(transcription);
  sample.seed = seed;
  return sample;
}

MaskBlocksResult mask_blocks(const Image& img, std::int64_t block, double target_ratio,
                             std::uint64_t seed) {
  if (block <= 0 || img.height < block || img.width < block) {
    throw std::invalid_argument("mask_blocks: image " + std::to_string(img.height) +
                                "x" + std::to_string(img.width) +
                                " smaller than one " + std::to_string(block) +
                                "px block");
  }
  if (img.height % block != 0 || img.width % block != 0) {
    throw std::invalid_argument("mask_blocks: image dims must be divisible by " +
                                std::to_string(block));
  }
  const std::int64_t bh = img.height / block, bw = img.width / block;
  const std::int64_t n = bh * bw;
  const auto k = static_cast<std::int64_t>(std::llround(target_ratio * double(n)));
  const double achieved = double(k) / double(n);
  if (std::fabs(achieved - target_ratio) > 0.01) {
    throw std::invalid_argument(
        "mask_blocks: ratio " + std::to_string(target_ratio) +
        " not reachable on a " + std::to_string(bh) + "x" + std::to_string(bw) +
        " block grid");
  }

  MaskBlocksResult res;
  res.image = img;
  res.mask.assign(static_cast<size_t>(n), 0);
  res.blocks_h = bh;
  res.blocks_w = bw;
  res.masked_blocks = k;
  res.masked_fraction = achieved;
  if (k == 0) return res;

  // Partial Fisher-Yates draw of k distinct blocks.
  Rng rng(Rng::mix(seed, 0xb10c5u, static_cast<std::uint64_t>(n)));
  std::vector<std::int64_t> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  for (std::int64_t i = 0; i < k; ++i) {
    const auto j = i + static_cast<std::int64_t>(rng.below(
                           static_cast<std::uint64_t>(n - i)));
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
  }
  for (std::int64_t i = 0; i < k; ++i) {
    const std::int64_t b = idx[static_cast<size_t>(i)];
    res.mask[static_cast<size_t>(b)] = 1;
    const std::int64_t by = (b / bw) * block, bx = (b % bw) * block;
    for (int c = 0; c < 3; ++c) {
      for (std::int64_t yy = 0; yy < block; ++yy) {
        for (std::int64_t xx = 0; xx < block; ++xx) {
          res.image.at(c, by + yy, bx + xx) = 0.5;
        }
      }
    }
  }
  return res;
}

}  // namespace docparser
