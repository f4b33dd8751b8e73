// Acceptance suite: one pass/fail line per criterion, non-zero exit when
// any criterion fails. Each criterion is self-contained and prints its
// measured numbers next to the required thresholds.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "docparser/checkpoint.hpp"
#include "docparser/metrics.hpp"
#include "docparser/pretrain.hpp"
#include "docparser/train.hpp"
#include "testutil.hpp"

using namespace docparser;
namespace fs = std::filesystem;

namespace {

struct Criterion {
  int number;
  std::string name;
  std::function<bool(std::string&)> run;
};

// --------------------------------------------------------------------------
// Shared fixtures
// --------------------------------------------------------------------------

// Tiny architecture for the overfit run. The stated window set
// (2,8)/(2,4)/(4,4) is not realisable at 320x320: the stage-6 grid is
// 10x10 and 10 is not divisible by 4, which the resolution validator
// rejects up front. (5,5) keeps the stage-6 window square at the same
// scale and divides the grid exactly.
ModelConfig tiny_model_config() {
  ModelConfig mc;
  mc.encoder.channels = {16, 32, 48, 64, 96, 128};
  mc.encoder.blocks_per_stage = {2, 2, 2, 2, 2, 2};
  mc.encoder.window_sizes = {{2, 8}, {2, 4}, {5, 5}};
  mc.encoder.num_heads = {4, 6, 8};
  mc.encoder.stochastic_depth_p = 0.0;
  mc.decoder.num_layers = 1;
  mc.decoder.num_heads = 8;  // model_dim derives to C5 = 128
  mc.decoder.max_decode_len = 192;
  mc.train_height = 320;
  mc.train_width = 320;
  return mc;
}

ModelConfig micro_model_config() {
  ModelConfig mc;
  mc.encoder.channels = {4, 6, 8, 10, 12, 14};
  mc.encoder.blocks_per_stage = {1, 1, 1, 1, 1, 1};
  mc.encoder.window_sizes = {{1, 2}, {1, 2}, {2, 2}};
  mc.encoder.num_heads = {1, 1, 2};
  mc.encoder.stochastic_depth_p = 0.1;
  mc.decoder.num_layers = 1;
  mc.decoder.num_heads = 2;
  mc.decoder.max_decode_len = 96;
  mc.train_height = 64;
  mc.train_width = 64;
  return mc;
}

TaskSchema cord_like_schema() {
  TaskSchema s;
  s.task_name = "cord";
  FieldDef menu{"menu",
                FieldDef::Kind::GroupList,
                {{"name", FieldDef::Kind::Value, {}},
                 {"price", FieldDef::Kind::Value, {}}}};
  FieldDef total{"total",
                 FieldDef::Kind::Group,
                 {{"total-price", FieldDef::Kind::Value, {}},
                  {"cash-price", FieldDef::Kind::Value, {}}}};
  s.fields = {menu, total};
  return s;
}

FieldValue random_value(const FieldDef& def, Rng& rng);

FieldRecord random_record(const std::vector<FieldDef>& defs, Rng& rng) {
  FieldRecord rec;
  for (const auto& def : defs) {
    if (rng.uniform() > 0.9) continue;
    rec.set(def.name, random_value(def, rng));
  }
  return rec;
}

std::string random_text(Rng& rng) {
  static const char charset[] =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789 .-:/$";
  std::string s;
  for (std::uint64_t i = 0, n = rng.below(12); i < n; ++i) {
    s += charset[rng.below(sizeof(charset) - 1)];
  }
  return s;
}

FieldValue random_value(const FieldDef& def, Rng& rng) {
  switch (def.kind) {
    case FieldDef::Kind::Value:
      return FieldValue::text(random_text(rng));
    case FieldDef::Kind::Group:
      return FieldValue::group(random_record(def.children, rng));
    case FieldDef::Kind::ValueList: {
      std::vector<FieldValue> items;
      for (std::uint64_t i = 0, n = rng.below(4); i < n; ++i)
        items.push_back(FieldValue::text(random_text(rng)));
      return FieldValue::list(std::move(items));
    }
    case FieldDef::Kind::GroupList: {
      std::vector<FieldValue> items;
      for (std::uint64_t i = 0, n = rng.below(4); i < n; ++i)
        items.push_back(FieldValue::group(random_record(def.children, rng)));
      return FieldValue::list(std::move(items));
    }
  }
  return FieldValue::text("");
}

// Results of the overfit run, shared between criteria 7 and 11.
struct OverfitArtifacts {
  std::unique_ptr<DocParserModel> model;
  std::vector<DocumentSample> docs;
  double f1 = 0.0;
  double dar = 0.0;
  std::int64_t steps = 0;
};
OverfitArtifacts g_overfit;

// --------------------------------------------------------------------------
// 1. Gradient suite
// --------------------------------------------------------------------------

bool criterion_gradients(std::string& detail) {
  using testutil::gradcheck;
  using testutil::random_tensor;
  int checked = 0;
  double worst = 0.0;
  std::string worst_op;
  bool ok = true;

  auto run = [&](const char* name, std::uint64_t seed,
                 const std::function<Tensor(const std::vector<Tensor>&)>& f,
                 std::vector<Tensor> inputs) {
    auto res = gradcheck(f, std::move(inputs), 1e-5, 1e-4);
    ++checked;
    if (res.max_rel_err > worst) {
      worst = res.max_rel_err;
      worst_op = name;
    }
    if (!res.ok) {
      ok = false;
      detail += std::string(" FAIL ") + name + "@" + std::to_string(seed) + ": " +
                res.detail + ";";
    }
  };

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(1000 + seed * 77);
    const std::int64_t a = 2 + static_cast<std::int64_t>(rng.below(3));
    const std::int64_t b = 2 + static_cast<std::int64_t>(rng.below(3));
    const std::int64_t c = 2 + static_cast<std::int64_t>(rng.below(3));

    run("elementwise", seed,
        [](const std::vector<Tensor>& in) {
          return mean_all(
              gelu(add(mul(in[0], in[1]), scale(add_scalar(sub(in[0], in[1]), 0.2), 0.7))));
        },
        {random_tensor({a, b}, rng), random_tensor({a, b}, rng)});

    run("add_bias_nd", seed,
        [](const std::vector<Tensor>& in) {
          return mean_all(mul(add_bias_nd(in[0], in[1]), in[0]));
        },
        {random_tensor({a, b, c}, rng), random_tensor({b, c}, rng)});

    run("shape_ops", seed,
        [](const std::vector<Tensor>& in) {
          Tensor p = permute(in[0], {1, 0, 2});
          Tensor n = narrow(p, 2, 0, in[0].dim(2) - 1);
          Tensor cat = concat({n, n}, 1);
          Tensor r = reshape(cat, {cat.numel()});
          return mean_all(mul(r, r));
        },
        {random_tensor({a, b, c + 1}, rng)});

    run("roll2d", seed,
        [](const std::vector<Tensor>& in) {
          return mean_all(mul(roll2d(in[0], 1, -2), in[1]));
        },
        {random_tensor({1, a, 4, 6}, rng), random_tensor({1, a, 4, 6}, rng, false)});

    run("reductions", seed,
        [](const std::vector<Tensor>& in) {
          return add(sum_all(mul(in[0], in[0])), mean_all(in[0]));
        },
        {random_tensor({a, b}, rng)});

    run("layer_norm", seed,
        [](const std::vector<Tensor>& in) {
          return mean_all(mul(layer_norm(in[0], in[1], in[2]), in[0]));
        },
        {random_tensor({a, 5}, rng), random_tensor({5}, rng),
         random_tensor({5}, rng)});

    run("layer_norm_chw", seed,
        [](const std::vector<Tensor>& in) {
          return mean_all(mul(layer_norm_chw(in[0], in[1], in[2]), in[0]));
        },
        {random_tensor({2, b, 3, 2}, rng), random_tensor({b}, rng),
         random_tensor({b}, rng)});

    run("softmax", seed,
        [](const std::vector<Tensor>& in) {
          return mean_all(mul(softmax(in[0], 1), in[1]));
        },
        {random_tensor({a, 4, b}, rng), random_tensor({a, 4, b}, rng, false)});

    run("masked_softmax", seed,
        [&](const std::vector<Tensor>& in) {
          std::vector<double> mv(static_cast<size_t>(2 * 3 * 3), 0.0);
          mv[1] = -1e30;
          mv[10] = -1e30;
          Tensor mask = Tensor::from_data({2, 3, 3}, mv);
          return mean_all(mul(masked_softmax_lastdim(in[0], mask, 2), in[1]));
        },
        {random_tensor({4, 3, 3}, rng), random_tensor({4, 3, 3}, rng, false)});

    {
      std::vector<std::int64_t> ce_targets;
      for (std::int64_t i = 0; i < a + 1; ++i) {
        ce_targets.push_back(i % 2 == 0 ? static_cast<std::int64_t>(rng.below(6)) : -1);
      }
      run("cross_entropy", seed,
          [ce_targets](const std::vector<Tensor>& in) {
            return softmax_cross_entropy(in[0], ce_targets, -1);
          },
          {random_tensor({a + 1, 6}, rng)});
    }

    run("linear_matmul_bmm", seed,
        [](const std::vector<Tensor>& in) {
          Tensor y = linear(in[0], in[1], in[2]);           // (a,b,4)
          Tensor z = bmm(y, in[3], true);                   // (a,b,2)
          Tensor m = matmul(reshape(z, {z.dim(0) * z.dim(1), 2}), in[4]);
          return mean_all(mul(m, m));
        },
        {random_tensor({a, b, 3}, rng), random_tensor({4, 3}, rng),
         random_tensor({4}, rng), random_tensor({a, 2, 4}, rng),
         random_tensor({2, 3}, rng)});

    run("embedding", seed,
        [&](const std::vector<Tensor>& in) {
          std::vector<std::int64_t> ids{0, 2, 1, 2};
          return mean_all(mul(embedding(in[0], ids, {4}), in[1]));
        },
        {random_tensor({3, c}, rng), random_tensor({4, c}, rng, false)});

    run("conv_general", seed,
        [](const std::vector<Tensor>& in) {
          return mean_all(conv2d(in[0], in[1], in[2],
                                 {.stride_h = 2, .stride_w = 1, .pad_h = 1, .pad_w = 1}));
        },
        {random_tensor({2, 3, 5, 4}, rng), random_tensor({4, 3, 3, 3}, rng),
         random_tensor({4}, rng)});

    run("conv_depthwise", seed,
        [](const std::vector<Tensor>& in) {
          return mean_all(
              conv2d(in[0], in[1], in[2], {.pad_h = 1, .pad_w = 1, .groups = 3}));
        },
        {random_tensor({2, 3, 4, 5}, rng), random_tensor({3, 1, 3, 3}, rng),
         random_tensor({3}, rng)});

    run("conv_grouped", seed,
        [](const std::vector<Tensor>& in) {
          return mean_all(conv2d(in[0], in[1], {}, {.groups = 2}));
        },
        {random_tensor({1, 4, 4, 4}, rng), random_tensor({6, 2, 2, 2}, rng)});

    run("conv_pointwise", seed,
        [](const std::vector<Tensor>& in) {
          return mean_all(conv2d(in[0], in[1], in[2], {}));
        },
        {random_tensor({2, 3, 3, 4}, rng), random_tensor({5, 3, 1, 1}, rng),
         random_tensor({5}, rng)});

    run("pool_resize", seed,
        [](const std::vector<Tensor>& in) {
          Tensor p = avg_pool2d(in[0], 2, 2);
          return mean_all(mul(bilinear_resize(p, 5, 5), in[1]));
        },
        {random_tensor({1, 2, 4, 6}, rng), random_tensor({1, 2, 5, 5}, rng, false)});

    run("window_round_trip", seed,
        [](const std::vector<Tensor>& in) {
          Tensor w = window_partition(in[0], 2, 3);
          Tensor back = window_reverse(w, in[0].dim(0), in[0].dim(2), in[0].dim(3), 2, 3);
          return mean_all(mul(back, in[0]));
        },
        {random_tensor({2, 3, 4, 6}, rng)});

    run("stochastic_depth", seed,
        [seed](const std::vector<Tensor>& in) {
          Rng r(900 + seed);
          return mean_all(stochastic_depth(in[0], 0.4, true, &r));
        },
        {random_tensor({5, 4}, rng)});
  }

  detail = std::to_string(checked) + " checks, max rel err " +
           std::to_string(worst) + " (" + worst_op + ")" + detail;
  return ok;
}

// --------------------------------------------------------------------------
// 2. Architecture shape suite
// --------------------------------------------------------------------------

bool criterion_shapes(std::string& detail) {
  Rng rng(4242);
  VisionEncoder enc(EncoderConfig{}, rng);  // paper-scale defaults
  NoGradGuard ng;
  bool ok = true;

  auto check_stage = [&](const Tensor& t, Shape expect, const char* what) {
    if (t.shape() != expect) {
      ok = false;
      detail += std::string(" ") + what + " got " + shape_str(t.shape()) +
                " want " + shape_str(expect) + ";";
    }
  };

  for (auto [h, w] : {std::pair<std::int64_t, std::int64_t>{1600, 960},
                      std::pair<std::int64_t, std::int64_t>{1600, 1280}}) {
    Rng drng(7);
    Tensor img = Tensor::rand_uniform({1, 3, h, w}, drng, 0.0, 1.0);
    FeatureMap fm = enc.patch_embed(img);
    check_stage(fm.tensor, {1, 64, h / 4, w / 4}, "patch");
    fm = enc.convnext_stage(fm, 1);
    check_stage(fm.tensor, {1, 128, h / 8, w / 4}, "stage1");
    fm = enc.convnext_stage(fm, 2);
    check_stage(fm.tensor, {1, 256, h / 16, w / 4}, "stage2");
    fm = enc.convnext_stage(fm, 3);
    check_stage(fm.tensor, {1, 512, h / 32, w / 8}, "stage3");
    fm.tensor = enc.add_positional(fm.tensor);
    fm = enc.swin_stage(fm, 4);
    check_stage(fm.tensor, {1, 768, h / 32, w / 16}, "stage4");
    fm = enc.swin_stage(fm, 5);
    check_stage(fm.tensor, {1, 1024, h / 32, w / 32}, "stage5");
    fm = enc.swin_stage(fm, 6);
    check_stage(fm.tensor, {1, 1024, h / 32, w / 32}, "stage6");
    detail += " " + std::to_string(h) + "x" + std::to_string(w) + "->" +
              shape_str(fm.tensor.shape());
  }
  return ok;
}

// --------------------------------------------------------------------------
// 3. Windowed-attention oracle
// --------------------------------------------------------------------------

bool criterion_window_oracle(std::string& detail) {
  const std::vector<std::pair<std::int64_t, std::int64_t>> windows{
      {5, 40}, {5, 20}, {10, 10}, {1, 2}, {2, 1}};
  NoGradGuard ng;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(31 + seed);
    const std::int64_t c = 32, heads = 4, h = 10, w = 40;
    MultiHeadAttention attn(c, heads, rng);
    Tensor x = Tensor::randn({1, c, h, w}, rng, 1.0);

    for (auto [wh, ww] : windows) {
      Tensor windows_t = window_partition(x, wh, ww);
      Tensor a = attn.forward(windows_t, windows_t, {});
      Tensor windowed = window_reverse(a, 1, h, w, wh, ww);

      const std::int64_t l = h * w;
      Tensor flat = reshape(permute(x, {0, 2, 3, 1}), {1, l, c});
      std::vector<double> mask(static_cast<size_t>(l * l), 0.0);
      auto window_of = [&, wh = wh, ww = ww](std::int64_t pos) {
        const std::int64_t y = pos / w, xx = pos % w;
        return (y / wh) * (w / ww) + (xx / ww);
      };
      for (std::int64_t i = 0; i < l; ++i)
        for (std::int64_t j = 0; j < l; ++j)
          if (window_of(i) != window_of(j))
            mask[static_cast<size_t>(i * l + j)] = -1e30;
      Tensor full = attn.forward(flat, flat, Tensor::from_data({1, l, l}, mask));
      Tensor full_map = permute(reshape(full, {1, h, w, c}), {0, 3, 1, 2});
      worst = std::max(worst, testutil::max_abs_diff(windowed, full_map));
    }
  }
  detail = "max |delta| = " + std::to_string(worst) + " (allowed 1e-6)";
  return worst <= 1e-6;
}

// --------------------------------------------------------------------------
// 4. Decoder causality + cache consistency
// --------------------------------------------------------------------------

bool criterion_causality(std::string& detail) {
  bool ok = true;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    Rng rng(61 + seed);
    DecoderConfig cfg;
    cfg.num_layers = 1;
    cfg.model_dim = 16;
    cfg.num_heads = 2;
    cfg.max_decode_len = 24;
    cfg.vocab_size = 19;
    SeqDecoder dec(cfg, rng);
    Tensor memory = Tensor::randn({1, 5, 16}, rng, 0.7);
    NoGradGuard ng;
    std::vector<std::int64_t> tokens{1, 4, 9, 2, 7, 3, 5};
    Tensor logits = dec.forward(tokens, 1, 7, memory);
    for (std::int64_t t = 0; t < 6; ++t) {
      auto mutated = tokens;
      for (std::int64_t p = t + 1; p < 7; ++p)
        mutated[static_cast<size_t>(p)] = (mutated[static_cast<size_t>(p)] + 3 + t) % 19;
      Tensor logits2 = dec.forward(mutated, 1, 7, memory);
      for (std::int64_t p = 0; p <= t; ++p) {
        for (std::int64_t v = 0; v < 19; ++v) {
          const auto idx = static_cast<size_t>(p * 19 + v);
          if (logits.values()[idx] != logits2.values()[idx]) {
            ok = false;
            detail += " logits not bit-identical at t=" + std::to_string(p) + ";";
            break;
          }
        }
      }
    }
    for (int trial = 0; trial < 4; ++trial) {
      Tensor mem = Tensor::randn({1, 5, 16}, rng, 1.0);
      auto plain = dec.decode_greedy(mem, 2, 0);
      auto cached = dec.decode_greedy_cached(mem, 2, 0);
      if (plain.ids != cached.ids || plain.truncated != cached.truncated) {
        ok = false;
        detail += " cached != uncached;";
      }
    }
  }
  if (ok) detail = "bit-identical prefixes; cached == uncached on all trials";
  return ok;
}

// --------------------------------------------------------------------------
// 5. Codec round trip, canonical layout, fuzz
// --------------------------------------------------------------------------

bool criterion_codec(std::string& detail) {
  TaskSchema schema = cord_like_schema();
  FieldCodec codec(Vocabulary::builtin_tiny_bpe(), schema);
  bool ok = true;

  Rng rng(2024);
  int clean = 0;
  for (int i = 0; i < 1000; ++i) {
    FieldRecord rec = random_record(schema.fields, rng);
    auto seq = codec.serialize(rec);
    auto parsed = codec.parse(seq.ids);
    if (parsed.record == rec && parsed.diagnostics.empty()) ++clean;
  }
  if (clean != 1000) {
    ok = false;
    detail += " round-trip " + std::to_string(clean) + "/1000;";
  }

  // Canonical receipt layout.
  FieldRecord item1;
  item1.set("name", FieldValue::text("Macchiato"));
  item1.set("price", FieldValue::text("17500"));
  FieldRecord item2;
  item2.set("name", FieldValue::text("TEA"));
  item2.set("price", FieldValue::text("5000"));
  FieldRecord total;
  total.set("total-price", FieldValue::text("22500"));
  total.set("cash-price", FieldValue::text("22500"));
  FieldRecord rec;
  rec.set("menu", FieldValue::list({FieldValue::group(item1), FieldValue::group(item2)}));
  rec.set("total", FieldValue::group(total));
  auto seq = codec.serialize(rec);
  const std::vector<std::string> expect{
      "<s_cord>", "<menu>", "<item>", "<name>", "Mac", "chi", "ato", "</name>",
      "<price>", "17", "500", "</price>", "</item>", "<item>", "<name>", "TEA",
      "</name>", "<price>", "5000", "</price>", "</item>", "</menu>", "<total>",
      "<total-price>", "22", "500", "</total-price>", "<cash-price>", "22", "500",
      "</cash-price>", "</total>", "<End>"};
  bool layout_ok = seq.ids.size() == expect.size();
  for (size_t i = 0; layout_ok && i < expect.size(); ++i) {
    layout_ok = codec.token_string(seq.ids[i]) == expect[i];
  }
  if (!layout_ok) {
    ok = false;
    detail += " canonical layout mismatch;";
  }

  int fuzzed = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<std::int64_t> ids;
    for (std::uint64_t i = 0, n = rng.below(64); i < n; ++i) {
      if (rng.uniform() < 0.5) {
        ids.push_back(static_cast<std::int64_t>(rng.below(13)));
      } else {
        ids.push_back(static_cast<std::int64_t>(
            rng.below(static_cast<std::uint64_t>(codec.vocab_size()))));
      }
    }
    try {
      auto res = codec.parse(ids);
      schema.validate_record(res.record);
      ++fuzzed;
    } catch (...) {
    }
  }
  if (fuzzed != 1000) {
    ok = false;
    detail += " fuzz " + std::to_string(fuzzed) + "/1000 clean;";
  }
  if (ok) {
    detail = "1000/1000 round trips, canonical layout exact, 1000/1000 fuzz parses";
  }
  return ok;
}

// --------------------------------------------------------------------------
// 6. Metrics oracle
// --------------------------------------------------------------------------

bool criterion_metrics(std::string& detail) {
  bool ok = true;
  Rng rng(90210);
  TaskSchema schema = cord_like_schema();
  for (int i = 0; i < 500; ++i) {
    FieldRecord pred = random_record(schema.fields, rng);
    FieldRecord truth = random_record(schema.fields, rng);
    auto res = field_f1(pred, truth);

    // Brute-force oracle with repeated erase.
    auto p = flatten_fields(pred);
    auto t = flatten_fields(truth);
    std::int64_t matches = 0;
    std::vector<bool> used(t.size(), false);
    for (const auto& pe : p) {
      for (size_t k = 0; k < t.size(); ++k) {
        if (!used[k] && t[k] == pe) {
          used[k] = true;
          ++matches;
          break;
        }
      }
    }
    if (res.matches != matches ||
        res.detected != static_cast<std::int64_t>(p.size()) ||
        res.truth != static_cast<std::int64_t>(t.size())) {
      ok = false;
      detail += " counts diverge from oracle at pair " + std::to_string(i) + ";";
      break;
    }
    const bool clean = matches == res.detected && matches == res.truth;
    const double d = dar({{pred, truth}});
    if ((clean && d != 1.0) || (!clean && d != 0.0)) {
      ok = false;
      detail += " dar diverges at pair " + std::to_string(i) + ";";
      break;
    }
  }

  FieldRecord truth4;
  truth4.set("store", FieldValue::text("1"));
  truth4.set("date", FieldValue::text("2"));
  FieldRecord tt;
  tt.set("total-price", FieldValue::text("3"));
  tt.set("cash-price", FieldValue::text("4"));
  truth4.set("total", FieldValue::group(tt));
  FieldRecord pred3;
  pred3.set("store", FieldValue::text("1"));
  pred3.set("date", FieldValue::text("2"));
  FieldRecord pt;
  pt.set("total-price", FieldValue::text("no"));
  pred3.set("total", FieldValue::group(pt));
  auto forced = field_f1(pred3, truth4);
  if (forced.f1 != 4.0 / 7.0) {
    ok = false;
    detail += " forced example f1 = " + std::to_string(forced.f1) + " != 4/7;";
  }
  if (ok) detail = "500/500 pairs match the oracle; forced example f1 = 4/7 exactly";
  return ok;
}

// --------------------------------------------------------------------------
// 7. Overfit run
// --------------------------------------------------------------------------

bool criterion_overfit(std::string& detail) {
  g_overfit.docs.clear();
  for (int i = 0; i < 16; ++i) {
    g_overfit.docs.push_back(generate(static_cast<std::uint64_t>(i), SynthOpts{}));
  }
  g_overfit.model = std::make_unique<DocParserModel>(tiny_model_config(), 2024);

  TrainConfig cfg;
  cfg.phase = "finetune";
  cfg.lr = 1e-3;
  cfg.weight_decay = 0.0;
  cfg.stochastic_depth = 0.0;
  cfg.total_steps = 300;
  cfg.warmup_steps = 10;
  cfg.batch_size = 4;
  cfg.seed = 7;
  cfg.resolution_h = 320;
  cfg.resolution_w = 320;
  cfg.aug.enabled = false;
  cfg.eval_interval = 10;
  cfg.checkpoint_interval = 0;
  // Decoder-first schedule: the encoder stays frozen while the decoder
  // learns to read its features, then refines jointly at a reduced rate.
  cfg.freeze_encoder_steps = 150;
  cfg.encoder_lr_scale = 0.02;
  cfg.early_stop_f1 = 0.9;
  cfg.early_stop_dar = 0.75;

  const std::string dir = (fs::temp_directory_path() / "docparser_accept_overfit").string();
  fs::remove_all(dir);
  Trainer trainer(*g_overfit.model, cfg, g_overfit.docs, dir);
  auto outcome = trainer.run();
  g_overfit.f1 = outcome.final_f1;
  g_overfit.dar = outcome.final_dar;
  g_overfit.steps = outcome.steps;

  detail = "f1 = " + std::to_string(outcome.final_f1) + " (>= 0.9), dar = " +
           std::to_string(outcome.final_dar) + " (>= 0.75) after " +
           std::to_string(outcome.steps) + " steps (<= 300)";
  return outcome.final_f1 >= 0.9 && outcome.final_dar >= 0.75 &&
         outcome.steps <= 300;
}

// --------------------------------------------------------------------------
// 8. Masked-reading mechanism
// --------------------------------------------------------------------------

bool criterion_masked_reading(std::string& detail) {
  bool ok = true;
  double lo = 1.0, hi = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Image img = Image::filled(320, 320, 0.9);
    auto res = mask_blocks(img, 32, 0.15, seed);
    lo = std::min(lo, res.masked_fraction);
    hi = std::max(hi, res.masked_fraction);
  }
  if (lo < 0.14 || hi > 0.16) {
    ok = false;
    detail += " masked fraction range [" + std::to_string(lo) + "," +
              std::to_string(hi) + "] outside [0.14,0.16];";
  }

  // KT loss is zero under feature equality.
  {
    Rng rng(5);
    const std::int64_t c = 6;
    Tensor fm = Tensor::randn({1, c, 3, 8}, rng, 1.0);
    std::vector<double> eye(static_cast<size_t>(c * c), 0.0);
    for (std::int64_t i = 0; i < c; ++i) eye[static_cast<size_t>(i * c + i)] = 1.0;
    Tensor aw = Tensor::from_data({c, c, 1, 1}, eye);
    Tensor ab = Tensor::zeros({c});
    const double zero_loss = knowledge_transfer_loss(fm, fm, aw, ab).item();
    if (zero_loss != 0.0) {
      ok = false;
      detail += " equality loss " + std::to_string(zero_loss) + " != 0;";
    }
  }

  // KT loss falls by at least half in 50 steps on a fixed batch.
  {
    ModelConfig mc = micro_model_config();
    mc.kt_teacher_channels = 6;
    DocParserModel model(mc, 11);
    RandomTeacher teacher(6, 99);
    Rng img_rng(3);
    Tensor batch = Tensor::rand_uniform({2, 3, 64, 64}, img_rng, 0.0, 1.0);
    std::vector<std::int64_t> idx{0, 1};
    Tensor teacher_fm = teacher.features(batch, idx);
    AdamW opt(model.parameters(), {.lr = 5e-3, .weight_decay = 0.0});
    double first = -1.0, last = -1.0;
    for (int step = 0; step < 50; ++step) {
      opt.zero_grad();
      Tensor loss = knowledge_transfer_loss(model.encode_stage3(batch), teacher_fm,
                                            model.kt_adapter_weight(),
                                            model.kt_adapter_bias());
      if (first < 0) first = loss.item();
      backward(loss);
      opt.step();
      last = loss.item();
    }
    if (!(last <= 0.5 * first)) {
      ok = false;
      detail += " kt loss " + std::to_string(first) + " -> " + std::to_string(last) +
                " (needs >= 50% drop);";
    } else {
      detail += " kt loss " + std::to_string(first) + " -> " + std::to_string(last) +
                ";";
    }
  }
  if (ok) {
    detail = "fraction in [" + std::to_string(lo) + "," + std::to_string(hi) +
             "]; equality loss 0;" + detail;
  }
  return ok;
}

// --------------------------------------------------------------------------
// 9. Tokenizer effect
// --------------------------------------------------------------------------

bool criterion_tokenizer(std::string& detail) {
  TaskSchema schema = TaskSchema::builtin_receipt();
  FieldCodec bpe(Vocabulary::builtin_tiny_bpe(), schema);
  FieldCodec chars(Vocabulary::char_level(), schema);

  double sub_steps = 0.0, char_steps = 0.0;
  int docs = 0;
  bool fidelity = true;
  for (std::uint64_t seed = 300; seed < 340; ++seed) {
    auto s = generate(seed, SynthOpts{});
    // Decode steps = tokens the decoder must emit for the serialized record
    // plus the reading sequence.
    sub_steps += double(bpe.serialize(s.record).ids.size() +
                        bpe.serialize_reading(s.transcription).ids.size());
    char_steps += double(chars.serialize(s.record).ids.size() +
                         chars.serialize_reading(s.transcription).ids.size());
    ++docs;
    auto sub_ids = bpe.tokenize_text(s.transcription);
    auto chr_ids = chars.tokenize_text(s.transcription);
    fidelity = fidelity && bpe.detokenize(sub_ids) == s.transcription &&
               chars.detokenize(chr_ids) == s.transcription;
  }
  sub_steps /= docs;
  char_steps /= docs;
  detail = "mean decode steps: subword " + std::to_string(sub_steps) + " vs char " +
           std::to_string(char_steps) +
           (fidelity ? "; round-trip fidelity equal (exact)" : "; FIDELITY BROKEN");
  return sub_steps < char_steps && fidelity;
}

// --------------------------------------------------------------------------
// 10. Determinism + resume
// --------------------------------------------------------------------------

bool criterion_determinism(std::string& detail) {
  auto make_docs = [] {
    std::vector<DocumentSample> docs;
    for (int i = 0; i < 4; ++i) {
      DocumentSample s;
      s.image = Image::filled(64, 64, 0.95);
      const std::string price = std::to_string(100 + 37 * i);
      draw_text(s.image, 2, 4 + (i % 3) * 2, "T " + price, 1, 0.1);
      s.record.set("store", FieldValue::text("T"));
      s.record.set("date", FieldValue::text(price));
      s.transcription = "T " + price;
      docs.push_back(std::move(s));
    }
    return docs;
  };
  auto docs = make_docs();
  TrainConfig cfg;
  cfg.phase = "finetune";
  cfg.lr = 1e-3;
  cfg.total_steps = 6;
  cfg.warmup_steps = 1;
  cfg.batch_size = 1;
  cfg.seed = 123;
  cfg.resolution_h = 64;
  cfg.resolution_w = 64;
  cfg.eval_interval = 0;
  cfg.checkpoint_interval = 3;

  auto snapshot = [](DocParserModel& m) {
    std::vector<double> all;
    for (auto& p : m.parameters())
      all.insert(all.end(), p.tensor.values().begin(), p.tensor.values().end());
    return all;
  };

  const std::string dir_a = (fs::temp_directory_path() / "docparser_accept_detA").string();
  fs::remove_all(dir_a);
  DocParserModel ma(micro_model_config(), 99);
  Trainer ta(ma, cfg, docs, dir_a);
  ta.run();
  auto snap_a = snapshot(ma);

  DocParserModel mb(micro_model_config(), 99);
  Trainer tb(mb, cfg, docs,
             (fs::temp_directory_path() / "docparser_accept_detB").string());
  tb.run();
  const bool repro = snap_a == snapshot(mb);

  DocParserModel mc(micro_model_config(), 31337);
  Trainer tc(mc, cfg, docs,
             (fs::temp_directory_path() / "docparser_accept_detC").string());
  tc.resume_from(dir_a + "/ckpt_step_000003.dpck");
  tc.run();
  const bool resume_match = snap_a == snapshot(mc);

  detail = std::string("fixed-seed rerun ") + (repro ? "bit-identical" : "DIVERGED") +
           "; resumed run " + (resume_match ? "bit-identical" : "DIVERGED");
  return repro && resume_match;
}

// --------------------------------------------------------------------------
// 11. Resolution degradation
// --------------------------------------------------------------------------

bool criterion_resolution(std::string& detail) {
  if (!g_overfit.model) {
    detail = "overfit model unavailable (criterion 7 must run first)";
    return false;
  }
  NoGradGuard ng;
  std::vector<std::pair<FieldRecord, FieldRecord>> native, degraded;
  for (const auto& doc : g_overfit.docs) {
    auto ex = g_overfit.model->extract(doc.image);
    native.emplace_back(ex.record, doc.record);
    // Downscale far below glyph legibility (14px glyphs -> ~3.5px), then
    // upsample back so the encoder constraints still hold.
    Image tiny = resize_bilinear(doc.image, 80, 80);
    Image back = resize_bilinear(tiny, 320, 320);
    auto ex2 = g_overfit.model->extract(back);
    degraded.emplace_back(ex2.record, doc.record);
  }
  const double f1_native = field_f1_corpus(native).f1 * 100.0;
  const double f1_degraded = field_f1_corpus(degraded).f1 * 100.0;
  detail = "native F1 " + std::to_string(f1_native) + " vs downscaled F1 " +
           std::to_string(f1_degraded) + " (drop >= 30 points required)";
  return f1_native - f1_degraded >= 30.0;
}

}  // namespace

int main() {
  std::vector<Criterion> criteria{
      {1, "gradient suite (central differences, 20 seeds per op)", criterion_gradients},
      {2, "architecture shape schedule at 1600x960 and 1600x1280", criterion_shapes},
      {3, "windowed attention equals block-diagonal full attention", criterion_window_oracle},
      {4, "decoder causality and cache consistency", criterion_causality},
      {5, "codec round trip, canonical layout, fuzz robustness", criterion_codec},
      {6, "field F1 / DAR against brute-force oracles", criterion_metrics},
      {7, "tiny-config overfit: 16 docs, <=300 steps, F1>=0.9, DAR>=0.75",
       criterion_overfit},
      {8, "masked-reading fraction and knowledge-transfer convergence",
       criterion_masked_reading},
      {9, "subword decoding needs fewer steps than character-level", criterion_tokenizer},
      {10, "bit-reproducible training and exact resume", criterion_determinism},
      {11, "drastic F1 drop below glyph-legible resolution", criterion_resolution},
  };

  int failures = 0;
  for (auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    std::string detail;
    bool ok = false;
    try {
      ok = c.run(detail);
    } catch (const std::exception& e) {
      detail = std::string("exception: ") + e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("[%s] criterion %2d: %s — %s (%.1fs)\n", ok ? "PASS" : "FAIL",
                c.number, c.name.c_str(), detail.c_str(), secs);
    std::fflush(stdout);
    if (!ok) ++failures;
  }
  if (failures) {
    std::printf("%d criterion(s) failed\n", failures);
    return 1;
  }
  std::printf("all %zu criteria passed\n", criteria.size());
  return 0;
}
