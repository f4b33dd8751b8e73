#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "docparser/codec.hpp"
#include "docparser/image.hpp"
#include "docparser/rng.hpp"

namespace docparser {

/// Image + structured ground truth + full reading-order transcription.
/// Every record value appears verbatim in the transcription.
struct DocumentSample {
  Image image;
  FieldRecord record;
  std::string transcription;
  std::uint64_t seed = 0;
};

struct SynthOpts {
  std::string template_id = "receipt";
  std::int64_t height = 320;
  std::int64_t width = 320;
};

/// Deterministic synthetic receipt: same (seed, template, resolution) gives
/// a bit-identical sample. Throws when the resolution cannot fit the
/// template at the built-in font scale.
DocumentSample generate(std::uint64_t seed, const SynthOpts& opts);

/// Schema of the generated records (the built-in receipt schema).
TaskSchema synth_schema();

struct MaskBlocksResult {
  Image image;                      // masked copy
  std::vector<std::uint8_t> mask;   // one flag per block, row-major
  std::int64_t blocks_h = 0;
  std::int64_t blocks_w = 0;
  std::int64_t masked_blocks = 0;
  double masked_fraction = 0.0;
};

/// Masks non-overlapping block x block squares chosen uniformly at random
/// until the covered fraction reaches target_ratio (fill value 0.5). Throws
/// when the image holds no full block or the block grid cannot realise the
/// ratio within +-0.01.
MaskBlocksResult mask_blocks(const Image& img, std::int64_t block = 32,
                             double target_ratio = 0.15, std::uint64_t seed = 0);

/// 5x7 bitmap text rendering used by the generator (exposed for tests).
void draw_text(Image& img, std::int64_t x, std::int64_t y, const std::string& text,
               std::int64_t scale, double ink);
std::int64_t glyph_advance(std::int64_t scale);
std::int64_t glyph_height(std::int64_t scale);

}  // namespace docparser
