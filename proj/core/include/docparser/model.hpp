#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "docparser/codec.hpp"
#include "docparser/decoder.hpp"
#include "docparser/encoder.hpp"
#include "docparser/image.hpp"

namespace docparser {

/// Complete architectural description plus the embedded vocabulary and
/// schema, so checkpoints are self-contained.
struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;  // vocab_size/memory_dim are derived at build time
  std::int64_t train_height = 1600;
  std::int64_t train_width = 960;
  std::string vocab_json;   // Vocabulary::to_json()
  std::string schema_json;  // TaskSchema::to_json()
  std::int64_t kt_teacher_channels = 0;  // >0 adds a pointwise KT adapter

  /// Fills derived fields (positional grid, decoder dims) from the training
  /// resolution and embedded codec; validates the result.
  void finalize();

  std::string to_json() const;
  static ModelConfig from_json(const std::string& json);
};

/// Encoder + decoder + codec glued together behind one parameter registry.
class DocParserModel {
 public:
  DocParserModel(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  VisionEncoder& encoder() { return encoder_; }
  const VisionEncoder& encoder() const { return encoder_; }
  SeqDecoder& decoder() { return decoder_; }
  const SeqDecoder& decoder() const { return decoder_; }
  const FieldCodec& codec() const { return *codec_; }

  /// Full encode, flattened for cross-attention: (N, h*w, C5).
  Tensor encode_memory(const Tensor& images, bool training = false,
                       Rng* rng = nullptr) const;
  /// Convolutional-stages output (N, C3, H/32, W/8) before the positional
  /// embedding; the knowledge-transfer target surface.
  Tensor encode_stage3(const Tensor& images, bool training = false,
                       Rng* rng = nullptr) const;

  /// All trainable parameters in a stable registry order.
  std::vector<Parameter> parameters();

  Tensor kt_adapter_weight() const { return kt_adapter_w_; }
  Tensor kt_adapter_bias() const { return kt_adapter_b_; }
  bool has_kt_adapter() const { return kt_adapter_w_.defined(); }

  struct Extraction {
    FieldRecord record;
    std::vector<std::string> diagnostics;
    TokenSequence tokens;
  };
  /// Greedy cached decode of one image, parsed with recovery.
  Extraction extract(const Image& img) const;
  Extraction extract(const Tensor& image_batch1) const;

 private:
  ModelConfig cfg_;
  std::unique_ptr<FieldCodec> codec_;
  VisionEncoder encoder_;
  SeqDecoder decoder_;
  Tensor kt_adapter_w_, kt_adapter_b_;
};

}  // namespace docparser
