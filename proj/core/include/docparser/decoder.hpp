#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "docparser/attention.hpp"
#include "docparser/ops.hpp"
#include "docparser/tensor.hpp"

namespace docparser {

struct DecoderConfig {
  std::int64_t num_layers = 1;
  std::int64_t model_dim = 0;  // 0: derived from the encoder's C5 at build
  std::int64_t ffn_dim = 0;       // 0 -> 4 * model_dim
  std::int64_t num_heads = 16;
  std::int64_t max_decode_len = 768;
  std::int64_t vocab_size = 0;
  std::int64_t memory_dim = 0;  // 0 -> model_dim; a projection is inserted otherwise

  void validate() const;
};

/// Autoregressive transformer decoder conditioned on the encoder feature
/// map (flattened to (N, h*w, C)). Layers follow the vanilla post-norm
/// layout: self-attention, cross-attention, feed-forward, each wrapped in
/// residual + layer norm.
class SeqDecoder {
 public:
  SeqDecoder() = default;
  SeqDecoder(DecoderConfig cfg, Rng& rng);

  /// Teacher-forcing logits for a (N, T) token batch against memory
  /// (N, L, memory_dim). Self-attention is causally masked.
  Tensor forward(const std::vector<std::int64_t>& tokens, std::int64_t n,
                 std::int64_t t, const Tensor& memory) const;

  /// Mean next-token cross-entropy of full sequences (each starting with a
  /// task token and ending with the END token). Sequences are padded to the
  /// longest; padded targets are ignored. Throws if a sequence exceeds
  /// max_decode_len rather than silently truncating.
  Tensor teacher_forced_loss(const std::vector<std::vector<std::int64_t>>& sequences,
                             const Tensor& memory, std::int64_t end_token) const;

  struct GreedyResult {
    std::vector<std::int64_t> ids;  // includes the task token and END if reached
    bool truncated = false;
  };

  /// Deterministic greedy decode; re-runs the full forward each step.
  GreedyResult decode_greedy(const Tensor& memory, std::int64_t task_token,
                             std::int64_t end_token) const;
  /// Greedy decode with per-layer key/value caching; produces the same
  /// token sequence as decode_greedy.
  GreedyResult decode_greedy_cached(const Tensor& memory, std::int64_t task_token,
                                    std::int64_t end_token) const;

  const DecoderConfig& config() const { return cfg_; }
  void collect_params(const std::string& prefix, std::vector<Parameter>& out);

 private:
  struct Norm {
    Tensor gamma, beta;
  };
  struct Layer {
    MultiHeadAttention self_attn;
    Norm norm1;
    MultiHeadAttention cross_attn;
    Norm norm2;
    Tensor mlp1_w, mlp1_b, mlp2_w, mlp2_b;
    Norm norm3;
  };

  Tensor embed_tokens(const std::vector<std::int64_t>& tokens, std::int64_t n,
                      std::int64_t t, std::int64_t pos_offset) const;
  Tensor project_memory(const Tensor& memory) const;
  Tensor layer_tail(const Layer& layer, const Tensor& x, const Tensor& mem_k,
                    const Tensor& mem_v) const;

  Tensor embed_, pos_embed_;
  Tensor head_w_, head_b_;
  Tensor mem_proj_w_, mem_proj_b_;  // undefined when memory_dim == model_dim
  std::vector<Layer> layers_;
  DecoderConfig cfg_;
};

/// (1, T, T) additive causal mask: position i may attend to j <= i.
Tensor causal_mask(std::int64_t t);

}  // namespace docparser
