#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "docparser/ops.hpp"
#include "docparser/tensor.hpp"

namespace docparser {

/// (B, S, C) -> (B*heads, S, C/heads)
Tensor split_heads(const Tensor& x, std::int64_t heads);
/// (B*heads, S, C/heads) -> (B, S, C)
Tensor merge_heads(const Tensor& x, std::int64_t heads);

/// Multi-head attention over token sequences. Query and key/value inputs
/// are (B, S, C) and (B, L, C); the optional additive mask follows the
/// masked_softmax_lastdim broadcast rule.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  /// identity_readout initialises the value/output projections near the
  /// identity so the attention output starts as a contentful pooled
  /// readout of key/value inputs rather than a small random projection.
  /// Used by decoder cross-attention: in small-data regimes the decoder
  /// otherwise settles into a purely autoregressive solution before the
  /// image pathway carries signal.
  MultiHeadAttention(std::int64_t dim, std::int64_t heads, Rng& rng,
                     bool identity_readout = false);

  Tensor forward(const Tensor& query, const Tensor& keyval,
                 const Tensor& mask) const;

  // Pieces for incrementally cached decoding.
  Tensor project_q(const Tensor& x) const;   // (B,S,C) -> (B*H, S, dh)
  Tensor project_k(const Tensor& x) const;
  Tensor project_v(const Tensor& x) const;
  Tensor attend(const Tensor& q, const Tensor& k, const Tensor& v,
                const Tensor& mask) const;

  std::int64_t dim() const { return dim_; }
  std::int64_t heads() const { return heads_; }

  void collect_params(const std::string& prefix, std::vector<Parameter>& out);

 private:
  Tensor wq_, bq_, wk_, bk_, wv_, bv_, wo_, bo_;
  std::int64_t dim_ = 0;
  std::int64_t heads_ = 0;
};

}  // namespace docparser
