#include "docparser/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace docparser {

Tensor split_heads(const Tensor& x, std::int64_t heads) {
  const std::int64_t b = x.dim(0), s = x.dim(1), c = x.dim(2);
  if (c % heads != 0) {
    throw std::invalid_argument("split_heads: dim " + std::to_string(c) +
                                " not divisible by " + std::to_string(heads) +
                                " heads");
  }
  const std::int64_t dh = c / heads;
  Tensor t = reshape(x, {b, s, heads, dh});
  t = permute(t, {0, 2, 1, 3});
  return reshape(t, {b * heads, s, dh});
}

Tensor merge_heads(const Tensor& x, std::int64_t heads) {
  const std::int64_t bh = x.dim(0), s = x.dim(1), dh = x.dim(2);
  const std::int64_t b = bh / heads;
  Tensor t = reshape(x, {b, heads, s, dh});
  t = permute(t, {0, 2, 1, 3});
  return reshape(t, {b, s, heads * dh});
}

MultiHeadAttention::MultiHeadAttention(std::int64_t dim, std::int64_t heads, Rng& rng,
                                       bool identity_readout)
    : dim_(dim), heads_(heads) {
  if (dim % heads != 0) {
    throw std::invalid_argument("attention dim " + std::to_string(dim) +
                                " not divisible by heads " + std::to_string(heads));
  }
  wq_ = Tensor::xavier_normal({dim, dim}, rng, dim, dim);
  bq_ = Tensor::zeros({dim}, true);
  wk_ = Tensor::xavier_normal({dim, dim}, rng, dim, dim);
  bk_ = Tensor::zeros({dim}, true);
  wv_ = Tensor::xavier_normal({dim, dim}, rng, dim, dim);
  bv_ = Tensor::zeros({dim}, true);
  wo_ = Tensor::xavier_normal({dim, dim}, rng, dim, dim);
  bo_ = Tensor::zeros({dim}, true);
  if (identity_readout) {
    for (std::int64_t i = 0; i < dim; ++i) {
      wv_.data()[i * dim + i] += 1.0;
      wo_.data()[i * dim + i] += 1.0;
    }
  }
}

Tensor MultiHeadAttention::project_q(const Tensor& x) const {
  return split_heads(linear(x, wq_, bq_), heads_);
}
Tensor MultiHeadAttention::project_k(const Tensor& x) const {
  return split_heads(linear(x, wk_, bk_), heads_);
}
Tensor MultiHeadAttention::project_v(const Tensor& x) const {
  return split_heads(linear(x, wv_, bv_), heads_);
}

Tensor MultiHeadAttention::attend(const Tensor& q, const Tensor& k, const Tensor& v,
                                  const Tensor& mask) const {
  const std::int64_t dh = dim_ / heads_;
  Tensor scores = scale(bmm(q, k, /*trans_b=*/true), 1.0 / std::sqrt(double(dh)));
  Tensor attn = masked_softmax_lastdim(scores, mask, heads_);
  Tensor ctx = merge_heads(bmm(attn, v), heads_);
  return linear(ctx, wo_, bo_);
}

Tensor MultiHeadAttention::forward(const Tensor& query, const Tensor& keyval,
                                   const Tensor& mask) const {
  return attend(project_q(query), project_k(keyval), project_v(keyval), mask);
}

void MultiHeadAttention::collect_params(const std::string& prefix,
                                        std::vector<Parameter>& out) {
  out.push_back({prefix + ".wq.weight", wq_});
  out.push_back({prefix + ".wq.bias", bq_});
  out.push_back({prefix + ".wk.weight", wk_});
  out.push_back({prefix + ".wk.bias", bk_});
  out.push_back({prefix + ".wv.weight", wv_});
  out.push_back({prefix + ".wv.bias", bv_});
  out.push_back({prefix + ".wo.weight", wo_});
  out.push_back({prefix + ".wo.bias", bo_});
}

}  // namespace docparser
