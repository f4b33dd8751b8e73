#include "docparser/decoder.hpp"

#include <algorithm>
#include <stdexcept>

namespace docparser {

void DecoderConfig::validate() const {
  auto fail = [](const std::string& m) {
    throw std::invalid_argument("decoder config: " + m);
  };
  if (num_layers < 1) fail("num_layers must be >= 1");
  if (model_dim < 1) fail("model_dim must be set (0 means derive from the encoder, which only ModelConfig::finalize does)");
  if (num_heads < 1 || model_dim % num_heads != 0)
    fail("model_dim must be divisible by num_heads");
  if (max_decode_len < 2) fail("max_decode_len must be >= 2");
  if (vocab_size < 2) fail("vocab_size must be >= 2");
}

Tensor causal_mask(std::int64_t t) {
  std::vector<double> m(static_cast<size_t>(t * t), 0.0);
  for (std::int64_t i = 0; i < t; ++i) {
    for (std::int64_t j = i + 1; j < t; ++j) {
      m[static_cast<size_t>(i * t + j)] = -1e30;
    }
  }
  return Tensor::from_data({1, t, t}, std::move(m));
}

SeqDecoder::SeqDecoder(DecoderConfig cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  if (cfg_.ffn_dim == 0) cfg_.ffn_dim = 4 * cfg_.model_dim;
  if (cfg_.memory_dim == 0) cfg_.memory_dim = cfg_.model_dim;
  const double std = 0.02;
  const std::int64_t d = cfg_.model_dim;
  embed_ = Tensor::randn({cfg_.vocab_size, d}, rng, std, true);
  pos_embed_ = Tensor::randn({cfg_.max_decode_len, d}, rng, std, true);
  if (cfg_.memory_dim != d) {
    mem_proj_w_ = Tensor::xavier_normal({d, cfg_.memory_dim}, rng, cfg_.memory_dim, d);
    mem_proj_b_ = Tensor::zeros({d}, true);
  }
  layers_.resize(static_cast<size_t>(cfg_.num_layers));
  for (auto& layer : layers_) {
    layer.self_attn = MultiHeadAttention(d, cfg_.num_heads, rng);
    layer.norm1 = {Tensor::ones({d}, true), Tensor::zeros({d}, true)};
    layer.cross_attn =
        MultiHeadAttention(d, cfg_.num_heads, rng, /*identity_readout=*/true);
    layer.norm2 = {Tensor::ones({d}, true), Tensor::zeros({d}, true)};
    layer.mlp1_w = Tensor::xavier_normal({cfg_.ffn_dim, d}, rng, d, cfg_.ffn_dim);
    layer.mlp1_b = Tensor::zeros({cfg_.ffn_dim}, true);
    layer.mlp2_w = Tensor::xavier_normal({d, cfg_.ffn_dim}, rng, cfg_.ffn_dim, d);
    layer.mlp2_b = Tensor::zeros({d}, true);
    layer.norm3 = {Tensor::ones({d}, true), Tensor::zeros({d}, true)};
  }
  head_w_ = Tensor::randn({cfg_.vocab_size, d}, rng, std, true);
  head_b_ = Tensor::zeros({cfg_.vocab_size}, true);
}

Tensor SeqDecoder::embed_tokens(const std::vector<std::int64_t>& tokens,
                                std::int64_t n, std::int64_t t,
                                std::int64_t pos_offset) const {
  Tensor x = embedding(embed_, tokens, {n, t});
  Tensor pos = narrow(pos_embed_, 0, pos_offset, t);
  return add_bias_nd(x, pos);
}

Tensor SeqDecoder::project_memory(const Tensor& memory) const {
  if (memory.ndim() != 3) {
    throw std::invalid_argument("decoder: memory must be (N, L, C), got " +
                                shape_str(memory.shape()));
  }
  if (memory.dim(2) != cfg_.memory_dim) {
    throw std::invalid_argument("decoder: memory channels " +
                                std::to_string(memory.dim(2)) + " do not match " +
                                std::to_string(cfg_.memory_dim));
  }
  if (!mem_proj_w_.defined()) return memory;
  return linear(memory, mem_proj_w_, mem_proj_b_);
}

Tensor SeqDecoder::layer_tail(const Layer& layer, const Tensor& x, const Tensor& mem_k,
                              const Tensor& mem_v) const {
  Tensor q = layer.cross_attn.project_q(x);
  Tensor b = layer.cross_attn.attend(q, mem_k, mem_v, {});
  Tensor h = layer_norm(add(x, b), layer.norm2.gamma, layer.norm2.beta);
  Tensor f = linear(gelu(linear(h, layer.mlp1_w, layer.mlp1_b)), layer.mlp2_w,
                    layer.mlp2_b);
  return layer_norm(add(h, f), layer.norm3.gamma, layer.norm3.beta);
}

Tensor SeqDecoder::forward(const std::vector<std::int64_t>& tokens, std::int64_t n,
                           std::int64_t t, const Tensor& memory) const {
  if (t > cfg_.max_decode_len) {
    throw std::invalid_argument("decoder: sequence length " + std::to_string(t) +
                                " exceeds max_decode_len " +
                                std::to_string(cfg_.max_decode_len));
  }
  if (static_cast<std::int64_t>(tokens.size()) != n * t) {
    throw std::invalid_argument("decoder: token buffer does not match (N,T)");
  }
  Tensor mem = project_memory(memory);
  Tensor x = embed_tokens(tokens, n, t, 0);
  Tensor cmask = causal_mask(t);
  for (const auto& layer : layers_) {
    Tensor a = layer.self_attn.forward(x, x, cmask);
    x = layer_norm(add(x, a), layer.norm1.gamma, layer.norm1.beta);
    Tensor mem_k = layer.cross_attn.project_k(mem);
    Tensor mem_v = layer.cross_attn.project_v(mem);
    x = layer_tail(layer, x, mem_k, mem_v);
  }
  return linear(x, head_w_, head_b_);
}

Tensor SeqDecoder::teacher_forced_loss(
    const std::vector<std::vector<std::int64_t>>& sequences, const Tensor& memory,
    std::int64_t end_token) const {
  if (sequences.empty()) {
    throw std::invalid_argument("teacher_forced_loss: empty batch");
  }
  std::int64_t max_len = 0;
  for (const auto& seq : sequences) {
    if (seq.size() < 2) {
      throw std::invalid_argument(
          "teacher_forced_loss: sequence must hold at least task token and END");
    }
    if (static_cast<std::int64_t>(seq.size()) > cfg_.max_decode_len) {
      throw std::invalid_argument(
          "teacher_forced_loss: sequence length " + std::to_string(seq.size()) +
          " exceeds max_decode_len " + std::to_string(cfg_.max_decode_len) +
          "; refusing to truncate");
    }
    if (seq.back() != end_token) {
      throw std::invalid_argument("teacher_forced_loss: sequence must end with END");
    }
    max_len = std::max(max_len, static_cast<std::int64_t>(seq.size()));
  }
  const auto n = static_cast<std::int64_t>(sequences.size());
  const std::int64_t t_in = max_len - 1;
  // Inputs are seq[0..L-2]; targets are seq[1..L-1]; padding uses END as a
  // harmless input token and ignore_index as target.
  std::vector<std::int64_t> inputs(static_cast<size_t>(n * t_in), end_token);
  std::vector<std::int64_t> targets(static_cast<size_t>(n * t_in), -1);
  for (std::int64_t i = 0; i < n; ++i) {
    const auto& seq = sequences[static_cast<size_t>(i)];
    const auto len = static_cast<std::int64_t>(seq.size());
    for (std::int64_t p = 0; p + 1 < len; ++p) {
      inputs[static_cast<size_t>(i * t_in + p)] = seq[static_cast<size_t>(p)];
      targets[static_cast<size_t>(i * t_in + p)] = seq[static_cast<size_t>(p + 1)];
    }
  }
  Tensor logits = forward(inputs, n, t_in, memory);
  // Per-sample mean, then batch mean: keeps gradient accumulation over
  // micro-batches exactly equivalent to one large batch.
  Tensor total;
  for (std::int64_t i = 0; i < n; ++i) {
    Tensor row = reshape(narrow(logits, 0, i, 1), {t_in, cfg_.vocab_size});
    std::vector<std::int64_t> row_targets(
        targets.begin() + i * t_in, targets.begin() + (i + 1) * t_in);
    Tensor li = softmax_cross_entropy(row, row_targets, -1);
    total = total.defined() ? add(total, li) : li;
  }
  return scale(total, 1.0 / static_cast<double>(n));
}

SeqDecoder::GreedyResult SeqDecoder::decode_greedy(const Tensor& memory,
                                                   std::int64_t task_token,
                                                   std::int64_t end_token) const {
  NoGradGuard ng;
  GreedyResult res;
  res.ids = {task_token};
  while (static_cast<std::int64_t>(res.ids.size()) < cfg_.max_decode_len) {
    const auto t = static_cast<std::int64_t>(res.ids.size());
    Tensor logits = forward(res.ids, 1, t, memory);
    const double* row = logits.data() + (t - 1) * cfg_.vocab_size;
    const std::int64_t next =
        std::max_element(row, row + cfg_.vocab_size) - row;
    res.ids.push_back(next);
    if (next == end_token) return res;
  }
  res.truncated = true;
  return res;
}

SeqDecoder::GreedyResult SeqDecoder::decode_greedy_cached(
    const Tensor& memory, std::int64_t task_token, std::int64_t end_token) const {
  NoGradGuard ng;
  Tensor mem = project_memory(memory);
  const auto n_layers = layers_.size();
  std::vector<Tensor> mem_k(n_layers), mem_v(n_layers);
  std::vector<Tensor> self_k(n_layers), self_v(n_layers);
  for (size_t l = 0; l < n_layers; ++l) {
    mem_k[l] = layers_[l].cross_attn.project_k(mem);
    mem_v[l] = layers_[l].cross_attn.project_v(mem);
  }

  GreedyResult res;
  res.ids = {task_token};
  while (static_cast<std::int64_t>(res.ids.size()) < cfg_.max_decode_len) {
    const auto t = static_cast<std::int64_t>(res.ids.size());
    Tensor x = embed_tokens({res.ids.back()}, 1, 1, t - 1);
    for (size_t l = 0; l < n_layers; ++l) {
      const auto& layer = layers_[l];
      Tensor q = layer.self_attn.project_q(x);
      Tensor k_new = layer.self_attn.project_k(x);
      Tensor v_new = layer.self_attn.project_v(x);
      self_k[l] = self_k[l].defined() ? concat({self_k[l], k_new}, 1) : k_new;
      self_v[l] = self_v[l].defined() ? concat({self_v[l], v_new}, 1) : v_new;
      // Only past positions are in the cache, so no causal mask is needed.
      Tensor a = layer.self_attn.attend(q, self_k[l], self_v[l], {});
      Tensor h = layer_norm(add(x, a), layer.norm1.gamma, layer.norm1.beta);
      x = layer_tail(layer, h, mem_k[l], mem_v[l]);
    }
    Tensor logits = linear(x, head_w_, head_b_);
    const double* row = logits.data();
    const std::int64_t next = std::max_element(row, row + cfg_.vocab_size) - row;
    res.ids.push_back(next);
    if (next == end_token) return res;
  }
  res.truncated = true;
  return res;
}

void SeqDecoder::collect_params(const std::string& prefix,
                                std::vector<Parameter>& out) {
  out.push_back({prefix + ".embed.weight", embed_});
  out.push_back({prefix + ".pos_embed", pos_embed_});
  if (mem_proj_w_.defined()) {
    out.push_back({prefix + ".mem_proj.weight", mem_proj_w_});
    out.push_back({prefix + ".mem_proj.bias", mem_proj_b_});
  }
  for (size_t l = 0; l < layers_.size(); ++l) {
    auto& layer = layers_[l];
    const std::string lp = prefix + ".layer" + std::to_string(l);
    layer.self_attn.collect_params(lp + ".self_attn", out);
    out.push_back({lp + ".norm1.gamma", layer.norm1.gamma});
    out.push_back({lp + ".norm1.beta", layer.norm1.beta});
    layer.cross_attn.collect_params(lp + ".cross_attn", out);
    out.push_back({lp + ".norm2.gamma", layer.norm2.gamma});
    out.push_back({lp + ".norm2.beta", layer.norm2.beta});
    out.push_back({lp + ".mlp1.weight", layer.mlp1_w});
    out.push_back({lp + ".mlp1.bias", layer.mlp1_b});
    out.push_back({lp + ".mlp2.weight", layer.mlp2_w});
    out.push_back({lp + ".mlp2.bias", layer.mlp2_b});
    out.push_back({lp + ".norm3.gamma", layer.norm3.gamma});
    out.push_back({lp + ".norm3.beta", layer.norm3.beta});
  }
  out.push_back({prefix + ".head.weight", head_w_});
  out.push_back({prefix + ".head.bias", head_b_});
}

}  // namespace docparser
