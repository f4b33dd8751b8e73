#include "docparser/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace docparser {

AdamW::AdamW(std::vector<Parameter> params, AdamWOpts opts)
    : params_(std::move(params)), opts_(opts) {
  moments_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    const auto n = static_cast<size_t>(params_[i].tensor.numel());
    moments_[i].m.assign(n, 0.0);
    moments_[i].v.assign(n, 0.0);
  }
}

void AdamW::step() {
  ++step_;
  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(step_));
  for (size_t pi = 0; pi < params_.size(); ++pi) {
    auto& p = params_[pi];
    if (!p.tensor.has_grad()) continue;
    const auto g = p.tensor.grad();
    for (double gv : g) {
      if (!std::isfinite(gv)) {
        throw std::runtime_error("non-finite gradient for parameter '" + p.name + "'");
      }
    }
    double* pv = p.tensor.data();
    auto& m = moments_[pi].m;
    auto& v = moments_[pi].v;
    const double lr = lr_scales_.empty() ? opts_.lr : opts_.lr * lr_scales_[pi];
    const double decay = lr * opts_.weight_decay;
    for (size_t i = 0; i < g.size(); ++i) {
      pv[i] -= decay * pv[i];
      m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * g[i];
      v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      pv[i] -= lr * m_hat / (std::sqrt(v_hat) + opts_.eps);
    }
  }
}

void AdamW::set_lr_scales(std::vector<double> scales) {
  if (scales.size() != params_.size()) {
    throw std::invalid_argument("lr scales must align with parameter count");
  }
  lr_scales_ = std::move(scales);
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void AdamW::restore(std::int64_t step, std::vector<Moments> moments) {
  if (moments.size() != params_.size()) {
    throw std::invalid_argument("optimizer restore: expected " +
                                std::to_string(params_.size()) + " moment pairs, got " +
                                std::to_string(moments.size()));
  }
  for (size_t i = 0; i < moments.size(); ++i) {
    const auto n = static_cast<size_t>(params_[i].tensor.numel());
    if (moments[i].m.size() != n || moments[i].v.size() != n) {
      throw std::invalid_argument("optimizer restore: moment size mismatch for '" +
                                  params_[i].name + "'");
    }
  }
  step_ = step;
  moments_ = std::move(moments);
}

}  // namespace docparser
