#pragma once

#include <cstdint>
#include <vector>

#include "docparser/tensor.hpp"

namespace docparser {

struct AdamWOpts {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// AdamW with decoupled weight decay: the decay term p <- p - lr*wd*p is
/// applied directly to the parameter, independent of the adaptive update,
/// which uses bias-corrected first/second moments.
///
/// Parameters whose gradient buffer was never populated in the current
/// step are skipped entirely (no decay, no moment update), so losses that
/// touch a subset of the model leave the rest untouched.
class AdamW {
 public:
  AdamW(std::vector<Parameter> params, AdamWOpts opts);

  /// Applies one update from the gradients currently on the parameters.
  /// Throws if any populated gradient is non-finite, naming the parameter.
  void step();
  void zero_grad();

  void set_lr(double lr) { opts_.lr = lr; }
  double lr() const { return opts_.lr; }
  /// Per-parameter learning-rate multipliers (aligned with params order);
  /// scales both the adaptive update and the decoupled decay.
  void set_lr_scales(std::vector<double> scales);
  std::int64_t step_count() const { return step_; }
  const std::vector<Parameter>& params() const { return params_; }

  // Checkpoint access: moments are stored per parameter, in params order.
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  const std::vector<Moments>& moments() const { return moments_; }
  void restore(std::int64_t step, std::vector<Moments> moments);

 private:
  std::vector<Parameter> params_;
  std::vector<Moments> moments_;
  std::vector<double> lr_scales_;
  AdamWOpts opts_;
  std::int64_t step_ = 0;
};

}  // namespace docparser
