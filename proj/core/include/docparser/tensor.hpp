#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "docparser/rng.hpp"

namespace docparser {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until first accumulation
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }
  // Zero-initialises the gradient buffer on first touch.
  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Dense row-major tensor of 64-bit floats with reverse-mode autodiff.
/// Tensor is a cheap handle onto a shared node; copies alias the same
/// storage. Ops in ops.hpp build the graph; backward() walks it.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  /// Normal(0, stddev) initialisation from the given generator.
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false);
  /// Uniform in [lo, hi).
  static Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi,
                             bool requires_grad = false);
  /// He/Kaiming-normal conv or linear weight: std = sqrt(2 / fan_in).
  static Tensor he_normal(Shape shape, Rng& rng, std::int64_t fan_in,
                          bool requires_grad = true);
  /// Xavier/Glorot-normal weight: std = sqrt(2 / (fan_in + fan_out)).
  static Tensor xavier_normal(Shape shape, Rng& rng, std::int64_t fan_in,
                              std::int64_t fan_out, bool requires_grad = true);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t ndim() const { return static_cast<std::int64_t>(node_->shape.size()); }
  /// Dimension i; negative indices count from the back.
  std::int64_t dim(std::int64_t i) const;
  std::int64_t numel() const { return node_->numel(); }

  double* data() { return node_->value.data(); }
  const double* data() const { return node_->value.data(); }
  std::span<const double> values() const { return node_->value; }
  std::vector<double> to_vector() const { return node_->value; }
  double item() const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<const double> grad() const;
  std::vector<double>& grad_buffer() { return node_->ensure_grad(); }
  void zero_grad() { if (node_) node_->grad.clear(); }

  /// Copy of the values with no graph attached.
  Tensor detach() const;
  /// Deep copy (fresh storage, leaf).
  Tensor clone() const;

  std::shared_ptr<detail::Node> impl() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Runs reverse-mode accumulation from a scalar loss. Gradients add into
/// existing buffers; call zero_grad between steps.
void backward(const Tensor& loss);

/// While alive, ops do not record the graph (inference mode).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};
bool grad_enabled();

/// When on, every op output is scanned for NaN/Inf and an exception names
/// the offending op. Off by default; tests and debugging turn it on.
void set_finite_checks(bool on);
bool finite_checks_enabled();

/// Named trainable tensor. Names are dotted paths that determine
/// checkpoint placement, e.g. "encoder.stage1.block0.dwconv.weight".
struct Parameter {
  std::string name;
  Tensor tensor;
};

}  // namespace docparser
