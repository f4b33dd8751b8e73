#include "docparser/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace docparser {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

namespace {

std::shared_ptr<detail::Node> make_node(Shape shape, std::vector<double> data,
                                        bool requires_grad) {
  for (auto d : shape) {
    if (d <= 0) {
      throw std::invalid_argument("tensor dimensions must be positive, got " +
                                  shape_str(shape));
    }
  }
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw std::invalid_argument("data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return node;
}

thread_local int g_no_grad_depth = 0;
bool g_finite_checks = false;

// Large activation buffers are allocated and freed every op; keeping them on
// the heap instead of round-tripping through mmap avoids re-faulting pages.
#if defined(__GLIBC__)
const bool g_malloc_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
#endif

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  return wrap(make_node(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = shape_numel(shape);
  return wrap(make_node(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::ones(Shape shape, bool requires_grad) {
  return full(std::move(shape), 1.0, requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  return wrap(make_node(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  auto n = shape_numel(shape);
  std::vector<double> data(n);
  for (auto& v : data) v = rng.normal(0.0, stddev);
  return wrap(make_node(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::rand_uniform(Shape shape, Rng& rng, double lo, double hi,
                            bool requires_grad) {
  auto n = shape_numel(shape);
  std::vector<double> data(n);
  for (auto& v : data) v = rng.uniform(lo, hi);
  return wrap(make_node(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::he_normal(Shape shape, Rng& rng, std::int64_t fan_in,
                         bool requires_grad) {
  return randn(std::move(shape), rng, std::sqrt(2.0 / double(fan_in)), requires_grad);
}

Tensor Tensor::xavier_normal(Shape shape, Rng& rng, std::int64_t fan_in,
                             std::int64_t fan_out, bool requires_grad) {
  return randn(std::move(shape), rng, std::sqrt(2.0 / double(fan_in + fan_out)),
               requires_grad);
}

std::int64_t Tensor::dim(std::int64_t i) const {
  auto nd = ndim();
  if (i < 0) i += nd;
  if (i < 0 || i >= nd) {
    throw std::out_of_range("dim index " + std::to_string(i) + " out of range for " +
                            shape_str(shape()));
  }
  return node_->shape[static_cast<size_t>(i)];
}

double Tensor::item() const {
  if (!node_ || node_->numel() != 1) {
    throw std::invalid_argument("item() requires a single-element tensor, got " +
                                (node_ ? shape_str(shape()) : std::string("null")));
  }
  return node_->value[0];
}

std::span<const double> Tensor::grad() const {
  if (!has_grad()) {
    throw std::runtime_error("gradient not populated; run backward() first");
  }
  return node_->grad;
}

Tensor Tensor::detach() const {
  return wrap(make_node(node_->shape, node_->value, false));
}

Tensor Tensor::clone() const { return detach(); }

Tensor Tensor::wrap(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw std::invalid_argument("backward() requires a scalar loss tensor");
  }
  auto root = loss.impl();
  if (!root->requires_grad) return;

  // Iterative post-order topological sort over the parent DAG.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      detail::Node* parent = node->parents[idx++].get();
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Each pass propagates a fresh unit seed; gradients accumulated by earlier
  // passes are stashed first and merged back afterwards, so repeated calls
  // add up exactly like a scaled loss.
  std::vector<std::vector<double>> stash(order.size());
  for (size_t i = 0; i < order.size(); ++i) {
    stash[i] = std::move(order[i]->grad);
    order[i]->grad.clear();
  }

  root->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }

  for (size_t i = 0; i < order.size(); ++i) {
    if (stash[i].empty()) continue;
    auto& g = order[i]->ensure_grad();
    for (size_t j = 0; j < g.size(); ++j) g[j] += stash[i][j];
  }
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

void set_finite_checks(bool on) { g_finite_checks = on; }
bool finite_checks_enabled() { return g_finite_checks; }

}  // namespace docparser
