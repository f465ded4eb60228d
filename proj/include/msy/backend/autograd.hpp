#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "msy/backend/tensor.hpp"

namespace msy {

// Thread-local switch for graph recording. Inference paths run under
// NoGradGuard so that no backward closures or saved inputs are retained.
class GradMode {
 public:
  static bool enabled() { return enabled_; }
  static void set(bool on) { enabled_ = on; }

 private:
  static inline thread_local bool enabled_ = true;
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
  bool input_needs_grad(std::size_t i) const { return inputs[i] && inputs[i]->requires_grad; }
};

// Handle to a node of the dynamic computation graph. Copies share the node.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad = Tensor<T>(); }

  // Back-propagates from a scalar (numel == 1) output, seeding d(out)/d(out) = 1.
  void backward();

  const std::shared_ptr<Node<T>>& node() const { return node_; }

  // Builds an op result. The node only records inputs and the backward
  // closure when grad mode is on and some input requires a gradient.
  static Var make(Tensor<T> value, std::vector<Var> inputs, std::function<void(Node<T>&)> backward);

 private:
  std::shared_ptr<Node<T>> node_;
};

extern template class Var<float>;
extern template class Var<double>;

}  // namespace msy
