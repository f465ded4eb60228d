#pragma once

#include <cmath>
#include <vector>

#include "msy/backend/nn.hpp"

namespace msy {

// Adam with bias correction. Parameters whose Var does not require a grad
// (frozen) or received no gradient this step are skipped.
template <typename T>
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  long steps() const { return step_; }

  void step(std::vector<Parameter<T>>& params) {
    ++step_;
    if (m_.size() != params.size()) {
      m_.resize(params.size());
      v_.resize(params.size());
    }
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Var<T>& p = params[k].var;
      if (!p.requires_grad() || !p.has_grad()) continue;
      Tensor<T>& x = p.value();
      const Tensor<T>& g = p.grad();
      if (m_[k].numel() != x.numel()) {
        m_[k] = Tensor<T>(x.shape());
        v_[k] = Tensor<T>(x.shape());
      }
      for (std::size_t i = 0; i < x.numel(); ++i) {
        const double gi = g[i];
        const double m = beta1_ * m_[k][i] + (1.0 - beta1_) * gi;
        const double v = beta2_ * v_[k][i] + (1.0 - beta2_) * gi * gi;
        m_[k][i] = static_cast<T>(m);
        v_[k][i] = static_cast<T>(v);
        x[i] -= static_cast<T>(lr_ * (m / c1) / (std::sqrt(v / c2) + eps_));
      }
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  long step_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

}  // namespace msy
