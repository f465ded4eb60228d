#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "msy/backend/ops.hpp"

namespace msy {

using Rng = std::mt19937_64;

template <typename T>
struct Parameter {
  std::string name;
  Var<T> var;
};

// Owns every learnable parameter and non-learnable buffer of a model, in
// registration order. Layers keep handles into the store.
template <typename T>
class ParamStore {
 public:
  Var<T> add_param(std::string name, Tensor<T> init) {
    Var<T> v(std::move(init), true);
    params_.push_back({std::move(name), v});
    return v;
  }
  Tensor<T>* add_buffer(std::string name, Tensor<T> init) {
    buffers_.emplace_back(std::move(name), std::make_unique<Tensor<T>>(std::move(init)));
    return buffers_.back().second.get();
  }

  std::vector<Parameter<T>>& params() { return params_; }
  const std::vector<Parameter<T>>& params() const { return params_; }
  const std::vector<std::pair<std::string, std::unique_ptr<Tensor<T>>>>& buffers() const { return buffers_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.var.value().numel();
    return n;
  }
  Parameter<T>* find(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }
  Tensor<T>* find_buffer(const std::string& name) {
    for (auto& b : buffers_)
      if (b.first == name) return b.second.get();
    return nullptr;
  }
  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }
  // Removes parameters and buffers whose name starts with prefix.
  void erase_prefix(const std::string& prefix) {
    std::erase_if(params_, [&](const Parameter<T>& p) { return p.name.rfind(prefix, 0) == 0; });
    std::erase_if(buffers_, [&](const auto& b) { return b.first.rfind(prefix, 0) == 0; });
  }

 private:
  std::vector<Parameter<T>> params_;
  std::vector<std::pair<std::string, std::unique_ptr<Tensor<T>>>> buffers_;
};

template <typename T>
struct Conv2d {
  Var<T> weight;  // out x in x k x k
  std::optional<Var<T>> bias;
  int stride = 1;
  int padding = 0;

  int in_channels() const { return weight.shape().c; }
  int out_channels() const { return weight.shape().n; }
  Var<T> operator()(const Var<T>& x) const {
    return ops::conv2d(x, weight, bias ? &*bias : nullptr, stride, padding);
  }
};

template <typename T>
struct BatchNorm2d {
  Var<T> gamma;
  Var<T> beta;
  Tensor<T>* running_mean = nullptr;
  Tensor<T>* running_var = nullptr;

  Var<T> operator()(const Var<T>& x, bool training) const {
    return ops::batch_norm(x, gamma, beta, *running_mean, *running_var, training);
  }
};

template <typename T>
struct Linear {
  Var<T> weight;  // out x in x 1 x 1
  Var<T> bias;    // 1 x out x 1 x 1

  Var<T> operator()(const Var<T>& x) const { return ops::linear(x, weight, &bias); }
};

// Kaiming-normal (fan_out, ReLU gain) weights; bias, when present, is drawn
// uniformly in +-1/sqrt(fan_in).
template <typename T>
Conv2d<T> make_conv(ParamStore<T>& store, const std::string& name, int in_c, int out_c, int k, int stride,
                    int padding, bool bias, Rng& rng);

template <typename T>
BatchNorm2d<T> make_batch_norm(ParamStore<T>& store, const std::string& name, int channels);

template <typename T>
Linear<T> make_linear(ParamStore<T>& store, const std::string& name, int in_c, int out_c, Rng& rng);

// Sets a 1x1 convolution to pass input channels [0, out) through unchanged
// and ignore all others, then adds N(0, noise_std) to every weight.
template <typename T>
void init_identity(Conv2d<T>& conv, double noise_std, Rng& rng);

}  // namespace msy
