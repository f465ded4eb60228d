#include "msy/backend/nn.hpp"

#include <cmath>

namespace msy {

template <typename T>
Conv2d<T> make_conv(ParamStore<T>& store, const std::string& name, int in_c, int out_c, int k, int stride,
                    int padding, bool bias, Rng& rng) {
  Tensor<T> w(Shape{out_c, in_c, k, k});
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / (out_c * k * k)));
  for (std::size_t i = 0; i < w.numel(); ++i) w[i] = static_cast<T>(normal(rng));
  Conv2d<T> conv;
  conv.weight = store.add_param(name + ".weight", std::move(w));
  conv.stride = stride;
  conv.padding = padding;
  if (bias) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_c * k * k));
    std::uniform_real_distribution<double> uni(-bound, bound);
    Tensor<T> b(Shape{1, out_c, 1, 1});
    for (std::size_t i = 0; i < b.numel(); ++i) b[i] = static_cast<T>(uni(rng));
    conv.bias = store.add_param(name + ".bias", std::move(b));
  }
  return conv;
}

template <typename T>
BatchNorm2d<T> make_batch_norm(ParamStore<T>& store, const std::string& name, int channels) {
  BatchNorm2d<T> bn;
  bn.gamma = store.add_param(name + ".weight", Tensor<T>(Shape{1, channels, 1, 1}, T(1)));
  bn.beta = store.add_param(name + ".bias", Tensor<T>(Shape{1, channels, 1, 1}, T(0)));
  bn.running_mean = store.add_buffer(name + ".running_mean", Tensor<T>(Shape{1, channels, 1, 1}, T(0)));
  bn.running_var = store.add_buffer(name + ".running_var", Tensor<T>(Shape{1, channels, 1, 1}, T(1)));
  return bn;
}

template <typename T>
Linear<T> make_linear(ParamStore<T>& store, const std::string& name, int in_c, int out_c, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_c));
  std::uniform_real_distribution<double> uni(-bound, bound);
  Tensor<T> w(Shape{out_c, in_c, 1, 1});
  for (std::size_t i = 0; i < w.numel(); ++i) w[i] = static_cast<T>(uni(rng));
  Tensor<T> b(Shape{1, out_c, 1, 1});
  for (std::size_t i = 0; i < b.numel(); ++i) b[i] = static_cast<T>(uni(rng));
  return {store.add_param(name + ".weight", std::move(w)), store.add_param(name + ".bias", std::move(b))};
}

template <typename T>
void init_identity(Conv2d<T>& conv, double noise_std, Rng& rng) {
  const Shape s = conv.weight.shape();
  if (s.h != 1 || s.w != 1 || s.c < s.n) throw ContractError("init_identity: needs a 1x1 conv with in >= out");
  Tensor<T>& w = conv.weight.value();
  w.zero();
  for (int o = 0; o < s.n; ++o) w.at(o, o, 0, 0) = T(1);
  if (noise_std > 0) {
    std::normal_distribution<double> normal(0.0, noise_std);
    for (std::size_t i = 0; i < w.numel(); ++i) w[i] += static_cast<T>(normal(rng));
  }
  if (conv.bias) conv.bias->value().zero();
}

#define MSY_INSTANTIATE_NN(T)                                                                                \
  template Conv2d<T> make_conv(ParamStore<T>&, const std::string&, int, int, int, int, int, bool, Rng&);    \
  template BatchNorm2d<T> make_batch_norm(ParamStore<T>&, const std::string&, int);                         \
  template Linear<T> make_linear(ParamStore<T>&, const std::string&, int, int, Rng&);                       \
  template void init_identity(Conv2d<T>&, double, Rng&);

MSY_INSTANTIATE_NN(float)
MSY_INSTANTIATE_NN(double)

}  // namespace msy
