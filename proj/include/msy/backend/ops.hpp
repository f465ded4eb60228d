#pragma once

#include <span>
#include <vector>

#include "msy/backend/autograd.hpp"

// Differentiable primitives over NCHW tensors. Every op records a backward
// closure when grad mode is on; see autograd.hpp.
namespace msy::ops {

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>* bias, int stride, int padding);

// Batch normalization over (N, H, W) per channel. In training mode batch
// statistics are used and the running estimates are updated in place.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, bool training, double momentum = 0.1, double eps = 1e-5);

template <typename T>
Var<T> relu(const Var<T>& x);

template <typename T>
Var<T> sigmoid(const Var<T>& x);

// Clamps into [lo, hi]; the gradient is passed only where the input lies inside.
template <typename T>
Var<T> clamp(const Var<T>& x, T lo, T hi);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> scale(const Var<T>& x, T factor);

template <typename T>
Var<T> sum(const Var<T>& x);

template <typename T>
Var<T> max_pool2d(const Var<T>& x, int kernel, int stride, int padding);

// Adaptive average pooling to a 1x1 spatial output.
template <typename T>
Var<T> global_avg_pool(const Var<T>& x);

// Bilinear resampling with half-pixel centres. Output pixel (y, x) samples the
// virtual grid upsampled by (factor_h, factor_w) at (y + offset_y, x + offset_x),
// so offset 0 with out = factor * in is plain upsampling and a non-zero offset
// is upsampling fused with a crop.
template <typename T>
Var<T> resize_bilinear(const Var<T>& x, int out_h, int out_w, int factor_h, int factor_w, int offset_y = 0,
                       int offset_x = 0);

template <typename T>
Var<T> upsample_bilinear(const Var<T>& x, int factor_h, int factor_w);

// Crops a window starting at (top, left).
template <typename T>
Var<T> crop(const Var<T>& x, int top, int left, int out_h, int out_w);

// Central crop; an odd size difference keeps the extra row/column at the
// bottom/right out of the window.
template <typename T>
Var<T> center_crop(const Var<T>& x, int out_h, int out_w);

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs);

// x: N x C x H x W, s: N x C x 1 x 1.
template <typename T>
Var<T> channel_multiply(const Var<T>& x, const Var<T>& s);

// x: N x Cin x 1 x 1, weight: Cout x Cin x 1 x 1, bias: 1 x Cout x 1 x 1.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>* bias);

// Class-weighted binary cross entropy of per-channel probability maps:
// sum_c w_c * mean_{n,y,x} BCE(p, t) / sum_c w_c. Probabilities are clamped
// to [eps, 1 - eps] inside the logarithm.
template <typename T>
Var<T> weighted_bce(const Var<T>& prob, const Tensor<T>& target, std::span<const double> class_weights,
                    double eps = 1e-7);

// Mean binary cross entropy over all elements.
template <typename T>
Var<T> bce(const Var<T>& prob, const Tensor<T>& target, double eps = 1e-7);

}  // namespace msy::ops
