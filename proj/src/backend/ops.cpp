#include "msy/backend/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <numeric>

namespace msy::ops {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

int conv_out(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

// Range of output columns whose input column ox*stride - pad + kx is inside [0, w).
std::pair<int, int> valid_range(int out, int in, int stride, int pad, int koff) {
  int lo = 0;
  while (lo < out && lo * stride - pad + koff < 0) ++lo;
  int hi = out;
  while (hi > lo && (hi - 1) * stride - pad + koff >= in) --hi;
  return {lo, hi};
}

template <typename T>
void im2col(const T* x, int c_in, int h, int w, int k, int stride, int pad, int ho, int wo, T* col) {
  const std::size_t hw_out = static_cast<std::size_t>(ho) * wo;
  for (int c = 0; c < c_in; ++c) {
    const T* xc = x + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = col + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * hw_out;
        const auto [x_lo, x_hi] = valid_range(wo, w, stride, pad, kx);
        for (int oy = 0; oy < ho; ++oy) {
          T* dst = row + static_cast<std::size_t>(oy) * wo;
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* src = xc + static_cast<std::size_t>(iy) * w;
          std::fill(dst, dst + x_lo, T(0));
          if (stride == 1) {
            std::memcpy(dst + x_lo, src + (x_lo - pad + kx), sizeof(T) * (x_hi - x_lo));
          } else {
            for (int ox = x_lo; ox < x_hi; ++ox) dst[ox] = src[ox * stride - pad + kx];
          }
          std::fill(dst + x_hi, dst + wo, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, int c_in, int h, int w, int k, int stride, int pad, int ho, int wo, T* x) {
  const std::size_t hw_out = static_cast<std::size_t>(ho) * wo;
  for (int c = 0; c < c_in; ++c) {
    T* xc = x + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * hw_out;
        const auto [x_lo, x_hi] = valid_range(wo, w, stride, pad, kx);
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const T* src = row + static_cast<std::size_t>(oy) * wo;
          T* dst = xc + static_cast<std::size_t>(iy) * w;
          for (int ox = x_lo; ox < x_hi; ++ox) dst[ox * stride - pad + kx] += src[ox];
        }
      }
    }
  }
}

template <typename T>
void require(bool ok, const std::string& msg) {
  if (!ok) throw ContractError(msg);
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>* bias, int stride, int padding) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  require<T>(ws.c == xs.c && ws.h == ws.w, "conv2d: weight " + ws.str() + " incompatible with input " + xs.str());
  const int k = ws.h;
  const int ho = conv_out(xs.h, k, stride, padding);
  const int wo = conv_out(xs.w, k, stride, padding);
  require<T>(ho >= 1 && wo >= 1, "conv2d: empty output for input " + xs.str());
  const int c_out = ws.n;
  const int kdim = xs.c * k * k;
  const std::size_t hw_out = static_cast<std::size_t>(ho) * wo;
  const bool pointwise = (k == 1 && stride == 1 && padding == 0);

  Tensor<T> out(Shape{xs.n, c_out, ho, wo});
  std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(kdim) * hw_out);
  CMapMat<T> wm(weight.value().data(), c_out, kdim);
  for (int n = 0; n < xs.n; ++n) {
    const T* src = x.value().plane(n, 0);
    if (!pointwise) {
      im2col(src, xs.c, xs.h, xs.w, k, stride, padding, ho, wo, col.data());
      src = col.data();
    }
    MapMat<T> om(out.plane(n, 0), c_out, static_cast<Eigen::Index>(hw_out));
    om.noalias() = wm * CMapMat<T>(src, kdim, static_cast<Eigen::Index>(hw_out));
    if (bias) {
      const T* b = bias->value().data();
      for (int c = 0; c < c_out; ++c) om.row(c).array() += b[c];
    }
  }

  std::vector<Var<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return Var<T>::make(std::move(out), std::move(inputs), [=](Node<T>& self) {
    const Tensor<T>& g = self.grad;
    auto& xin = *self.inputs[0];
    auto& win = *self.inputs[1];
    const bool need_x = self.input_needs_grad(0);
    const bool need_w = self.input_needs_grad(1);
    const bool need_b = self.inputs.size() > 2 && self.input_needs_grad(2);
    std::vector<T> colbuf(pointwise ? 0 : static_cast<std::size_t>(kdim) * hw_out);
    CMapMat<T> wmat(win.value.data(), c_out, kdim);
    for (int n = 0; n < xs.n; ++n) {
      CMapMat<T> gm(g.plane(n, 0), c_out, static_cast<Eigen::Index>(hw_out));
      if (need_w) {
        const T* src = xin.value.plane(n, 0);
        if (!pointwise) {
          im2col(src, xs.c, xs.h, xs.w, k, stride, padding, ho, wo, colbuf.data());
          src = colbuf.data();
        }
        MapMat<T> gw(win.grad_buffer().data(), c_out, kdim);
        gw.noalias() += gm * CMapMat<T>(src, kdim, static_cast<Eigen::Index>(hw_out)).transpose();
      }
      if (need_b) {
        T* gb = self.inputs[2]->grad_buffer().data();
        for (int c = 0; c < c_out; ++c) gb[c] += gm.row(c).sum();
      }
      if (need_x) {
        T* gx = xin.grad_buffer().plane(n, 0);
        if (pointwise) {
          MapMat<T>(gx, kdim, static_cast<Eigen::Index>(hw_out)).noalias() += wmat.transpose() * gm;
        } else {
          MapMat<T> gc(colbuf.data(), kdim, static_cast<Eigen::Index>(hw_out));
          gc.noalias() = wmat.transpose() * gm;
          col2im(colbuf.data(), xs.c, xs.h, xs.w, k, stride, padding, ho, wo, gx);
        }
      }
    }
  });
}

template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, bool training, double momentum, double eps) {
  const Shape s = x.shape();
  require<T>(gamma.value().numel() == static_cast<std::size_t>(s.c), "batch_norm: gamma size mismatch");
  const std::size_t plane = s.plane();
  const double count = static_cast<double>(s.n) * plane;
  std::vector<T> mean(s.c), invstd(s.c);

  for (int c = 0; c < s.c; ++c) {
    double m, v;
    if (training) {
      double acc = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const T* p = x.value().plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      }
      m = acc / count;
      double sq = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const T* p = x.value().plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) sq += (p[i] - m) * (p[i] - m);
      }
      v = sq / count;
      const double unbiased = count > 1 ? sq / (count - 1) : v;
      running_mean[c] = static_cast<T>((1 - momentum) * running_mean[c] + momentum * m);
      running_var[c] = static_cast<T>((1 - momentum) * running_var[c] + momentum * unbiased);
    } else {
      m = running_mean[c];
      v = running_var[c];
    }
    mean[c] = static_cast<T>(m);
    invstd[c] = static_cast<T>(1.0 / std::sqrt(v + eps));
  }

  Tensor<T> out(s);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const T* p = x.value().plane(n, c);
      T* o = out.plane(n, c);
      const T a = gamma.value()[c] * invstd[c];
      const T b = beta.value()[c] - a * mean[c];
      for (std::size_t i = 0; i < plane; ++i) o[i] = a * p[i] + b;
    }
  }

  return Var<T>::make(std::move(out), {x, gamma, beta}, [=](Node<T>& self) {
    const Tensor<T>& g = self.grad;
    const Tensor<T>& xv = self.inputs[0]->value;
    const Tensor<T>& gv = self.inputs[1]->value;
    for (int c = 0; c < s.c; ++c) {
      double sum_g = 0.0, sum_gx = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const T* gp = g.plane(n, c);
        const T* xp = xv.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) {
          sum_g += gp[i];
          sum_gx += gp[i] * (xp[i] - mean[c]) * invstd[c];
        }
      }
      if (self.input_needs_grad(1)) self.inputs[1]->grad_buffer()[c] += static_cast<T>(sum_gx);
      if (self.input_needs_grad(2)) self.inputs[2]->grad_buffer()[c] += static_cast<T>(sum_g);
      if (!self.input_needs_grad(0)) continue;
      const T scale = gv[c] * invstd[c];
      for (int n = 0; n < s.n; ++n) {
        const T* gp = g.plane(n, c);
        const T* xp = xv.plane(n, c);
        T* dx = self.inputs[0]->grad_buffer().plane(n, c);
        if (training) {
          const double mg = sum_g / count, mgx = sum_gx / count;
          for (std::size_t i = 0; i < plane; ++i) {
            const double xhat = (xp[i] - mean[c]) * invstd[c];
            dx[i] += static_cast<T>(scale * (gp[i] - mg - xhat * mgx));
          }
        } else {
          for (std::size_t i = 0; i < plane; ++i) dx[i] += scale * gp[i];
        }
      }
    }
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out(x.shape());
  const T* p = x.value().data();
  T* o = out.data();
  for (std::size_t i = 0; i < out.numel(); ++i) o[i] = p[i] > T(0) ? p[i] : T(0);
  return Var<T>::make(std::move(out), {x}, [](Node<T>& self) {
    T* dx = self.inputs[0]->grad_buffer().data();
    const T* y = self.value.data();
    const T* g = self.grad.data();
    for (std::size_t i = 0; i < self.value.numel(); ++i)
      if (y[i] > T(0)) dx[i] += g[i];
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out(x.shape());
  const T* p = x.value().data();
  T* o = out.data();
  for (std::size_t i = 0; i < out.numel(); ++i) o[i] = T(1) / (T(1) + std::exp(-p[i]));
  return Var<T>::make(std::move(out), {x}, [](Node<T>& self) {
    T* dx = self.inputs[0]->grad_buffer().data();
    const T* y = self.value.data();
    const T* g = self.grad.data();
    for (std::size_t i = 0; i < self.value.numel(); ++i) dx[i] += g[i] * y[i] * (T(1) - y[i]);
  });
}

template <typename T>
Var<T> clamp(const Var<T>& x, T lo, T hi) {
  Tensor<T> out(x.shape());
  const T* p = x.value().data();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::clamp(p[i], lo, hi);
  return Var<T>::make(std::move(out), {x}, [lo, hi](Node<T>& self) {
    T* dx = self.inputs[0]->grad_buffer().data();
    const T* xv = self.inputs[0]->value.data();
    const T* g = self.grad.data();
    for (std::size_t i = 0; i < self.value.numel(); ++i)
      if (xv[i] >= lo && xv[i] <= hi) dx[i] += g[i];
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require<T>(a.shape() == b.shape(), "add: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  Tensor<T> out = a.value();
  out += b.value();
  return Var<T>::make(std::move(out), {a, b}, [](Node<T>& self) {
    for (int k = 0; k < 2; ++k)
      if (self.input_needs_grad(k)) self.inputs[k]->grad_buffer() += self.grad;
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require<T>(a.shape() == b.shape(), "mul: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  return Var<T>::make(std::move(out), {a, b}, [](Node<T>& self) {
    const Tensor<T>& g = self.grad;
    for (int k = 0; k < 2; ++k) {
      if (!self.input_needs_grad(k)) continue;
      const Tensor<T>& other = self.inputs[1 - k]->value;
      T* d = self.inputs[k]->grad_buffer().data();
      for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i] * other[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x.value()[i] * factor;
  return Var<T>::make(std::move(out), {x}, [factor](Node<T>& self) {
    T* d = self.inputs[0]->grad_buffer().data();
    for (std::size_t i = 0; i < self.grad.numel(); ++i) d[i] += self.grad[i] * factor;
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.value().numel(); ++i) acc += x.value()[i];
  Tensor<T> out(Shape{});
  out[0] = static_cast<T>(acc);
  return Var<T>::make(std::move(out), {x}, [](Node<T>& self) {
    const T g = self.grad[0];
    T* d = self.inputs[0]->grad_buffer().data();
    for (std::size_t i = 0; i < self.inputs[0]->value.numel(); ++i) d[i] += g;
  });
}

template <typename T>
Var<T> max_pool2d(const Var<T>& x, int kernel, int stride, int padding) {
  const Shape s = x.shape();
  const int ho = conv_out(s.h, kernel, stride, padding);
  const int wo = conv_out(s.w, kernel, stride, padding);
  require<T>(ho >= 1 && wo >= 1, "max_pool2d: empty output for " + s.str());
  Tensor<T> out(Shape{s.n, s.c, ho, wo});
  std::vector<std::int32_t> argmax(out.numel());
  std::size_t o = 0;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const T* p = x.value().plane(n, c);
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox, ++o) {
          T best = -std::numeric_limits<T>::infinity();
          std::int32_t best_i = -1;
          for (int ky = 0; ky < kernel; ++ky) {
            const int iy = oy * stride - padding + ky;
            if (iy < 0 || iy >= s.h) continue;
            for (int kx = 0; kx < kernel; ++kx) {
              const int ix = ox * stride - padding + kx;
              if (ix < 0 || ix >= s.w) continue;
              const T v = p[iy * s.w + ix];
              if (v > best || best_i < 0) {
                best = v;
                best_i = iy * s.w + ix;
              }
            }
          }
          out[o] = best;
          argmax[o] = best_i;
        }
      }
    }
  }
  return Var<T>::make(std::move(out), {x}, [argmax = std::move(argmax), s](Node<T>& self) {
    Tensor<T>& dx = self.inputs[0]->grad_buffer();
    const std::size_t per_plane = self.value.shape().plane();
    for (std::size_t o = 0; o < self.grad.numel(); ++o) {
      const std::size_t plane_index = o / per_plane;
      dx[plane_index * s.plane() + argmax[o]] += self.grad[o];
    }
  });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  const Shape s = x.shape();
  Tensor<T> out(Shape{s.n, s.c, 1, 1});
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* p = x.value().plane(n, c);
      double acc = 0.0;
      for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      out.at(n, c, 0, 0) = static_cast<T>(acc / plane);
    }
  return Var<T>::make(std::move(out), {x}, [s](Node<T>& self) {
    Tensor<T>& dx = self.inputs[0]->grad_buffer();
    const std::size_t plane = s.plane();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const T g = self.grad.at(n, c, 0, 0) / static_cast<T>(plane);
        T* d = dx.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) d[i] += g;
      }
  });
}

namespace {

struct Tap {
  int i0, i1;
  double frac;
};

// Half-pixel source taps of an output axis on the virtual upsampled grid.
std::vector<Tap> bilinear_taps(int out, int in, int factor, int offset) {
  std::vector<Tap> taps(out);
  for (int o = 0; o < out; ++o) {
    double src = (o + offset + 0.5) / factor - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, i0 == i1 ? 0.0 : src - i0};
  }
  return taps;
}

}  // namespace

template <typename T>
Var<T> resize_bilinear(const Var<T>& x, int out_h, int out_w, int factor_h, int factor_w, int offset_y,
                       int offset_x) {
  const Shape s = x.shape();
  require<T>(factor_h >= 1 && factor_w >= 1, "resize_bilinear: factors must be >= 1");
  require<T>(offset_y >= 0 && offset_x >= 0 && offset_y + out_h <= s.h * factor_h &&
                 offset_x + out_w <= s.w * factor_w,
             "resize_bilinear: window outside the upsampled grid");
  const auto ty = bilinear_taps(out_h, s.h, factor_h, offset_y);
  const auto tx = bilinear_taps(out_w, s.w, factor_w, offset_x);
  Tensor<T> out(Shape{s.n, s.c, out_h, out_w});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* p = x.value().plane(n, c);
      T* o = out.plane(n, c);
      for (int y = 0; y < out_h; ++y) {
        const T* r0 = p + static_cast<std::size_t>(ty[y].i0) * s.w;
        const T* r1 = p + static_cast<std::size_t>(ty[y].i1) * s.w;
        const T ly = static_cast<T>(ty[y].frac);
        for (int xo = 0; xo < out_w; ++xo) {
          const T lx = static_cast<T>(tx[xo].frac);
          const T top = r0[tx[xo].i0] + lx * (r0[tx[xo].i1] - r0[tx[xo].i0]);
          const T bot = r1[tx[xo].i0] + lx * (r1[tx[xo].i1] - r1[tx[xo].i0]);
          o[static_cast<std::size_t>(y) * out_w + xo] = top + ly * (bot - top);
        }
      }
    }
  return Var<T>::make(std::move(out), {x}, [ty, tx, s, out_h, out_w](Node<T>& self) {
    Tensor<T>& dx = self.inputs[0]->grad_buffer();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const T* g = self.grad.plane(n, c);
        T* d = dx.plane(n, c);
        for (int y = 0; y < out_h; ++y) {
          const T ly = static_cast<T>(ty[y].frac);
          T* r0 = d + static_cast<std::size_t>(ty[y].i0) * s.w;
          T* r1 = d + static_cast<std::size_t>(ty[y].i1) * s.w;
          for (int xo = 0; xo < out_w; ++xo) {
            const T lx = static_cast<T>(tx[xo].frac);
            const T gv = g[static_cast<std::size_t>(y) * out_w + xo];
            const T gt = gv * (T(1) - ly), gb = gv * ly;
            r0[tx[xo].i0] += gt * (T(1) - lx);
            r0[tx[xo].i1] += gt * lx;
            r1[tx[xo].i0] += gb * (T(1) - lx);
            r1[tx[xo].i1] += gb * lx;
          }
        }
      }
  });
}

template <typename T>
Var<T> upsample_bilinear(const Var<T>& x, int factor_h, int factor_w) {
  return resize_bilinear(x, x.shape().h * factor_h, x.shape().w * factor_w, factor_h, factor_w, 0, 0);
}

template <typename T>
Var<T> crop(const Var<T>& x, int top, int left, int out_h, int out_w) {
  const Shape s = x.shape();
  require<T>(top >= 0 && left >= 0 && out_h >= 1 && out_w >= 1 && top + out_h <= s.h && left + out_w <= s.w,
             "crop: window " + std::to_string(out_h) + "x" + std::to_string(out_w) + "@(" + std::to_string(top) +
                 "," + std::to_string(left) + ") exceeds input " + s.str());
  Tensor<T> out(Shape{s.n, s.c, out_h, out_w});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < out_h; ++y)
        std::memcpy(&out.at(n, c, y, 0), &x.value().at(n, c, top + y, left), sizeof(T) * out_w);
  return Var<T>::make(std::move(out), {x}, [=](Node<T>& self) {
    Tensor<T>& dx = self.inputs[0]->grad_buffer();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c)
        for (int y = 0; y < out_h; ++y) {
          T* d = &dx.at(n, c, top + y, left);
          const T* g = &self.grad.at(n, c, y, 0);
          for (int xo = 0; xo < out_w; ++xo) d[xo] += g[xo];
        }
  });
}

template <typename T>
Var<T> center_crop(const Var<T>& x, int out_h, int out_w) {
  const Shape s = x.shape();
  require<T>(out_h <= s.h && out_w <= s.w,
             "center_crop: requested " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                 " exceeds input " + s.str());
  if (out_h == s.h && out_w == s.w) return x;
  return crop(x, (s.h - out_h) / 2, (s.w - out_w) / 2, out_h, out_w);
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  require<T>(!xs.empty(), "concat_channels: no inputs");
  const Shape s0 = xs.front().shape();
  int channels = 0;
  for (const auto& v : xs) {
    const Shape s = v.shape();
    require<T>(s.n == s0.n && s.h == s0.h && s.w == s0.w,
               "concat_channels: spatial/batch mismatch " + s.str() + " vs " + s0.str());
    channels += s.c;
  }
  Tensor<T> out(Shape{s0.n, channels, s0.h, s0.w});
  const std::size_t plane = s0.plane();
  for (int n = 0; n < s0.n; ++n) {
    int c0 = 0;
    for (const auto& v : xs) {
      std::memcpy(out.plane(n, c0), v.value().plane(n, 0), sizeof(T) * plane * v.shape().c);
      c0 += v.shape().c;
    }
  }
  return Var<T>::make(std::move(out), xs, [s0, plane](Node<T>& self) {
    for (int n = 0; n < s0.n; ++n) {
      int c0 = 0;
      for (std::size_t k = 0; k < self.inputs.size(); ++k) {
        const int ck = self.inputs[k]->value.shape().c;
        if (self.input_needs_grad(k)) {
          T* d = self.inputs[k]->grad_buffer().plane(n, 0);
          const T* g = self.grad.plane(n, c0);
          for (std::size_t i = 0; i < plane * ck; ++i) d[i] += g[i];
        }
        c0 += ck;
      }
    }
  });
}

template <typename T>
Var<T> channel_multiply(const Var<T>& x, const Var<T>& s) {
  const Shape xs = x.shape(), ss = s.shape();
  require<T>(ss.n == xs.n && ss.c == xs.c && ss.h == 1 && ss.w == 1,
             "channel_multiply: scale " + ss.str() + " incompatible with " + xs.str());
  Tensor<T> out(xs);
  const std::size_t plane = xs.plane();
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c) {
      const T f = s.value().at(n, c, 0, 0);
      const T* p = x.value().plane(n, c);
      T* o = out.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) o[i] = p[i] * f;
    }
  return Var<T>::make(std::move(out), {x, s}, [xs, plane](Node<T>& self) {
    const Tensor<T>& xv = self.inputs[0]->value;
    const Tensor<T>& sv = self.inputs[1]->value;
    for (int n = 0; n < xs.n; ++n)
      for (int c = 0; c < xs.c; ++c) {
        const T* g = self.grad.plane(n, c);
        if (self.input_needs_grad(0)) {
          T* d = self.inputs[0]->grad_buffer().plane(n, c);
          const T f = sv.at(n, c, 0, 0);
          for (std::size_t i = 0; i < plane; ++i) d[i] += g[i] * f;
        }
        if (self.input_needs_grad(1)) {
          const T* p = xv.plane(n, c);
          double acc = 0.0;
          for (std::size_t i = 0; i < plane; ++i) acc += g[i] * p[i];
          self.inputs[1]->grad_buffer().at(n, c, 0, 0) += static_cast<T>(acc);
        }
      }
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>* bias) {
  const Shape xs = x.shape(), ws = weight.shape();
  require<T>(xs.h == 1 && xs.w == 1 && ws.c == xs.c,
             "linear: weight " + ws.str() + " incompatible with input " + xs.str());
  const int c_out = ws.n;
  Tensor<T> out(Shape{xs.n, c_out, 1, 1});
  CMapMat<T> xm(x.value().data(), xs.n, xs.c);
  CMapMat<T> wm(weight.value().data(), c_out, xs.c);
  MapMat<T> om(out.data(), xs.n, c_out);
  om.noalias() = xm * wm.transpose();
  if (bias)
    for (int n = 0; n < xs.n; ++n)
      for (int c = 0; c < c_out; ++c) om(n, c) += bias->value()[c];
  std::vector<Var<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return Var<T>::make(std::move(out), std::move(inputs), [xs, c_out](Node<T>& self) {
    CMapMat<T> gm(self.grad.data(), xs.n, c_out);
    if (self.input_needs_grad(0)) {
      MapMat<T> gx(self.inputs[0]->grad_buffer().data(), xs.n, xs.c);
      gx.noalias() += gm * CMapMat<T>(self.inputs[1]->value.data(), c_out, xs.c);
    }
    if (self.input_needs_grad(1)) {
      MapMat<T> gw(self.inputs[1]->grad_buffer().data(), c_out, xs.c);
      gw.noalias() += gm.transpose() * CMapMat<T>(self.inputs[0]->value.data(), xs.n, xs.c);
    }
    if (self.inputs.size() > 2 && self.input_needs_grad(2)) {
      T* gb = self.inputs[2]->grad_buffer().data();
      for (int c = 0; c < c_out; ++c) gb[c] += gm.col(c).sum();
    }
  });
}

template <typename T>
Var<T> weighted_bce(const Var<T>& prob, const Tensor<T>& target, std::span<const double> class_weights,
                    double eps) {
  const Shape s = prob.shape();
  require<T>(target.shape() == s, "weighted_bce: target " + target.shape().str() + " vs prediction " + s.str());
  require<T>(class_weights.size() == static_cast<std::size_t>(s.c), "weighted_bce: one weight per channel required");
  const double wsum = std::accumulate(class_weights.begin(), class_weights.end(), 0.0);
  require<T>(wsum > 0, "weighted_bce: class weights sum to zero");
  const std::size_t plane = s.plane();
  const double per_channel = static_cast<double>(s.n) * plane;
  std::vector<double> coef(s.c);
  for (int c = 0; c < s.c; ++c) coef[c] = class_weights[c] / (wsum * per_channel);

  double loss = 0.0;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      if (coef[c] == 0.0) continue;
      const T* p = prob.value().plane(n, c);
      const T* t = target.plane(n, c);
      double acc = 0.0;
      for (std::size_t i = 0; i < plane; ++i) {
        const double pc = std::clamp(static_cast<double>(p[i]), eps, 1.0 - eps);
        acc -= t[i] * std::log(pc) + (1.0 - t[i]) * std::log(1.0 - pc);
      }
      loss += coef[c] * acc;
    }
  Tensor<T> out(Shape{});
  out[0] = static_cast<T>(loss);
  return Var<T>::make(std::move(out), {prob}, [target, coef, s, plane, eps](Node<T>& self) {
    const double g = self.grad[0];
    const Tensor<T>& pv = self.inputs[0]->value;
    Tensor<T>& dp = self.inputs[0]->grad_buffer();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        if (coef[c] == 0.0) continue;
        const T* p = pv.plane(n, c);
        const T* t = target.plane(n, c);
        T* d = dp.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) {
          const double pc = std::clamp(static_cast<double>(p[i]), eps, 1.0 - eps);
          d[i] += static_cast<T>(g * coef[c] * (pc - t[i]) / (pc * (1.0 - pc)));
        }
      }
  });
}

template <typename T>
Var<T> bce(const Var<T>& prob, const Tensor<T>& target, double eps) {
  require<T>(target.shape() == prob.shape(), "bce: target/prediction shape mismatch");
  const double inv = 1.0 / static_cast<double>(prob.value().numel());
  double loss = 0.0;
  for (std::size_t i = 0; i < target.numel(); ++i) {
    const double pc = std::clamp(static_cast<double>(prob.value()[i]), eps, 1.0 - eps);
    loss -= target[i] * std::log(pc) + (1.0 - target[i]) * std::log(1.0 - pc);
  }
  Tensor<T> out(Shape{});
  out[0] = static_cast<T>(loss * inv);
  return Var<T>::make(std::move(out), {prob}, [target, inv, eps](Node<T>& self) {
    const double g = self.grad[0] * inv;
    const Tensor<T>& pv = self.inputs[0]->value;
    Tensor<T>& dp = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < target.numel(); ++i) {
      const double pc = std::clamp(static_cast<double>(pv[i]), eps, 1.0 - eps);
      dp[i] += static_cast<T>(g * (pc - target[i]) / (pc * (1.0 - pc)));
    }
  });
}

#define MSY_INSTANTIATE_OPS(T)                                                                                 \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>*, int, int);                               \
  template Var<T> batch_norm(const Var<T>&, const Var<T>&, const Var<T>&, Tensor<T>&, Tensor<T>&, bool, double, \
                             double);                                                                          \
  template Var<T> relu(const Var<T>&);                                                                         \
  template Var<T> sigmoid(const Var<T>&);                                                                      \
  template Var<T> clamp(const Var<T>&, T, T);                                                                  \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                           \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                           \
  template Var<T> scale(const Var<T>&, T);                                                                     \
  template Var<T> sum(const Var<T>&);                                                                          \
  template Var<T> max_pool2d(const Var<T>&, int, int, int);                                                    \
  template Var<T> global_avg_pool(const Var<T>&);                                                              \
  template Var<T> resize_bilinear(const Var<T>&, int, int, int, int, int, int);                                \
  template Var<T> upsample_bilinear(const Var<T>&, int, int);                                                  \
  template Var<T> crop(const Var<T>&, int, int, int, int);                                                     \
  template Var<T> center_crop(const Var<T>&, int, int);                                                        \
  template Var<T> concat_channels(const std::vector<Var<T>>&);                                                 \
  template Var<T> channel_multiply(const Var<T>&, const Var<T>&);                                              \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>*);                                         \
  template Var<T> weighted_bce(const Var<T>&, const Tensor<T>&, std::span<const double>, double);              \
  template Var<T> bce(const Var<T>&, const Tensor<T>&, double);

MSY_INSTANTIATE_OPS(float)
MSY_INSTANTIATE_OPS(double)

}  // namespace msy::ops
