#include <gtest/gtest.h>

#include <cmath>

#include "msy/backend/grad_check.hpp"
#include "msy/backend/nn.hpp"
#include "msy/backend/ops.hpp"
#include "msy/backend/optim.hpp"
#include "msy/backend/tensor_map.hpp"
#include "test_util.hpp"

using namespace msy;
using msy::testing::random_tensor;
using msy::testing::random_var;

namespace {

// Direct convolution, the oracle for the im2col path.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>* b, int stride,
                          int pad) {
  const Shape xs = x.shape(), ws = w.shape();
  const int oh = (xs.h + 2 * pad - ws.h) / stride + 1, ow = (xs.w + 2 * pad - ws.w) / stride + 1;
  Tensor<double> out(Shape{xs.n, ws.n, oh, ow});
  for (int n = 0; n < xs.n; ++n)
    for (int o = 0; o < ws.n; ++o)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          double s = b ? (*b)[o] : 0.0;
          for (int c = 0; c < xs.c; ++c)
            for (int ky = 0; ky < ws.h; ++ky)
              for (int kx = 0; kx < ws.w; ++kx) {
                const int iy = y * stride - pad + ky, ix = xx * stride - pad + kx;
                if (iy < 0 || ix < 0 || iy >= xs.h || ix >= xs.w) continue;
                s += x.at(n, c, iy, ix) * w.at(o, c, ky, kx);
              }
          out.at(n, o, y, xx) = s;
        }
  return out;
}

double bilinear_ref(const Tensor<double>& x, int n, int c, double sy, double sx) {
  const int h = x.shape().h, w = x.shape().w;
  sy = std::clamp(sy, 0.0, h - 1.0);
  sx = std::clamp(sx, 0.0, w - 1.0);
  const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
  const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = sy - y0, fx = sx - x0;
  return (1 - fy) * ((1 - fx) * x.at(n, c, y0, x0) + fx * x.at(n, c, y0, x1)) +
         fy * ((1 - fx) * x.at(n, c, y1, x0) + fx * x.at(n, c, y1, x1));
}

GradCheckOptions sparse(std::size_t n = 40) {
  GradCheckOptions o;
  o.max_entries_per_param = n;
  return o;
}

}  // namespace

TEST(Tensor, RejectsEmptyDimensions) { EXPECT_THROW(Tensor<float>(Shape{0, 1, 1, 1}), ContractError); }

TEST(Tensor, ReshapeKeepsElementCount) {
  Tensor<float> t(Shape{2, 3, 4, 5}, 1.f);
  EXPECT_EQ(t.reshaped(Shape{1, 6, 20, 1}).numel(), 120u);
  EXPECT_THROW(t.reshaped(Shape{1, 1, 1, 7}), ContractError);
}

TEST(Tensor, AllocationsAreTracked) {
  const auto before = TensorMemory::live_bytes();
  {
    Tensor<float> t(Shape{1, 1, 100, 100});
    EXPECT_GE(TensorMemory::live_bytes(), before + 40000);
  }
  EXPECT_EQ(TensorMemory::live_bytes(), before);
}

TEST(Conv2d, MatchesDirectConvolution) {
  for (auto [k, stride, pad] : {std::tuple{3, 1, 1}, {3, 2, 1}, {1, 1, 0}, {7, 2, 3}, {1, 2, 0}}) {
    const auto x = random_tensor(Shape{2, 3, 9, 11}, 1);
    const auto w = random_tensor(Shape{4, 3, k, k}, 2);
    const auto b = random_tensor(Shape{1, 4, 1, 1}, 3);
    Var<double> vb(b);
    const auto y = ops::conv2d(Var<double>(x), Var<double>(w), &vb, stride, pad);
    const auto ref = naive_conv(x, w, &b, stride, pad);
    ASSERT_EQ(y.shape(), ref.shape());
    EXPECT_LT(msy::testing::max_abs_diff(y.value(), ref), 1e-12) << "k=" << k << " stride=" << stride;
  }
}

TEST(Conv2d, RejectsChannelMismatch) {
  EXPECT_THROW(ops::conv2d(Var<double>(Tensor<double>(Shape{1, 3, 4, 4})), Var<double>(Tensor<double>(Shape{2, 4, 1, 1})),
                           static_cast<const Var<double>*>(nullptr), 1, 0),
               ContractError);
}

TEST(GradCheck, Conv2d) {
  auto x = random_var(Shape{2, 3, 6, 5}, 4), w = random_var(Shape{4, 3, 3, 3}, 5), b = random_var(Shape{1, 4, 1, 1}, 6);
  for (int stride : {1, 2}) {
    auto f = [&] { return ops::sum(ops::mul(ops::conv2d(x, w, &b, stride, 1), ops::conv2d(x, w, &b, stride, 1))); };
    EXPECT_LT(grad_check(f, {{"x", x}, {"w", w}, {"b", b}}, sparse()).max_rel_error, 1e-6);
  }
}

TEST(GradCheck, BatchNormTraining) {
  auto x = random_var(Shape{3, 2, 4, 4}, 7), g = random_var(Shape{1, 2, 1, 1}, 8, 0.5, 1.5),
       b = random_var(Shape{1, 2, 1, 1}, 9);
  Tensor<double> rm(Shape{1, 2, 1, 1}), rv(Shape{1, 2, 1, 1}, 1.0);
  const auto probe = random_tensor(Shape{3, 2, 4, 4}, 10);
  auto f = [&] { return ops::sum(ops::mul(ops::batch_norm(x, g, b, rm, rv, true), Var<double>(probe))); };
  EXPECT_LT(grad_check(f, {{"x", x}, {"gamma", g}, {"beta", b}}, sparse()).max_rel_error, 1e-6);
}

TEST(BatchNorm, EvalModeUsesRunningStatistics) {
  const auto x = random_tensor(Shape{2, 2, 3, 3}, 11);
  Tensor<double> rm(Shape{1, 2, 1, 1}), rv(Shape{1, 2, 1, 1});
  rm[0] = 0.3;
  rm[1] = -0.2;
  rv[0] = 2.0;
  rv[1] = 0.5;
  Var<double> g(Tensor<double>(Shape{1, 2, 1, 1}, 1.5)), b(Tensor<double>(Shape{1, 2, 1, 1}, 0.1));
  const auto y = ops::batch_norm(Var<double>(x), g, b, rm, rv, false);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 2; ++c)
      for (int i = 0; i < 9; ++i) {
        const double ref = 1.5 * (x.plane(n, c)[i] - rm[c]) / std::sqrt(rv[c] + 1e-5) + 0.1;
        EXPECT_NEAR(y.value().plane(n, c)[i], ref, 1e-12);
      }
}

TEST(BatchNorm, TrainingUpdatesRunningStatistics) {
  Tensor<double> x(Shape{1, 1, 1, 4});
  for (int i = 0; i < 4; ++i) x[i] = i;  // mean 1.5, unbiased var 5/3
  Tensor<double> rm(Shape{1, 1, 1, 1}), rv(Shape{1, 1, 1, 1}, 1.0);
  Var<double> g(Tensor<double>(Shape{1, 1, 1, 1}, 1.0)), b(Tensor<double>(Shape{1, 1, 1, 1}));
  ops::batch_norm(Var<double>(x), g, b, rm, rv, true, 0.1);
  EXPECT_NEAR(rm[0], 0.15, 1e-12);
  EXPECT_NEAR(rv[0], 0.9 + 0.1 * 5.0 / 3.0, 1e-12);
}

TEST(GradCheck, Pointwise) {
  auto x = random_var(Shape{2, 3, 3, 3}, 12, -2, 2), y = random_var(Shape{2, 3, 3, 3}, 13);
  const auto probe = random_tensor(Shape{2, 3, 3, 3}, 14);
  auto lin = [&](const Var<double>& v) { return ops::sum(ops::mul(v, Var<double>(probe))); };
  EXPECT_LT(grad_check([&] { return lin(ops::sigmoid(x)); }, {{"x", x}}).max_rel_error, 1e-7);
  EXPECT_LT(grad_check([&] { return lin(ops::add(x, y)); }, {{"x", x}, {"y", y}}).max_rel_error, 1e-7);
  EXPECT_LT(grad_check([&] { return lin(ops::mul(x, y)); }, {{"x", x}, {"y", y}}).max_rel_error, 1e-7);
  EXPECT_LT(grad_check([&] { return lin(ops::scale(x, 2.5)); }, {{"x", x}}).max_rel_error, 1e-7);
  // Kinks: keep inputs away from 0 and the clamp bounds.
  Tensor<double> safe = x.value();
  for (std::size_t i = 0; i < safe.numel(); ++i)
    if (std::abs(safe[i]) < 0.05 || std::abs(std::abs(safe[i]) - 1.0) < 0.05) safe[i] += 0.2;
  Var<double> xs(safe, true);
  EXPECT_LT(grad_check([&] { return lin(ops::relu(xs)); }, {{"x", xs}}).max_rel_error, 1e-7);
  EXPECT_LT(grad_check([&] { return lin(ops::clamp(xs, -1.0, 1.0)); }, {{"x", xs}}).max_rel_error, 1e-7);
}

TEST(Clamp, PassesGradientOnlyInside) {
  Var<double> x(Tensor<double>(Shape{1, 1, 1, 3}), true);
  x.value()[0] = -2;
  x.value()[1] = 0.5;
  x.value()[2] = 3;
  ops::sum(ops::clamp(x, 0.0, 1.0)).backward();
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 1.0);
  EXPECT_EQ(x.grad()[2], 0.0);
}

TEST(GradCheck, Pooling) {
  auto x = random_var(Shape{2, 2, 7, 6}, 15);
  const auto probe = random_tensor(Shape{2, 2, 4, 3}, 16);
  EXPECT_LT(grad_check([&] { return ops::sum(ops::mul(ops::max_pool2d(x, 3, 2, 1), Var<double>(probe))); }, {{"x", x}})
                .max_rel_error,
            1e-7);
  const auto p2 = random_tensor(Shape{2, 2, 1, 1}, 17);
  EXPECT_LT(grad_check([&] { return ops::sum(ops::mul(ops::global_avg_pool(x), Var<double>(p2))); }, {{"x", x}})
                .max_rel_error,
            1e-7);
}

TEST(MaxPool, PadsWithNegativeInfinity) {
  Tensor<double> t(Shape{1, 1, 2, 2}, -5.0);
  const auto y = ops::max_pool2d(Var<double>(t), 3, 2, 1);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.value()[0], -5.0);
}

TEST(Resize, MatchesHalfPixelFormula) {
  const auto x = random_tensor(Shape{1, 2, 5, 4}, 18);
  for (auto [f, oy, ox, oh, ow] : {std::tuple{4, 0, 0, 20, 16}, {4, 6, 2, 8, 8}, {16, 40, 24, 16, 16}, {2, 1, 1, 3, 5}}) {
    const auto y = ops::resize_bilinear(Var<double>(x), oh, ow, f, f, oy, ox);
    for (int c = 0; c < 2; ++c)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          const double sy = (i + oy + 0.5) / f - 0.5, sx = (j + ox + 0.5) / f - 0.5;
          EXPECT_NEAR(y.value().at(0, c, i, j), bilinear_ref(x, 0, c, sy, sx), 1e-12);
        }
  }
}

TEST(Resize, ConstantMapStaysConstant) {
  const auto y = ops::upsample_bilinear(Var<double>(Tensor<double>(Shape{1, 1, 3, 3}, 0.7)), 4, 4);
  for (std::size_t i = 0; i < y.value().numel(); ++i) EXPECT_DOUBLE_EQ(y.value()[i], 0.7);
}

TEST(GradCheck, ResizeAndCrops) {
  auto x = random_var(Shape{2, 2, 4, 5}, 19);
  auto probe = [](Shape s) { return Var<double>(random_tensor(s, 20)); };
  const auto p1 = probe(Shape{2, 2, 6, 7});
  EXPECT_LT(grad_check([&] { return ops::sum(ops::mul(ops::resize_bilinear(x, 6, 7, 4, 4, 5, 3), p1)); }, {{"x", x}})
                .max_rel_error,
            1e-7);
  const auto p2 = probe(Shape{2, 2, 2, 3});
  EXPECT_LT(grad_check([&] { return ops::sum(ops::mul(ops::crop(x, 1, 2, 2, 3), p2)); }, {{"x", x}}).max_rel_error,
            1e-7);
  EXPECT_LT(grad_check([&] { return ops::sum(ops::mul(ops::center_crop(x, 2, 3), p2)); }, {{"x", x}}).max_rel_error,
            1e-7);
}

TEST(Crop, CenterCropKeepsOddExtraAtBottomRight) {
  Tensor<double> t(Shape{1, 1, 5, 5});
  for (int i = 0; i < 25; ++i) t[i] = i;
  const auto y = ops::center_crop(Var<double>(t), 2, 2);
  EXPECT_EQ(y.value().at(0, 0, 0, 0), t.at(0, 0, 1, 1));
  EXPECT_THROW(ops::center_crop(Var<double>(t), 6, 2), ContractError);
}

TEST(GradCheck, ConcatChannelMultiplyLinear) {
  auto a = random_var(Shape{2, 2, 3, 3}, 21), b = random_var(Shape{2, 3, 3, 3}, 22);
  auto s = random_var(Shape{2, 2, 1, 1}, 23);
  const auto p5 = Var<double>(random_tensor(Shape{2, 5, 3, 3}, 24));
  const auto p2 = Var<double>(random_tensor(Shape{2, 2, 3, 3}, 25));
  EXPECT_LT(grad_check([&] { return ops::sum(ops::mul(ops::concat_channels<double>({a, b}), p5)); },
                       {{"a", a}, {"b", b}})
                .max_rel_error,
            1e-7);
  EXPECT_LT(grad_check([&] { return ops::sum(ops::mul(ops::channel_multiply(a, s), p2)); }, {{"a", a}, {"s", s}})
                .max_rel_error,
            1e-7);
  auto x = random_var(Shape{3, 4, 1, 1}, 26), w = random_var(Shape{2, 4, 1, 1}, 27), bias = random_var(Shape{1, 2, 1, 1}, 28);
  const auto p = Var<double>(random_tensor(Shape{3, 2, 1, 1}, 29));
  EXPECT_LT(grad_check([&] { return ops::sum(ops::mul(ops::linear(x, w, &bias), p)); },
                       {{"x", x}, {"w", w}, {"b", bias}})
                .max_rel_error,
            1e-7);
}

TEST(Loss, WeightedBceMatchesFormula) {
  const auto p = random_tensor(Shape{2, 3, 2, 2}, 30, 0.05, 0.95);
  Tensor<double> t(Shape{2, 3, 2, 2});
  for (std::size_t i = 0; i < t.numel(); i += 3) t[i] = 1;
  const std::vector<double> w{0.5, 1.0, 3.0};
  const double got = ops::weighted_bce(Var<double>(p), t, w).value()[0];
  double num = 0;
  for (int c = 0; c < 3; ++c) {
    double m = 0;
    for (int n = 0; n < 2; ++n)
      for (int i = 0; i < 4; ++i) {
        const double pv = p.plane(n, c)[i], tv = t.plane(n, c)[i];
        m += -(tv * std::log(pv) + (1 - tv) * std::log(1 - pv));
      }
    num += w[c] * m / 8;
  }
  EXPECT_NEAR(got, num / 4.5, 1e-12);
}

TEST(Loss, BceClampsProbabilities) {
  Tensor<double> p(Shape{1, 1, 1, 2});
  p[0] = 0.0;
  p[1] = 1.0;
  Tensor<double> t(Shape{1, 1, 1, 2});
  t[0] = 1.0;
  const double v = ops::bce(Var<double>(p), t).value()[0];
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, -std::log(1e-7), 1e-6);
}

TEST(GradCheck, Losses) {
  auto p = random_var(Shape{2, 4, 3, 3}, 31, 0.05, 0.95);
  Tensor<double> t(Shape{2, 4, 3, 3});
  for (std::size_t i = 0; i < t.numel(); i += 2) t[i] = 1;
  const std::vector<double> w{0, 1, 2, 6};
  EXPECT_LT(grad_check([&] { return ops::weighted_bce(p, t, w); }, {{"p", p}}).max_rel_error, 1e-6);
  EXPECT_LT(grad_check([&] { return ops::bce(p, t); }, {{"p", p}}).max_rel_error, 1e-6);
}

TEST(Autograd, NoGradGuardRecordsNothing) {
  auto x = random_var(Shape{1, 1, 2, 2}, 32);
  Var<double> y;
  {
    NoGradGuard g;
    y = ops::sum(ops::mul(x, x));
  }
  EXPECT_TRUE(GradMode::enabled());
  EXPECT_FALSE(y.requires_grad());
}

TEST(Autograd, SharedSubgraphAccumulates) {
  Var<double> x(Tensor<double>(Shape{1, 1, 1, 1}, 3.0), true);
  const auto y = ops::add(ops::mul(x, x), x);  // dy/dx = 2x + 1
  ops::sum(y).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParamStore<double> store;
  auto v = store.add_param("w", Tensor<double>(Shape{1, 1, 1, 2}, 1.0));
  v.grad()[0] = 0.3;
  v.grad()[1] = -40.0;
  Adam<double> opt(0.01);
  opt.step(store.params());
  // Bias-corrected first step is lr * sign(g) up to eps.
  EXPECT_NEAR(v.value()[0], 1.0 - 0.01, 1e-7);
  EXPECT_NEAR(v.value()[1], 1.0 + 0.01, 1e-7);
}

TEST(Adam, SkipsFrozenParameters) {
  ParamStore<double> store;
  auto v = store.add_param("w", Tensor<double>(Shape{1, 1, 1, 1}, 1.0));
  v.grad()[0] = 1.0;
  v.set_requires_grad(false);
  Adam<double> opt(0.1);
  opt.step(store.params());
  EXPECT_EQ(v.value()[0], 1.0);
}

TEST(Adam, MinimisesQuadratic) {
  ParamStore<double> store;
  auto v = store.add_param("w", Tensor<double>(Shape{1, 1, 1, 1}, 5.0));
  Adam<double> opt(0.1);
  for (int i = 0; i < 500; ++i) {
    store.zero_grad();
    auto d = ops::add(v, Var<double>(Tensor<double>(Shape{1, 1, 1, 1}, -2.0)));
    ops::sum(ops::mul(d, d)).backward();
    opt.step(store.params());
  }
  EXPECT_NEAR(v.value()[0], 2.0, 1e-2);
}

TEST(TensorMap, UpsampleCenterCropEqualsComposition) {
  TensorMap<double> m{random_var(Shape{2, 3, 8, 8}, 33), {{0, 0, 8192, 8192}, {100, 50, 8192, 8192}}};
  const auto a = upsample_center_crop(m, 16, 16, 16);
  const auto b = center_crop(bilinear_upsample(m, 16, 16), 16, 16);
  EXPECT_LT(msy::testing::max_abs_diff(a.data.value(), b.data.value()), 1e-12);
  for (int i = 0; i < 2; ++i) EXPECT_EQ(a.footprints[i], b.footprints[i]);
}

TEST(TensorMap, CropUpdatesFootprint) {
  TensorMap<double> m{random_var(Shape{1, 1, 16, 16}, 34), {{0, 0, 512, 512}}};
  const auto c = center_crop(m, 4, 4);
  EXPECT_EQ(c.footprints[0], (Footprint{192, 192, 128, 128}));
  EXPECT_EQ(bilinear_upsample(c, 4, 4).footprints[0], c.footprints[0]);
  EXPECT_EQ(c.cell(0, 0, 0), (Footprint{192, 192, 32, 32}));
}

TEST(GradCheckHarness, DetectsWrongGradient) {
  // A deliberately wrong backward closure must be reported.
  auto x = random_var(Shape{1, 1, 1, 3}, 35);
  auto bad = [&] {
    Tensor<double> v(Shape{1, 1, 1, 1});
    for (std::size_t i = 0; i < 3; ++i) v[0] += x.value()[i] * x.value()[i];
    return Var<double>::make(v, {x}, [](Node<double>& n) {
      auto& g = n.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < 3; ++i) g[i] += n.grad[0] * n.inputs[0]->value[i];  // missing factor 2
    });
  };
  EXPECT_GT(grad_check(bad, {{"x", x}}).max_rel_error, 0.1);
}
