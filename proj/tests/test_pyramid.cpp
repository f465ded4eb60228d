#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "msy/pyramid.hpp"

using namespace msy;
namespace fs = std::filesystem;

namespace {

SynthParams small_params(int base = 256) {
  SynthParams p;
  p.base_size = base;
  return p;
}

RgbImage uniform(int h, int w, float r, float g, float b) {
  RgbImage img(h, w, 3);
  for (std::size_t i = 0; i < img.pixels(); ++i) {
    img.data[3 * i] = r;
    img.data[3 * i + 1] = g;
    img.data[3 * i + 2] = b;
  }
  return img;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("msy_test_pyramid_" + name);
  fs::remove_all(p);
  return p;
}

// Reinhard decorrelated space, written out from the published matrices.
std::array<double, 3> lab_oracle(double r, double g, double b) {
  const double R = std::max(r / 255, 1.0 / 255), G = std::max(g / 255, 1.0 / 255), B = std::max(b / 255, 1.0 / 255);
  const double L = std::log10(0.3811 * R + 0.5783 * G + 0.0402 * B);
  const double M = std::log10(0.1967 * R + 0.7244 * G + 0.0782 * B);
  const double S = std::log10(0.0241 * R + 0.1288 * G + 0.8444 * B);
  return {(L + M + S) / std::sqrt(3.0), (L + M - 2 * S) / std::sqrt(6.0), (L - M) / std::sqrt(2.0)};
}

}  // namespace

TEST(Synth, Deterministic) {
  const auto a = synth_slide(small_params(), 5, "a");
  const auto b = synth_slide(small_params(), 5, "a");
  ASSERT_EQ(a.levels.size(), b.levels.size());
  for (std::size_t i = 0; i < a.levels.size(); ++i) {
    EXPECT_EQ(a.levels[i].rgb, b.levels[i].rgb);
    EXPECT_EQ(a.levels[i].labels, b.levels[i].labels);
  }
  EXPECT_NE(synth_slide(small_params(), 6).levels[0].rgb, a.levels[0].rgb);
}

TEST(Synth, ContainerInvariants) {
  const auto img = synth_slide(small_params(1024), 1);
  EXPECT_NO_THROW(img.validate());
  ASSERT_EQ(img.levels.size(), 3u);
  EXPECT_EQ(img.levels[1].scale, 4);
  EXPECT_EQ(img.levels[1].rgb.h, 256);
  EXPECT_EQ(img.levels[2].rgb.w, 64);
  for (const auto& l : img.levels) {
    ASSERT_TRUE(l.labels);
    for (auto v : l.labels->data) ASSERT_LT(v, 4);
  }
}

TEST(Synth, InvalidParameters) {
  auto p = small_params(1000);
  EXPECT_THROW(synth_slide(p, 1), ConfigError);
  p = small_params();
  p.class_count = 2;
  EXPECT_THROW(synth_slide(p, 1), ConfigError);
  p = small_params();
  p.ring_diameter_min = 0.1;
  EXPECT_THROW(p.validate(), ConfigError);
}

TEST(Synth, TumorPixelsLieInsideRings) {
  const auto p = small_params(512);
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto img = synth_slide(p, seed);
    const auto rings = synth_rings(p, seed);
    ASSERT_FALSE(rings.empty());
    for (const auto& r : rings) EXPECT_GE(2 * r.outer_r, p.base_size / 8.0);
    const auto& lab = *img.levels[0].labels;
    for (int y = 0; y < lab.h; ++y)
      for (int x = 0; x < lab.w; ++x) {
        if (lab.at(y, x) < 2) continue;
        bool inside = false;
        for (const auto& r : rings) inside |= std::hypot(x + 0.5 - r.cx, y + 0.5 - r.cy) <= r.outer_r + 1.0;
        ASSERT_TRUE(inside) << "tumor pixel at " << x << "," << y;
      }
  }
}

TEST(Synth, TextureStatisticsDoNotRevealRings) {
  // Interior tissue vs tissue away from any ring: intensity mean and variance
  // agree within 2%, so only the enclosing ring separates the classes.
  const auto p = small_params(1024);
  double worst_mean = 0, worst_var = 0;
  for (std::uint64_t seed : {11, 12, 13, 14}) {
    const auto img = synth_slide(p, seed);
    const auto rings = synth_rings(p, seed);
    const auto& rgb = img.levels[0].rgb;
    const auto& lab = *img.levels[0].labels;
    double s[2]{}, q[2]{}, n[2]{};
    for (int y = 0; y < rgb.h; ++y)
      for (int x = 0; x < rgb.w; ++x) {
        if (lab.at(y, x) == 0) continue;
        int where = -1;  // 0 interior, 1 far outside
        bool near = false;
        for (const auto& r : rings) {
          const double d = std::hypot(x + 0.5 - r.cx, y + 0.5 - r.cy);
          if (d < r.inner_r - 2) where = 0;
          if (d < r.outer_r + 8) near = true;
        }
        if (where < 0 && !near) where = 1;
        if (where < 0) continue;
        const double v = (rgb.at(y, x, 0) + rgb.at(y, x, 1) + rgb.at(y, x, 2)) / 3.0;
        s[where] += v;
        q[where] += v * v;
        n[where] += 1;
      }
    ASSERT_GT(n[0], 1000);
    ASSERT_GT(n[1], 1000);
    const double m0 = s[0] / n[0], m1 = s[1] / n[1];
    const double v0 = q[0] / n[0] - m0 * m0, v1 = q[1] / n[1] - m1 * m1;
    worst_mean = std::max(worst_mean, std::abs(m0 - m1) / m1);
    worst_var = std::max(worst_var, std::abs(v0 - v1) / v1);
  }
  EXPECT_LT(worst_mean, 0.02);
  EXPECT_LT(worst_var, 0.02);
}

TEST(Synth, LabelLevelsAgreeWithMajorityVote) {
  const auto img = synth_slide(small_params(1024), 21);
  const auto& base = *img.levels[0].labels;
  for (std::size_t li = 1; li < img.levels.size(); ++li) {
    const int f = img.levels[li].scale;
    const auto& stored = *img.levels[li].labels;
    std::size_t agree = 0;
    for (int y = 0; y < stored.h; ++y)
      for (int x = 0; x < stored.w; ++x) {
        int count[4]{};
        for (int yy = y * f; yy < std::min(base.h, (y + 1) * f); ++yy)
          for (int xx = x * f; xx < std::min(base.w, (x + 1) * f); ++xx) ++count[base.at(yy, xx)];
        int best = 0;
        for (int c = 1; c < 4; ++c)
          if (count[c] >= count[best]) best = c;
        agree += stored.at(y, x) == best;
      }
    EXPECT_GE(double(agree) / stored.pixels(), 0.99) << "scale " << f;
  }
}

TEST(Downsample, BoxAverageAndMajority) {
  RgbImage img(2, 3, 3);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = float(i);
  const auto d = downsample_rgb(img, 2);
  ASSERT_EQ(d.w, 2);
  EXPECT_FLOAT_EQ(d.at(0, 0, 0), (0 + 3 + 9 + 12) / 4.f);
  EXPECT_FLOAT_EQ(d.at(0, 1, 0), (6 + 15) / 2.f);  // partial cell
  LabelMap l(2, 2, 1);
  l.at(0, 0) = 1;
  l.at(0, 1) = 1;
  l.at(1, 0) = 3;
  l.at(1, 1) = 3;
  EXPECT_EQ(downsample_labels(l, 2, 4).at(0, 0), 3);  // tie goes to the larger id
}

TEST(TissueMask, ThresholdExamples) {
  const auto white = tissue_mask_level(uniform(8, 8, 255, 255, 255));
  for (auto v : white.data) EXPECT_EQ(v, 0);
  const auto tissue = tissue_mask_level(uniform(8, 8, 200, 180, 200));
  for (auto v : tissue.data) EXPECT_EQ(v, 1);
  // G above 210 alone is enough to reject.
  for (auto v : threshold_tissue(uniform(2, 2, 200, 211, 200)).data) EXPECT_EQ(v, 0);
  for (auto v : threshold_tissue(uniform(2, 2, 235, 210, 235)).data) EXPECT_EQ(v, 1);
}

TEST(TissueMask, IsolatedPixelRemovedByOpening) {
  Mask m(5, 5, 1, 0);
  m.at(2, 2) = 1;
  for (auto v : binary_open(m, 2).data) EXPECT_EQ(v, 0);
  auto img = uniform(5, 5, 255, 255, 255);
  img.at(2, 2, 0) = img.at(2, 2, 1) = img.at(2, 2, 2) = 100;
  for (auto v : tissue_mask_level(img).data) EXPECT_EQ(v, 0);
}

TEST(TissueMask, OpeningSquareLeavesDisk) {
  // A 5x5 square eroded by a radius-2 disk keeps its centre; dilating that
  // point gives back the 13-pixel disk.
  Mask m(9, 9, 1, 0);
  for (int y = 2; y < 7; ++y)
    for (int x = 2; x < 7; ++x) m.at(y, x) = 1;
  const auto o = binary_open(m, 2);
  int count = 0;
  for (int y = 0; y < 9; ++y)
    for (int x = 0; x < 9; ++x) {
      const bool want = (x - 4) * (x - 4) + (y - 4) * (y - 4) <= 4;
      EXPECT_EQ(o.at(y, x), want ? 1 : 0) << x << "," << y;
      count += o.at(y, x);
    }
  EXPECT_EQ(count, 13);
  // Closing fills a one-pixel hole.
  Mask h(7, 7, 1, 1);
  h.at(3, 3) = 0;
  for (auto v : binary_close(h, 2).data) EXPECT_EQ(v, 1);
}

TEST(TissueMask, OpeningAndClosingAreIdempotent) {
  std::mt19937 rng(3);
  Mask m(40, 40, 1, 0);
  for (auto& v : m.data) v = rng() % 3 == 0;
  const auto o = binary_open(m, 2);
  EXPECT_EQ(binary_open(o, 2), o);
  const auto c = binary_close(m, 2);
  EXPECT_EQ(binary_close(c, 2), c);
}

TEST(TissueMask, ComputedPerLevel) {
  const auto img = synth_slide(small_params(512), 4);
  const auto tm = tissue_masks(img);
  EXPECT_EQ(tm.radius, 2);
  for (const auto& l : img.levels) {
    EXPECT_EQ(tm.levels.at(l.scale), tissue_mask_level(l.rgb));
    EXPECT_EQ(tissue_mask(img, l.scale), tm.levels.at(l.scale));
  }
}

TEST(ColorSpace, MatchesPublishedMatrices) {
  for (auto [r, g, b] : {std::tuple{200.0, 150.0, 210.0}, {30.0, 60.0, 90.0}, {255.0, 255.0, 255.0}, {0.0, 10.0, 0.0}}) {
    const auto got = rgb_to_lab({r, g, b});
    const auto want = lab_oracle(r, g, b);
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(got[c], want[c], 1e-12);
  }
  const auto back = lab_to_rgb(rgb_to_lab({120, 80, 160}));
  EXPECT_NEAR(back[0], 120, 1e-9);
  EXPECT_NEAR(back[1], 80, 1e-9);
  EXPECT_NEAR(back[2], 160, 1e-9);
}

TEST(Reinhard, MatchesReferenceMean) {
  const auto src = synth_slide(small_params(512), 31);
  auto p = small_params(512);
  p.color_cast = 0.1;
  const auto refimg = synth_slide(p, 32);
  const auto& rgb = src.levels[0].rgb;
  const Mask m = tissue_mask_level(rgb);
  const ColorStats ref = color_stats(refimg.levels[0].rgb, tissue_mask_level(refimg.levels[0].rgb));
  const auto out = reinhard_transfer(rgb, m, ref);
  const auto got = color_stats(out, m);
  for (int c = 0; c < 3; ++c) {
    EXPECT_NEAR(got.mean[c], ref.mean[c], 1e-3);
    EXPECT_NEAR(got.sd[c], ref.sd[c], 1e-3);
  }
}

TEST(Reinhard, IdempotentTransfer) {
  const auto src = synth_slide(small_params(512), 33);
  const auto& rgb = src.levels[0].rgb;
  const Mask m = tissue_mask_level(rgb);
  const ColorStats own = color_stats(rgb, m);
  const auto same = reinhard_transfer(rgb, m, own);
  for (std::size_t i = 0; i < rgb.data.size(); ++i) ASSERT_NEAR(same.data[i], rgb.data[i], 1e-3);
  const auto other = synth_slide(small_params(512), 36).levels[0].rgb;
  const ColorStats ref = color_stats(other, tissue_mask_level(other));
  const auto once = reinhard_transfer(rgb, m, ref);
  const auto twice = reinhard_transfer(once, m, ref);
  for (std::size_t i = 0; i < once.data.size(); ++i) ASSERT_NEAR(twice.data[i], once.data[i], 1e-3);
}

TEST(Reinhard, NormalizeStandardizesTissue) {
  const auto src = synth_slide(small_params(512), 34);
  const auto tm = tissue_masks(src);
  const auto ref = color_stats(synth_slide(small_params(512), 35), tissue_masks(synth_slide(small_params(512), 35)));
  const auto out = reinhard_normalize(src, ref, tm);
  EXPECT_TRUE(out.normalized);
  for (const auto& l : out.levels) {
    const Mask& m = tm.levels.at(l.scale);
    for (int c = 0; c < 3; ++c) {
      double s = 0, q = 0, n = 0;
      for (std::size_t i = 0; i < l.rgb.pixels(); ++i) {
        if (!m.data[i]) continue;
        s += l.rgb.data[3 * i + c];
        q += double(l.rgb.data[3 * i + c]) * l.rgb.data[3 * i + c];
        ++n;
      }
      EXPECT_NEAR(s / n, 0.0, 1e-4);
      EXPECT_NEAR(q / n - (s / n) * (s / n), 1.0, 1e-3);
    }
    EXPECT_EQ(l.labels, src.level(l.scale).labels);
  }
  // White background maps onto each level's fill value.
  const auto& l0 = out.levels[0];
  const auto& r0 = src.levels[0].rgb;
  for (std::size_t i = 0; i < r0.pixels(); ++i)
    if (r0.data[3 * i] == 255 && r0.data[3 * i + 1] == 255 && r0.data[3 * i + 2] == 255) {
      for (int c = 0; c < 3; ++c) EXPECT_NEAR(l0.rgb.data[3 * i + c], l0.fill[c], 1e-4);
      break;
    }
  EXPECT_THROW(reinhard_normalize(out, ref, tm), ConfigError);
}

TEST(Reinhard, Errors) {
  const auto white = uniform(16, 16, 255, 255, 255);
  EXPECT_THROW(color_stats(white, tissue_mask_level(white)), EmptyTissueError);
  const auto flat = uniform(16, 16, 200, 180, 200);
  EXPECT_THROW(color_stats(flat, tissue_mask_level(flat)), DegenerateColorError);
  PyramidImage img;
  img.base_h = img.base_w = 16;
  img.levels.push_back({1, white, std::nullopt, {}});
  const ColorStats ref{{1, 0, 0}, {1, 1, 1}};
  EXPECT_THROW(reinhard_normalize(img, {{1, ref}}, tissue_masks(img)), EmptyTissueError);
}

TEST(PyramidIo, RawRoundTrip) {
  const auto img = synth_slide(small_params(256), 41, "s41");
  const auto dir = scratch("raw");
  save_pyramid(img, dir);
  const auto back = load_pyramid(dir);
  EXPECT_EQ(back.id, "s41");
  EXPECT_EQ(back.base_h, img.base_h);
  EXPECT_EQ(back.class_names, img.class_names);
  ASSERT_EQ(back.levels.size(), img.levels.size());
  for (std::size_t i = 0; i < img.levels.size(); ++i) {
    // 8-bit storage: raw pyramids are integer valued.
    for (std::size_t k = 0; k < img.levels[i].rgb.data.size(); ++k)
      ASSERT_NEAR(back.levels[i].rgb.data[k], img.levels[i].rgb.data[k], 0.5);
    EXPECT_EQ(back.levels[i].labels, img.levels[i].labels);
  }
  fs::remove_all(dir);
}

TEST(PyramidIo, NormalizedRoundTripIsExact) {
  const auto img = synth_slide(small_params(256), 42);
  const auto tm = tissue_masks(img);
  const auto norm = reinhard_normalize(img, color_stats(img, tm), tm);
  const auto dir = scratch("norm");
  save_pyramid(norm, dir);
  const auto back = load_pyramid(dir);
  EXPECT_TRUE(back.normalized);
  for (std::size_t i = 0; i < norm.levels.size(); ++i) {
    EXPECT_EQ(back.levels[i].rgb, norm.levels[i].rgb);
    EXPECT_EQ(back.levels[i].fill, norm.levels[i].fill);
  }
  fs::remove_all(dir);
}

TEST(PyramidIo, DatasetIndexAndErrors) {
  const auto root = scratch("ds");
  fs::create_directories(root);
  for (int i = 0; i < 2; ++i) save_pyramid(synth_slide(small_params(128), 50 + i, "s" + std::to_string(i)), root / ("s" + std::to_string(i)));
  write_dataset_index(root, {"s0", "s1"}, {{"origin", "test"}});
  const auto ds = open_dataset(root);
  EXPECT_EQ(ds.slide_ids, (std::vector<std::string>{"s0", "s1"}));
  EXPECT_EQ(ds.info["origin"], "test");
  EXPECT_EQ(ds.load_all().size(), 2u);
  EXPECT_THROW(load_pyramid(root / "missing"), PyramidIoError);
  EXPECT_THROW(open_dataset(root / "missing"), PyramidIoError);
  fs::remove_all(root);
}

TEST(PyramidImage, ValidateRejectsBadContainers) {
  auto img = synth_slide(small_params(128), 60);
  img.levels[1].rgb = RgbImage(10, 10, 3);
  EXPECT_THROW(img.validate(), ConfigError);
  img = synth_slide(small_params(128), 60);
  std::swap(img.levels[1], img.levels[2]);
  EXPECT_THROW(img.validate(), ConfigError);
  img = synth_slide(small_params(128), 60);
  img.levels[0].labels->data[0] = 9;
  EXPECT_THROW(img.validate(), ConfigError);
}
