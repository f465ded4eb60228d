#include "msy/pyramid.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace msy {

const PyramidLevel& PyramidImage::level(int scale) const {
  for (const auto& l : levels)
    if (l.scale == scale) return l;
  throw ConfigError("pyramid '" + id + "' has no level at scale " + std::to_string(scale));
}

bool PyramidImage::has_scale(int scale) const {
  return std::any_of(levels.begin(), levels.end(), [&](const auto& l) { return l.scale == scale; });
}

void PyramidImage::validate() const {
  if (levels.empty() || levels.front().scale != 1) throw ConfigError("pyramid level 0 must have scale 1");
  for (std::size_t i = 0; i < levels.size(); ++i) {
    const auto& l = levels[i];
    if (i > 0 && l.scale <= levels[i - 1].scale) throw ConfigError("pyramid scales must be strictly increasing");
    if (l.rgb.h != ceil_div(base_h, l.scale) || l.rgb.w != ceil_div(base_w, l.scale) || l.rgb.c != 3) {
      throw ConfigError("level " + std::to_string(l.scale) + " has wrong dimensions");
    }
    if (l.labels) {
      if (l.labels->h != l.rgb.h || l.labels->w != l.rgb.w) throw ConfigError("label map size mismatch");
      for (auto v : l.labels->data)
        if (v >= class_count) throw ConfigError("label id " + std::to_string(v) + " >= class_count");
    }
  }
}

RgbImage downsample_rgb(const RgbImage& img, int f) {
  if (f == 1) return img;
  RgbImage out(ceil_div(img.h, f), ceil_div(img.w, f), img.c);
  for (int oy = 0; oy < out.h; ++oy) {
    for (int ox = 0; ox < out.w; ++ox) {
      const int y1 = std::min(img.h, (oy + 1) * f), x1 = std::min(img.w, (ox + 1) * f);
      for (int ch = 0; ch < img.c; ++ch) {
        double acc = 0.0;
        for (int y = oy * f; y < y1; ++y)
          for (int x = ox * f; x < x1; ++x) acc += img.at(y, x, ch);
        out.at(oy, ox, ch) = static_cast<float>(acc / ((y1 - oy * f) * (x1 - ox * f)));
      }
    }
  }
  return out;
}

LabelMap downsample_labels(const LabelMap& labels, int f, int class_count) {
  if (f == 1) return labels;
  LabelMap out(ceil_div(labels.h, f), ceil_div(labels.w, f), 1);
  std::vector<int> counts(class_count);
  for (int oy = 0; oy < out.h; ++oy) {
    for (int ox = 0; ox < out.w; ++ox) {
      std::fill(counts.begin(), counts.end(), 0);
      for (int y = oy * f; y < std::min(labels.h, (oy + 1) * f); ++y)
        for (int x = ox * f; x < std::min(labels.w, (ox + 1) * f); ++x) ++counts[labels.at(y, x)];
      int best = 0;
      for (int c = 1; c < class_count; ++c)
        if (counts[c] >= counts[best]) best = c;
      out.at(oy, ox) = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

// ---- synthetic slides --------------------------------------------------------

void SynthParams::validate() const {
  if (base_size < 64 || base_size % 16 != 0) throw ConfigError("base_size must be a multiple of 16 and >= 64");
  if (class_count != 3 && class_count != 4) throw ConfigError("synthetic slides support class_count 3 or 4");
  if (scales.empty() || scales.front() != 1) throw ConfigError("scales must start with 1");
  for (std::size_t i = 1; i < scales.size(); ++i)
    if (scales[i] <= scales[i - 1]) throw ConfigError("scales must be strictly increasing");
  if (rings_min < 1 || rings_max < rings_min) throw ConfigError("need 1 <= rings_min <= rings_max");
  if (ring_diameter_min < 0.125 || ring_diameter_max < ring_diameter_min || ring_diameter_max > 0.9) {
    throw ConfigError("ring diameter fractions must satisfy 1/8 <= min <= max <= 0.9");
  }
  if (!(ring_thickness > 0) || ring_thickness * 2 >= ring_diameter_min) throw ConfigError("bad ring_thickness");
  if (texture_cell < 8) throw ConfigError("texture_cell must be >= 8");
  if (!(tissue_fraction > 0 && tissue_fraction <= 1)) throw ConfigError("tissue_fraction must be in (0, 1]");
  if (color_cast < 0 || color_cast > 0.1) throw ConfigError("color_cast must be in [0, 0.1]");
  if (pixel_noise < 0 || pixel_noise > 10) throw ConfigError("pixel_noise must be in [0, 10]");
}

void to_json(nlohmann::json& j, const SynthParams& p) {
  j = {{"base_size", p.base_size},
       {"class_count", p.class_count},
       {"scales", p.scales},
       {"rings_min", p.rings_min},
       {"rings_max", p.rings_max},
       {"ring_diameter_min", p.ring_diameter_min},
       {"ring_diameter_max", p.ring_diameter_max},
       {"ring_thickness", p.ring_thickness},
       {"texture_cell", p.texture_cell},
       {"tissue_fraction", p.tissue_fraction},
       {"color_cast", p.color_cast},
       {"pixel_noise", p.pixel_noise}};
}

void from_json(const nlohmann::json& j, SynthParams& p) {
  SynthParams d;
  p.base_size = j.value("base_size", d.base_size);
  p.class_count = j.value("class_count", d.class_count);
  p.scales = j.value("scales", d.scales);
  p.rings_min = j.value("rings_min", d.rings_min);
  p.rings_max = j.value("rings_max", d.rings_max);
  p.ring_diameter_min = j.value("ring_diameter_min", d.ring_diameter_min);
  p.ring_diameter_max = j.value("ring_diameter_max", d.ring_diameter_max);
  p.ring_thickness = j.value("ring_thickness", d.ring_thickness);
  p.texture_cell = j.value("texture_cell", d.texture_cell);
  p.tissue_fraction = j.value("tissue_fraction", d.tissue_fraction);
  p.color_cast = j.value("color_cast", d.color_cast);
  p.pixel_noise = j.value("pixel_noise", d.pixel_noise);
}

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
double hash_unit(std::uint64_t seed, std::int64_t i, std::int64_t j, std::uint64_t salt) {
  const std::uint64_t h = splitmix(seed ^ splitmix(static_cast<std::uint64_t>(i) * 0x100000001b3ULL ^
                                                    splitmix(static_cast<std::uint64_t>(j) + salt)));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

struct Blob {
  double cx, cy, r;
  std::array<double, 4> amp, phase;
  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double th = std::atan2(dy, dx);
    double rr = r;
    for (int k = 0; k < 4; ++k) rr += r * amp[k] * std::cos((k + 2) * th + phase[k]);
    return dx * dx + dy * dy <= rr * rr;
  }
};

struct Layout {
  std::vector<RingInfo> rings;
  std::vector<Blob> blobs;
  std::array<double, 3> cast_gain, cast_offset;
};

Layout make_layout(const SynthParams& p, std::uint64_t seed) {
  p.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double n = p.base_size;
  Layout lay;
  const int ring_count = std::uniform_int_distribution<int>(p.rings_min, p.rings_max)(rng);
  for (int k = 0; k < ring_count; ++k) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      const double outer = 0.5 * n * (p.ring_diameter_min + u(rng) * (p.ring_diameter_max - p.ring_diameter_min));
      const double margin = outer + 4.0;
      if (2 * margin >= n) continue;
      const double cx = margin + u(rng) * (n - 2 * margin);
      const double cy = margin + u(rng) * (n - 2 * margin);
      bool clash = false;
      for (const auto& r : lay.rings)
        clash |= std::hypot(cx - r.cx, cy - r.cy) < outer + r.outer_r + 8.0;
      if (clash) continue;
      lay.rings.push_back({cx, cy, outer, outer - std::max(2.0, p.ring_thickness * n)});
      break;
    }
  }
  if (lay.rings.empty()) throw ConfigError("could not place any ring; reduce ring_diameter_min");
  const int blob_count = 2 + static_cast<int>(u(rng) * 2);
  for (int k = 0; k < blob_count; ++k) {
    Blob b;
    b.cx = n * (0.15 + 0.7 * u(rng));
    b.cy = n * (0.15 + 0.7 * u(rng));
    b.r = n * std::sqrt(p.tissue_fraction) * (0.3 + 0.2 * u(rng));
    for (int m = 0; m < 4; ++m) {
      b.amp[m] = 0.12 * u(rng) / (m + 1);
      b.phase[m] = 2 * std::numbers::pi * u(rng);
    }
    lay.blobs.push_back(b);
  }
  for (int ch = 0; ch < 3; ++ch) {
    lay.cast_gain[ch] = 1.0 + p.color_cast * (2 * u(rng) - 1);
    lay.cast_offset[ch] = 150.0 * p.color_cast * (2 * u(rng) - 1);
  }
  return lay;
}

// Nucleus-like dots on a jittered grid; placement does not depend on location
// on the slide. Texture B is texture A scaled by 16/9, so both cover the same
// area fraction and share first and second intensity moments.
bool in_nucleus(std::uint64_t seed, int texture, double x, double y) {
  const double spacing = texture == 0 ? 9.0 : 16.0;
  const double radius = 2.2 * spacing / 9.0;
  const auto gx = static_cast<std::int64_t>(std::floor(x / spacing));
  const auto gy = static_cast<std::int64_t>(std::floor(y / spacing));
  for (std::int64_t j = gy - 1; j <= gy + 1; ++j) {
    for (std::int64_t i = gx - 1; i <= gx + 1; ++i) {
      const double px = (i + hash_unit(seed, i, j, 11 + texture)) * spacing;
      const double py = (j + hash_unit(seed, i, j, 23 + texture)) * spacing;
      if ((x - px) * (x - px) + (y - py) * (y - py) <= radius * radius) return true;
    }
  }
  return false;
}

// Texture id (0 = A, 1 = B) from a jittered-grid Voronoi mosaic.
int texture_at(std::uint64_t seed, int cell, double x, double y) {
  const auto gx = static_cast<std::int64_t>(std::floor(x / cell));
  const auto gy = static_cast<std::int64_t>(std::floor(y / cell));
  double best = 1e300;
  int tex = 0;
  for (std::int64_t j = gy - 1; j <= gy + 1; ++j) {
    for (std::int64_t i = gx - 1; i <= gx + 1; ++i) {
      const double px = (i + hash_unit(seed, i, j, 101)) * cell;
      const double py = (j + hash_unit(seed, i, j, 103)) * cell;
      const double d = (x - px) * (x - px) + (y - py) * (y - py);
      if (d < best) {
        best = d;
        tex = hash_unit(seed, i, j, 107) < 0.5 ? 0 : 1;
      }
    }
  }
  return tex;
}

}  // namespace

std::vector<RingInfo> synth_rings(const SynthParams& params, std::uint64_t seed) {
  return make_layout(params, seed).rings;
}

PyramidImage synth_slide(const SynthParams& p, std::uint64_t seed, const std::string& id) {
  const Layout lay = make_layout(p, seed);
  const int n = p.base_size;
  const std::uint64_t tex_seed = splitmix(seed ^ 0x5eedULL);
  std::mt19937_64 noise_rng(splitmix(seed ^ 0xa0a0ULL));
  std::normal_distribution<double> noise(0.0, 1.0);

  RgbImage rgb(n, n, 3);
  LabelMap tumor(n, n, 1, 0);
  const std::array<double, 3> background{246, 245, 247}, stroma{205, 150, 195}, nucleus{105, 65, 145},
      capsule{160, 100, 150};
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double fx = x + 0.5, fy = y + 0.5;
      int ring_zone = 0;  // 0 outside, 1 interior, 2 wall
      for (const auto& r : lay.rings) {
        const double d = std::hypot(fx - r.cx, fy - r.cy);
        if (d <= r.inner_r) ring_zone = 1;
        else if (d <= r.outer_r) ring_zone = 2;
      }
      bool tissue = ring_zone != 0;
      for (const auto& r : lay.rings) tissue |= std::hypot(fx - r.cx, fy - r.cy) <= r.outer_r + 12.0;
      for (const auto& b : lay.blobs) tissue |= b.contains(fx, fy);

      std::array<double, 3> c = background;
      double sigma = 2.0;
      if (ring_zone == 2) {
        c = capsule;
        sigma = p.pixel_noise;
        tumor.at(y, x) = 2;
      } else if (tissue) {
        const int tex = texture_at(tex_seed, p.texture_cell, fx, fy);
        c = in_nucleus(tex_seed, tex, fx, fy) ? nucleus : stroma;
        sigma = p.pixel_noise;
        if (ring_zone == 1) tumor.at(y, x) = static_cast<std::uint8_t>(tex == 1 && p.class_count >= 4 ? 3 : 2);
      }
      for (int ch = 0; ch < 3; ++ch) {
        const double v = c[ch] * lay.cast_gain[ch] + lay.cast_offset[ch] + sigma * noise(noise_rng);
        rgb.at(y, x, ch) = static_cast<float>(std::clamp(std::round(v), 0.0, 255.0));
      }
    }
  }

  const Mask tissue = tissue_mask_level(rgb);
  LabelMap labels(n, n, 1, 0);
  for (std::size_t i = 0; i < labels.data.size(); ++i) {
    labels.data[i] = tumor.data[i] ? tumor.data[i] : static_cast<std::uint8_t>(tissue.data[i] ? 1 : 0);
  }

  PyramidImage img;
  img.id = id;
  img.base_h = img.base_w = n;
  img.class_count = p.class_count;
  img.class_names = {"background", "tissue", "whole_tumor", "viable_tumor"};
  img.class_names.resize(p.class_count);
  for (int s : p.scales) {
    PyramidLevel l;
    l.scale = s;
    l.rgb = downsample_rgb(rgb, s);
    l.labels = downsample_labels(labels, s, p.class_count);
    img.levels.push_back(std::move(l));
  }
  return img;
}

// ---- tissue mask -------------------------------------------------------------

namespace {

std::vector<std::pair<int, int>> disk_offsets(int r) {
  std::vector<std::pair<int, int>> out;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx)
      if (dx * dx + dy * dy <= r * r) out.emplace_back(dy, dx);
  return out;
}

// Out-of-image neighbours are ignored, so uniform masks are fixed points.
Mask morph(const Mask& m, int r, bool erode) {
  const auto offs = disk_offsets(r);
  Mask out(m.h, m.w, 1, 0);
  for (int y = 0; y < m.h; ++y) {
    for (int x = 0; x < m.w; ++x) {
      bool v = erode;
      for (const auto& [dy, dx] : offs) {
        const int yy = y + dy, xx = x + dx;
        if (yy < 0 || yy >= m.h || xx < 0 || xx >= m.w) continue;
        const bool s = m.at(yy, xx) != 0;
        if (erode && !s) {
          v = false;
          break;
        }
        if (!erode && s) {
          v = true;
          break;
        }
      }
      out.at(y, x) = v ? 1 : 0;
    }
  }
  return out;
}

}  // namespace

Mask threshold_tissue(const RgbImage& rgb) {
  Mask m(rgb.h, rgb.w, 1, 0);
  for (int y = 0; y < rgb.h; ++y)
    for (int x = 0; x < rgb.w; ++x)
      m.at(y, x) = rgb.at(y, x, 0) <= kTissueThreshold[0] && rgb.at(y, x, 1) <= kTissueThreshold[1] &&
                   rgb.at(y, x, 2) <= kTissueThreshold[2];
  return m;
}

Mask binary_open(const Mask& m, int radius) { return morph(morph(m, radius, true), radius, false); }
Mask binary_close(const Mask& m, int radius) { return morph(morph(m, radius, false), radius, true); }

Mask tissue_mask_level(const RgbImage& rgb, int radius) {
  return binary_close(binary_open(threshold_tissue(rgb), radius), radius);
}

Mask tissue_mask(const PyramidImage& img, int scale, int radius) {
  if (img.normalized) throw ConfigError("tissue_mask expects a raw RGB pyramid");
  return tissue_mask_level(img.level(scale).rgb, radius);
}

TissueMask tissue_masks(const PyramidImage& img, int radius) {
  TissueMask tm;
  tm.radius = radius;
  for (const auto& l : img.levels) tm.levels[l.scale] = tissue_mask(img, l.scale, radius);
  return tm;
}

// ---- Reinhard normalization -------------------------------------------------

namespace {

struct ColorMatrices {
  Eigen::Matrix3d rgb2lms, lms2rgb, lms2lab, lab2lms;
  ColorMatrices() {
    rgb2lms << 0.3811, 0.5783, 0.0402, 0.1967, 0.7244, 0.0782, 0.0241, 0.1288, 0.8444;
    Eigen::Matrix3d mix;
    mix << 1, 1, 1, 1, 1, -2, 1, -1, 0;
    lms2lab = Eigen::Vector3d(1 / std::sqrt(3.0), 1 / std::sqrt(6.0), 1 / std::sqrt(2.0)).asDiagonal() * mix;
    lms2rgb = rgb2lms.inverse();
    lab2lms = lms2lab.inverse();
  }
};

const ColorMatrices& matrices() {
  static const ColorMatrices m;
  return m;
}

constexpr double kMinIntensity = 1.0 / 255.0;

}  // namespace

void to_json(nlohmann::json& j, const ColorStats& s) { j = {{"mean", s.mean}, {"sd", s.sd}}; }
void from_json(const nlohmann::json& j, ColorStats& s) {
  s.mean = j.at("mean").get<std::array<double, 3>>();
  s.sd = j.at("sd").get<std::array<double, 3>>();
}

std::array<double, 3> rgb_to_lab(const std::array<double, 3>& rgb) {
  const auto& m = matrices();
  Eigen::Vector3d v(rgb[0], rgb[1], rgb[2]);
  v = (v / 255.0).cwiseMax(kMinIntensity);
  Eigen::Vector3d lms = (m.rgb2lms * v).cwiseMax(kMinIntensity);
  const Eigen::Vector3d lab = m.lms2lab * lms.array().log10().matrix();
  return {lab[0], lab[1], lab[2]};
}

std::array<double, 3> lab_to_rgb(const std::array<double, 3>& lab) {
  const auto& m = matrices();
  const Eigen::Vector3d loglms = m.lab2lms * Eigen::Vector3d(lab[0], lab[1], lab[2]);
  const Eigen::Vector3d lms = Eigen::pow(10.0, loglms.array()).matrix();
  const Eigen::Vector3d rgb = 255.0 * (m.lms2rgb * lms);
  return {rgb[0], rgb[1], rgb[2]};
}

namespace {

ColorStats stats_of(const std::vector<std::array<double, 3>>& px, const Mask& mask, const char* space) {
  ColorStats s;
  std::size_t count = 0;
  std::array<double, 3> sum{}, sq{};
  for (std::size_t i = 0; i < px.size(); ++i) {
    if (!mask.data[i]) continue;
    ++count;
    for (int c = 0; c < 3; ++c) sum[c] += px[i][c];
  }
  if (count == 0) throw EmptyTissueError("tissue mask is empty; cannot compute colour statistics");
  for (int c = 0; c < 3; ++c) s.mean[c] = sum[c] / count;
  for (std::size_t i = 0; i < px.size(); ++i) {
    if (!mask.data[i]) continue;
    for (int c = 0; c < 3; ++c) sq[c] += (px[i][c] - s.mean[c]) * (px[i][c] - s.mean[c]);
  }
  for (int c = 0; c < 3; ++c) {
    s.sd[c] = std::sqrt(sq[c] / count);
    if (!(s.sd[c] > 1e-9)) {
      throw DegenerateColorError(std::string("zero variance in ") + space + " channel " + std::to_string(c) +
                                 " over tissue pixels");
    }
  }
  return s;
}

std::vector<std::array<double, 3>> to_lab(const RgbImage& rgb) {
  std::vector<std::array<double, 3>> out(rgb.pixels());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = rgb_to_lab({rgb.data[3 * i], rgb.data[3 * i + 1], rgb.data[3 * i + 2]});
  }
  return out;
}

void check_mask(const RgbImage& rgb, const Mask& mask) {
  if (mask.h != rgb.h || mask.w != rgb.w) throw ConfigError("tissue mask size differs from image");
}

}  // namespace

ColorStats color_stats(const RgbImage& rgb, const Mask& mask) {
  check_mask(rgb, mask);
  return stats_of(to_lab(rgb), mask, "lab");
}

PyramidColorStats color_stats(const PyramidImage& img, const TissueMask& mask) {
  PyramidColorStats out;
  for (const auto& l : img.levels) out[l.scale] = color_stats(l.rgb, mask.levels.at(l.scale));
  return out;
}

namespace {

std::array<double, 3> transfer_pixel(const std::array<double, 3>& lab, const ColorStats& src, const ColorStats& ref) {
  std::array<double, 3> o;
  for (int c = 0; c < 3; ++c) o[c] = (lab[c] - src.mean[c]) / src.sd[c] * ref.sd[c] + ref.mean[c];
  return lab_to_rgb(o);
}

void check_ref(const ColorStats& ref) {
  for (int c = 0; c < 3; ++c) {
    if (!std::isfinite(ref.mean[c]) || !std::isfinite(ref.sd[c]) || !(ref.sd[c] > 0)) {
      throw ConfigError("reference colour statistics must be finite with positive sd");
    }
  }
}

}  // namespace

RgbImage reinhard_transfer(const RgbImage& rgb, const Mask& mask, const ColorStats& ref) {
  check_mask(rgb, mask);
  check_ref(ref);
  const auto lab = to_lab(rgb);
  const ColorStats src = stats_of(lab, mask, "lab");
  RgbImage out(rgb.h, rgb.w, 3);
  for (std::size_t i = 0; i < lab.size(); ++i) {
    const auto v = transfer_pixel(lab[i], src, ref);
    for (int c = 0; c < 3; ++c) out.data[3 * i + c] = static_cast<float>(v[c]);
  }
  return out;
}

PyramidImage reinhard_normalize(const PyramidImage& img, const PyramidColorStats& ref, const TissueMask& mask) {
  if (img.normalized) throw ConfigError("pyramid '" + img.id + "' is already normalized");
  PyramidImage out = img;
  out.normalized = true;
  for (auto& l : out.levels) {
    auto mit = mask.levels.find(l.scale);
    auto rit = ref.find(l.scale);
    if (mit == mask.levels.end()) throw ConfigError("no tissue mask for scale " + std::to_string(l.scale));
    if (rit == ref.end()) throw ConfigError("no reference statistics for scale " + std::to_string(l.scale));
    const Mask& m = mit->second;
    check_mask(l.rgb, m);
    check_ref(rit->second);
    const auto lab = to_lab(l.rgb);
    const ColorStats src = stats_of(lab, m, "lab");
    std::vector<std::array<double, 3>> moved(lab.size());
    for (std::size_t i = 0; i < lab.size(); ++i) moved[i] = transfer_pixel(lab[i], src, rit->second);
    const ColorStats z = stats_of(moved, m, "rgb");
    for (std::size_t i = 0; i < moved.size(); ++i)
      for (int c = 0; c < 3; ++c) l.rgb.data[3 * i + c] = static_cast<float>((moved[i][c] - z.mean[c]) / z.sd[c]);
    const auto white = transfer_pixel(rgb_to_lab({255.0, 255.0, 255.0}), src, rit->second);
    for (int c = 0; c < 3; ++c) l.fill[c] = static_cast<float>((white[c] - z.mean[c]) / z.sd[c]);
  }
  return out;
}

}  // namespace msy
