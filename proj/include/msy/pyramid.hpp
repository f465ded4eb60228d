#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace msy {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};
class EmptyTissueError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class DegenerateColorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class PyramidIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Interleaved h x w x c raster.
template <typename T>
struct Raster {
  int h = 0;
  int w = 0;
  int c = 1;
  std::vector<T> data;

  Raster() = default;
  Raster(int h_, int w_, int c_, T fill = T{}) : h(h_), w(w_), c(c_), data(static_cast<std::size_t>(h_) * w_ * c_, fill) {}

  T& at(int y, int x, int ch = 0) { return data[(static_cast<std::size_t>(y) * w + x) * c + ch]; }
  const T& at(int y, int x, int ch = 0) const { return data[(static_cast<std::size_t>(y) * w + x) * c + ch]; }
  std::size_t pixels() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Raster&) const = default;
};

using RgbImage = Raster<float>;      // h x w x 3, raw 0..255 or normalized
using LabelMap = Raster<std::uint8_t>;  // h x w x 1 class ids
using Mask = Raster<std::uint8_t>;      // h x w x 1, 0 / 1

struct PyramidLevel {
  int scale = 1;
  RgbImage rgb;
  std::optional<LabelMap> labels;
  // Value used for pixels outside the slide (white, or its normalized image).
  std::array<float, 3> fill{255.f, 255.f, 255.f};
};

struct PyramidImage {
  std::string id;
  int base_h = 0;
  int base_w = 0;
  int class_count = 4;
  std::vector<std::string> class_names;
  bool normalized = false;
  std::vector<PyramidLevel> levels;

  const PyramidLevel& level(int scale) const;
  bool has_scale(int scale) const;
  // Throws ConfigError on any violated container invariant.
  void validate() const;
};

inline int ceil_div(int a, int b) { return (a + b - 1) / b; }

// Box-averaged RGB and majority-vote labels (ties to the larger id) of level 0.
RgbImage downsample_rgb(const RgbImage& img, int factor);
LabelMap downsample_labels(const LabelMap& labels, int factor, int class_count);

// ---- synthetic slides --------------------------------------------------------

struct SynthParams {
  int base_size = 1024;
  int class_count = 4;
  std::vector<int> scales{1, 4, 16};
  int rings_min = 1;
  int rings_max = 2;
  // Ring outer diameter as a fraction of the base width.
  double ring_diameter_min = 0.30;
  double ring_diameter_max = 0.45;
  double ring_thickness = 0.03;
  // Mean size of the texture mosaic cells in pixels.
  int texture_cell = 48;
  double tissue_fraction = 0.7;
  double color_cast = 0.06;
  double pixel_noise = 6.0;

  void validate() const;
};

void to_json(nlohmann::json& j, const SynthParams& p);
void from_json(const nlohmann::json& j, SynthParams& p);

// Tissue blobs on white, two locally identical textures, and rings whose
// interior defines the tumor classes: texture A -> 2, texture B -> 3 (or 2
// when class_count == 3), ring wall -> 2. Remaining tissue is class 1 as
// given by tissue_mask on the generated image, everything else class 0.
PyramidImage synth_slide(const SynthParams& params, std::uint64_t seed, const std::string& id = "slide");

// Geometry of the generated rings (scale-1 pixels), for tests.
struct RingInfo {
  double cx, cy, outer_r, inner_r;
};
std::vector<RingInfo> synth_rings(const SynthParams& params, std::uint64_t seed);

// ---- tissue mask -------------------------------------------------------------

inline constexpr std::array<float, 3> kTissueThreshold{235.f, 210.f, 235.f};
inline constexpr int kMorphologyRadius = 2;

Mask threshold_tissue(const RgbImage& rgb);
Mask binary_open(const Mask& m, int radius);
Mask binary_close(const Mask& m, int radius);

struct TissueMask {
  std::map<int, Mask> levels;  // scale -> mask
  int radius = kMorphologyRadius;
};

Mask tissue_mask_level(const RgbImage& rgb, int radius = kMorphologyRadius);
Mask tissue_mask(const PyramidImage& img, int scale, int radius = kMorphologyRadius);
TissueMask tissue_masks(const PyramidImage& img, int radius = kMorphologyRadius);

// ---- Reinhard normalization -------------------------------------------------

struct ColorStats {
  std::array<double, 3> mean{};
  std::array<double, 3> sd{};
};
using PyramidColorStats = std::map<int, ColorStats>;  // per scale

void to_json(nlohmann::json& j, const ColorStats& s);
void from_json(const nlohmann::json& j, ColorStats& s);

// RGB (0..255) <-> decorrelated l-alpha-beta of the log-LMS cone space.
std::array<double, 3> rgb_to_lab(const std::array<double, 3>& rgb);
std::array<double, 3> lab_to_rgb(const std::array<double, 3>& lab);

ColorStats color_stats(const RgbImage& rgb, const Mask& mask);
PyramidColorStats color_stats(const PyramidImage& img, const TissueMask& mask);

// Statistics transfer only: maps the tissue statistics of `rgb` in the
// decorrelated space onto `ref` and returns RGB.
RgbImage reinhard_transfer(const RgbImage& rgb, const Mask& mask, const ColorStats& ref);

struct Standardization {
  std::array<double, 3> mean{};
  std::array<double, 3> sd{};
};

// Transfer followed by channel-wise standardization over tissue pixels. The
// result is a float pyramid with `normalized` set; labels carry over and each
// level's fill is white pushed through the same per-level map.
PyramidImage reinhard_normalize(const PyramidImage& img, const PyramidColorStats& ref, const TissueMask& mask);

// ---- disk format --------------------------------------------------------------

// Directory with manifest.json plus one file per level: 8-bit RGB PNG for raw
// pyramids, zlib-compressed float32 for normalized ones, and 8-bit label PNGs.
void save_pyramid(const PyramidImage& img, const std::filesystem::path& dir);
PyramidImage load_pyramid(const std::filesystem::path& dir);

void write_png_rgb(const std::filesystem::path& path, const RgbImage& img);
RgbImage read_png_rgb(const std::filesystem::path& path);
void write_png_gray(const std::filesystem::path& path, const Raster<std::uint8_t>& img);
Raster<std::uint8_t> read_png_gray(const std::filesystem::path& path);

// Dataset root: dataset.json listing slide directories in order.
struct Dataset {
  std::filesystem::path root;
  std::vector<std::string> slide_ids;
  nlohmann::json info;

  std::filesystem::path slide_dir(const std::string& id) const { return root / id; }
  std::vector<PyramidImage> load_all() const;
};

Dataset open_dataset(const std::filesystem::path& root);
void write_dataset_index(const std::filesystem::path& root, const std::vector<std::string>& ids,
                         const nlohmann::json& info);

}  // namespace msy
