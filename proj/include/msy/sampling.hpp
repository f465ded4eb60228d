#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "msy/backend/tensor_map.hpp"
#include "msy/pyramid.hpp"

namespace msy {

class BoundsError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};
class PlanningError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kDefaultPatchSize = 512;

struct MultiScalePatch {
  int patch_size = kDefaultPatchSize;
  double cx = 0, cy = 0;  // shared scale-1 centre
  std::map<int, RgbImage> images;       // scale -> P x P x 3
  std::map<int, Footprint> footprints;  // scale -> scale-1 rectangle
  int label_scale = 1;
  LabelMap label;  // P x P at label_scale
  std::vector<std::uint8_t> presence;
  bool normalized = false;
};

// Level-n origin of a P-pixel crop centred on scale-1 point (x, y).
int crop_origin(double coord, int scale, int patch_size);

// Centres must lie inside the base image. Pixels outside the slide are the
// level's fill colour and background label.
MultiScalePatch extract_patch(const PyramidImage& img, double cx, double cy, const std::vector<int>& scales,
                              int patch_size = kDefaultPatchSize, int label_scale = 1, int presence_min_pixels = 1);

// Same without the centre check; used for evaluation tiles that hang past the
// slide edge at coarse detail scales.
MultiScalePatch extract_patch_unchecked(const PyramidImage& img, double cx, double cy, const std::vector<int>& scales,
                                        int patch_size = kDefaultPatchSize, int label_scale = 1,
                                        int presence_min_pixels = 1);

std::vector<std::uint8_t> class_presence(const LabelMap& label, int class_count, int min_pixels = 1);

// ---- epoch planning -----------------------------------------------------------

// Pixel positions per class of a slide's level-0 label map.
struct SlideClassIndex {
  std::string slide_id;
  int width = 0;
  std::vector<std::vector<std::uint32_t>> pixels;  // class -> flat indices

  bool has(int c) const { return c < static_cast<int>(pixels.size()) && !pixels[c].empty(); }
};

SlideClassIndex index_classes(const PyramidImage& img, int label_scale = 1);

struct Directive {
  int slide = 0;  // index into the slide list
  double cx = 0, cy = 0;
  int target_class = 0;
};

struct EpochPlan {
  std::uint64_t seed = 0;
  std::vector<Directive> directives;
};

inline constexpr int kPatchesPerEpoch = 1920;

// Per-slide counts differ by at most one; within a slide its available classes
// are cycled evenly, ties resolved towards globally rarer classes. Coordinates
// are in scale-1 pixels (label_scale multiples for coarse members).
EpochPlan plan_epoch(const std::vector<SlideClassIndex>& slides, std::uint64_t seed,
                     int patches = kPatchesPerEpoch, int label_scale = 1);

std::uint64_t epoch_seed(std::uint64_t base, int epoch);

// ---- augmentation --------------------------------------------------------------

struct Transform {
  int rotation = 0;  // quarter turns, counter-clockwise
  bool flip = false;  // horizontal mirror, applied after rotation
  double saturation = 1.0;
  double brightness = 0.0;  // fraction of the value range

  static Transform draw(std::uint64_t seed);
  bool is_identity() const { return rotation % 4 == 0 && !flip && saturation == 1.0 && brightness == 0.0; }
};

template <typename T>
Raster<T> apply_geometry(const Raster<T>& r, const Transform& t);

MultiScalePatch augment(const MultiScalePatch& p, const Transform& t);
MultiScalePatch augment(const MultiScalePatch& p, std::uint64_t seed);

// ---- validation sub-images -------------------------------------------------------

struct SubImage {
  std::string slide_id;
  int x = 0, y = 0;  // scale-1 origin
  bool operator==(const SubImage&) const = default;
};

struct ValidationSet {
  int size = 3072;
  std::vector<SubImage> items;

  std::vector<SubImage> for_slide(const std::string& id) const;
  bool operator==(const ValidationSet&) const = default;
};

// Origins are multiples of `align` so every pyramid level tiles the sub-image
// exactly.
ValidationSet make_validation_set(const std::vector<PyramidImage>& slides, int per_slide, int size,
                                  std::uint64_t seed, int align = 16, int max_attempts = 2000);

void save_validation_set(const ValidationSet& v, const std::filesystem::path& path);
ValidationSet load_validation_set(const std::filesystem::path& path);

}  // namespace msy
