#include "msy/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace msy {

int crop_origin(double coord, int scale, int patch_size) {
  // Nearest level-n pixel edge, so both footprint centres agree within n/2.
  return static_cast<int>(std::floor(coord / scale + 0.5)) - patch_size / 2;
}

std::vector<std::uint8_t> class_presence(const LabelMap& label, int class_count, int min_pixels) {
  std::vector<int> counts(class_count, 0);
  for (auto v : label.data)
    if (v < class_count) ++counts[v];
  std::vector<std::uint8_t> out(class_count);
  for (int c = 0; c < class_count; ++c) out[c] = counts[c] >= min_pixels ? 1 : 0;
  return out;
}

MultiScalePatch extract_patch(const PyramidImage& img, double cx, double cy, const std::vector<int>& scales,
                              int patch_size, int label_scale, int presence_min_pixels) {
  if (!(cx >= 0 && cy >= 0 && cx < img.base_w && cy < img.base_h)) {
    std::ostringstream msg;
    msg << "centre (" << cx << ", " << cy << ") outside slide '" << img.id << "' of size " << img.base_w << "x"
        << img.base_h;
    throw BoundsError(msg.str());
  }
  return extract_patch_unchecked(img, cx, cy, scales, patch_size, label_scale, presence_min_pixels);
}

MultiScalePatch extract_patch_unchecked(const PyramidImage& img, double cx, double cy, const std::vector<int>& scales,
                                        int patch_size, int label_scale, int presence_min_pixels) {
  if (patch_size < 2 || patch_size % 2 != 0) throw ConfigError("patch size must be even and >= 2");
  MultiScalePatch p;
  p.patch_size = patch_size;
  p.cx = cx;
  p.cy = cy;
  p.label_scale = label_scale;
  p.normalized = img.normalized;
  const int P = patch_size;
  for (int s : scales) {
    const PyramidLevel& l = img.level(s);
    const int ox = crop_origin(cx, s, P), oy = crop_origin(cy, s, P);
    RgbImage crop(P, P, 3);
    for (int y = 0; y < P; ++y) {
      const int sy = oy + y;
      for (int x = 0; x < P; ++x) {
        const int sx = ox + x;
        const bool inside = sy >= 0 && sy < l.rgb.h && sx >= 0 && sx < l.rgb.w;
        for (int c = 0; c < 3; ++c) crop.at(y, x, c) = inside ? l.rgb.at(sy, sx, c) : l.fill[c];
      }
    }
    p.images.emplace(s, std::move(crop));
    p.footprints.emplace(s, Footprint{double(ox) * s, double(oy) * s, double(P) * s, double(P) * s});
  }
  const PyramidLevel& ll = img.level(label_scale);
  if (!ll.labels) throw ConfigError("slide '" + img.id + "' has no labels at scale " + std::to_string(label_scale));
  const int ox = crop_origin(cx, label_scale, P), oy = crop_origin(cy, label_scale, P);
  p.label = LabelMap(P, P, 1, 0);
  for (int y = 0; y < P; ++y) {
    const int sy = oy + y;
    if (sy < 0 || sy >= ll.labels->h) continue;
    for (int x = 0; x < P; ++x) {
      const int sx = ox + x;
      if (sx >= 0 && sx < ll.labels->w) p.label.at(y, x) = ll.labels->at(sy, sx);
    }
  }
  p.presence = class_presence(p.label, img.class_count, presence_min_pixels);
  return p;
}

// ---- epoch planning -----------------------------------------------------------

SlideClassIndex index_classes(const PyramidImage& img, int label_scale) {
  const PyramidLevel& l = img.level(label_scale);
  if (!l.labels) throw ConfigError("slide '" + img.id + "' has no labels");
  SlideClassIndex idx;
  idx.slide_id = img.id;
  idx.width = l.labels->w;
  idx.pixels.resize(img.class_count);
  for (std::size_t i = 0; i < l.labels->data.size(); ++i) {
    idx.pixels[l.labels->data[i]].push_back(static_cast<std::uint32_t>(i));
  }
  return idx;
}

std::uint64_t epoch_seed(std::uint64_t base, int epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32),
                    static_cast<std::uint32_t>(epoch), 0x5a17u};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

EpochPlan plan_epoch(const std::vector<SlideClassIndex>& slides, std::uint64_t seed, int patches, int label_scale) {
  if (slides.empty()) throw PlanningError("no slides to plan an epoch over");
  if (patches < 1) throw PlanningError("patches per epoch must be >= 1");
  const int n_cls = static_cast<int>(slides.front().pixels.size());
  for (int c = 0; c < n_cls; ++c) {
    if (std::none_of(slides.begin(), slides.end(), [&](const auto& s) { return s.has(c); })) {
      throw PlanningError("class " + std::to_string(c) + " is absent from all slides");
    }
  }
  std::mt19937_64 rng(seed);
  const int S = static_cast<int>(slides.size());
  // Which slides receive the remainder rotates with the seed.
  std::vector<int> order(S);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<int> per_slide(S, patches / S);
  for (int k = 0; k < patches % S; ++k) ++per_slide[order[k]];

  std::vector<int> global(n_cls, 0);
  std::vector<std::vector<int>> local(S, std::vector<int>(n_cls, 0));
  std::vector<int> remaining = per_slide;
  EpochPlan plan;
  plan.seed = seed;
  plan.directives.reserve(patches);
  // Round-robin over slides so the global tie-break sees a balanced history.
  for (bool any = true; any;) {
    any = false;
    for (int s : order) {
      if (remaining[s] == 0) continue;
      any = true;
      --remaining[s];
      int best = -1;
      for (int c = 0; c < n_cls; ++c) {
        if (!slides[s].has(c)) continue;
        if (best < 0 || local[s][c] < local[s][best] ||
            (local[s][c] == local[s][best] && global[c] < global[best])) {
          best = c;
        }
      }
      ++local[s][best];
      ++global[best];
      const auto& px = slides[s].pixels[best];
      const std::uint32_t flat = px[std::uniform_int_distribution<std::size_t>(0, px.size() - 1)(rng)];
      const int w = slides[s].width;
      plan.directives.push_back(
          {s, double(flat % w) * label_scale, double(flat / w) * label_scale, best});
    }
  }
  std::shuffle(plan.directives.begin(), plan.directives.end(), rng);
  return plan;
}

// ---- augmentation --------------------------------------------------------------

Transform Transform::draw(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Transform t;
  t.rotation = std::uniform_int_distribution<int>(0, 3)(rng);
  t.flip = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
  t.saturation = std::uniform_real_distribution<double>(0.9, 1.1)(rng);
  t.brightness = std::uniform_real_distribution<double>(-0.05, 0.05)(rng);
  return t;
}

template <typename T>
Raster<T> apply_geometry(const Raster<T>& r, const Transform& t) {
  const int k = ((t.rotation % 4) + 4) % 4;
  if (k == 0 && !t.flip) return r;
  const int oh = (k % 2) ? r.w : r.h, ow = (k % 2) ? r.h : r.w;
  Raster<T> out(oh, ow, r.c);
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      const int xf = t.flip ? ow - 1 - x : x;
      int sy, sx;
      switch (k) {
        case 0:
          sy = y, sx = xf;
          break;
        case 1:
          sy = xf, sx = r.w - 1 - y;
          break;
        case 2:
          sy = r.h - 1 - y, sx = r.w - 1 - xf;
          break;
        default:
          sy = r.h - 1 - xf, sx = y;
          break;
      }
      for (int c = 0; c < r.c; ++c) out.at(y, x, c) = r.at(sy, sx, c);
    }
  }
  return out;
}

template Raster<float> apply_geometry(const Raster<float>&, const Transform&);
template Raster<std::uint8_t> apply_geometry(const Raster<std::uint8_t>&, const Transform&);

MultiScalePatch augment(const MultiScalePatch& p, const Transform& t) {
  MultiScalePatch out = p;
  // Value range used for the brightness shift: 0..255 raw, unit sd normalized.
  const double span = p.normalized ? 1.0 : 255.0;
  for (auto& [s, img] : out.images) {
    img = apply_geometry(img, t);
    if (t.saturation == 1.0 && t.brightness == 0.0) continue;
    for (std::size_t i = 0; i < img.pixels(); ++i) {
      float* px = &img.data[3 * i];
      const double gray = (px[0] + px[1] + px[2]) / 3.0;
      for (int c = 0; c < 3; ++c) px[c] = static_cast<float>(gray + t.saturation * (px[c] - gray) + t.brightness * span);
    }
  }
  out.label = apply_geometry(p.label, t);
  return out;
}

MultiScalePatch augment(const MultiScalePatch& p, std::uint64_t seed) { return augment(p, Transform::draw(seed)); }

// ---- validation sub-images -------------------------------------------------------

std::vector<SubImage> ValidationSet::for_slide(const std::string& id) const {
  std::vector<SubImage> out;
  for (const auto& s : items)
    if (s.slide_id == id) out.push_back(s);
  return out;
}

namespace {

// Per-class summed-area tables over the level-0 label map.
struct ClassIntegral {
  int h, w, n_cls;
  std::vector<std::vector<std::uint32_t>> sat;
  explicit ClassIntegral(const LabelMap& l, int classes) : h(l.h), w(l.w), n_cls(classes), sat(classes) {
    for (auto& s : sat) s.assign(static_cast<std::size_t>(h + 1) * (w + 1), 0);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < n_cls; ++c) {
          auto& s = sat[c];
          s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + s[(y + 1) * (w + 1) + x] - s[y * (w + 1) + x] +
                                          (l.at(y, x) == c ? 1u : 0u);
        }
  }
  std::uint32_t count(int c, int y0, int x0, int size) const {
    const auto& s = sat[c];
    const int y1 = y0 + size, x1 = x0 + size;
    return s[y1 * (w + 1) + x1] - s[y0 * (w + 1) + x1] - s[y1 * (w + 1) + x0] + s[y0 * (w + 1) + x0];
  }
};

}  // namespace

ValidationSet make_validation_set(const std::vector<PyramidImage>& slides, int per_slide, int size,
                                  std::uint64_t seed, int align, int max_attempts) {
  if (per_slide < 1) throw PlanningError("per_slide must be >= 1");
  ValidationSet vs;
  vs.size = size;
  std::mt19937_64 rng(seed);
  for (const auto& img : slides) {
    if (size > img.base_h || size > img.base_w) {
      throw PlanningError("sub-image size " + std::to_string(size) + " exceeds slide '" + img.id + "'");
    }
    const auto& labels = img.level(1).labels;
    if (!labels) throw PlanningError("slide '" + img.id + "' has no labels");
    const ClassIntegral integral(*labels, img.class_count);
    std::vector<int> available;
    for (int c = 0; c < img.class_count; ++c)
      if (std::find(labels->data.begin(), labels->data.end(), c) != labels->data.end())
        available.push_back(c);
    const int need = (per_slide + static_cast<int>(available.size()) - 1) / static_cast<int>(available.size());
    if (align < 1) throw PlanningError("align must be >= 1");
    std::uniform_int_distribution<int> ux(0, (img.base_w - size) / align), uy(0, (img.base_h - size) / align);
    bool ok = false;
    std::vector<SubImage> chosen;
    for (int attempt = 0; attempt < max_attempts && !ok; ++attempt) {
      chosen.clear();
      std::vector<int> hits(img.class_count, 0);
      for (int k = 0; k < per_slide; ++k) {
        const SubImage s{img.id, ux(rng) * align, uy(rng) * align};
        for (int c : available) hits[c] += integral.count(c, s.y, s.x, size) > 0;
        chosen.push_back(s);
      }
      ok = std::all_of(available.begin(), available.end(), [&](int c) { return hits[c] >= need; });
    }
    if (!ok) {
      throw PlanningError("class-coverage condition for slide '" + img.id + "' not met after " +
                          std::to_string(max_attempts) + " attempts; try a smaller per_slide or larger size");
    }
    vs.items.insert(vs.items.end(), chosen.begin(), chosen.end());
  }
  return vs;
}

void save_validation_set(const ValidationSet& v, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  out << "# size " << v.size << "\n# slide_id x y\n";
  for (const auto& s : v.items) out << s.slide_id << " " << s.x << " " << s.y << "\n";
  if (!out) throw PyramidIoError("cannot write " + path.string());
}

ValidationSet load_validation_set(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw PyramidIoError("cannot read " + path.string());
  ValidationSet v;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.rfind("# size ", 0) == 0) {
      v.size = std::stoi(line.substr(7));
      continue;
    }
    if (line[0] == '#') continue;
    std::istringstream ss(line);
    SubImage s;
    if (!(ss >> s.slide_id >> s.x >> s.y)) throw PyramidIoError("malformed line in " + path.string() + ": " + line);
    v.items.push_back(s);
  }
  return v;
}

}  // namespace msy
