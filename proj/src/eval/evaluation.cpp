#include "msy/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>

#include "msy/training.hpp"

namespace msy {

LabelMap argmax_map(const ProbMap& p, std::span<const double> weights, double threshold) {
  if (static_cast<int>(weights.size()) != p.k) throw ContractError("argmax_map: weights length != class count");
  LabelMap out(p.h, p.w, 1, 0);
  for (int y = 0; y < p.h; ++y) {
    for (int x = 0; x < p.w; ++x) {
      int best = -1;
      float best_p = -1.f;
      for (int c = 0; c < p.k; ++c) {
        if (!(weights[c] > 0)) continue;
        if (p.at(c, y, x) > best_p) {
          best_p = p.at(c, y, x);
          best = c;
        }
      }
      out.at(y, x) = (best >= 0 && best_p >= threshold) ? static_cast<std::uint8_t>(best) : 0;
    }
  }
  return out;
}

MetricAccumulator::MetricAccumulator(int class_count) : k_(class_count), inter_(class_count), uni_(class_count) {}

void MetricAccumulator::add(const LabelMap& pred, const LabelMap& gt) {
  if (pred.h != gt.h || pred.w != gt.w) {
    throw ContractError("metric: prediction " + std::to_string(pred.h) + "x" + std::to_string(pred.w) +
                        " differs from ground truth " + std::to_string(gt.h) + "x" + std::to_string(gt.w));
  }
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const int p = pred.data[i], g = gt.data[i];
    if (p >= k_ || g >= k_) throw ContractError("metric: class id out of range");
    if (p == g) {
      ++inter_[p];
      ++uni_[p];
    } else {
      ++uni_[p];
      ++uni_[g];
    }
    if (k_ == 4 && (p > 0 || g > 0)) {
      bach_num_ += std::abs(p - g);
      bach_den_ += std::max(g, std::abs(g - 3));
    }
  }
  ++count_;
}

MetricResult MetricAccumulator::result(std::span<const double> weights) const {
  if (static_cast<int>(weights.size()) != k_) throw ContractError("metric: weights length != class count");
  MetricResult r;
  r.per_class.resize(k_);
  double num = 0, den = 0;
  for (int c = 0; c < k_; ++c) {
    if (!(weights[c] > 0) || uni_[c] == 0) continue;
    r.per_class[c] = static_cast<double>(inter_[c]) / static_cast<double>(uni_[c]);
    num += weights[c] * *r.per_class[c];
    den += weights[c];
  }
  r.weighted = den > 0 ? num / den : std::numeric_limits<double>::quiet_NaN();
  if (k_ == 4) r.bach = bach_den_ > 0 ? 1.0 - bach_num_ / bach_den_ : 1.0;
  r.sub_images = count_;
  return r;
}

MetricResult jaccard(const LabelMap& pred, const LabelMap& gt, std::span<const double> weights) {
  MetricAccumulator acc(static_cast<int>(weights.size()));
  acc.add(pred, gt);
  return acc.result(weights);
}

double bach_metric(const LabelMap& pred, const LabelMap& gt, int class_count) {
  if (class_count != 4) throw UnsupportedError("BACH metric needs exactly 4 ordered classes");
  MetricAccumulator acc(4);
  acc.add(pred, gt);
  return *acc.result(std::vector<double>{0, 1, 1, 1}).bach;
}

std::vector<double> interest_weights(std::span<const double> class_weights, const std::vector<int>& interest) {
  std::vector<double> out(class_weights.size(), 0.0);
  for (int c : interest)
    if (c >= 0 && c < static_cast<int>(out.size())) out[c] = class_weights[c];
  return out;
}

namespace {

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }
std::optional<double> json_opt(const nlohmann::json& j) {
  return j.is_null() ? std::nullopt : std::optional<double>(j.get<double>());
}

}  // namespace

void to_json(nlohmann::json& j, const FoldReport& r) {
  nlohmann::json pc = nlohmann::json::array();
  for (const auto& v : r.per_class) pc.push_back(opt_json(v));
  nlohmann::json regions = nlohmann::json::array();
  for (const auto& s : r.regions) regions.push_back({s.slide_id, s.x, s.y});
  j = {{"arch", r.arch},
       {"fold", r.fold},
       {"n_train", r.n_train},
       {"n_val", r.n_val},
       {"per_class_jaccard", pc},
       {"weighted_jaccard", std::isnan(r.weighted_jaccard) ? nlohmann::json() : nlohmann::json(r.weighted_jaccard)},
       {"bach", opt_json(r.bach)},
       {"loss", opt_json(r.loss)},
       {"sub_images", r.sub_images},
       {"regions", regions}};
}

void from_json(const nlohmann::json& j, FoldReport& r) {
  r.arch = j.at("arch").get<std::string>();
  r.fold = j.at("fold").get<int>();
  r.n_train = j.value("n_train", 0);
  r.n_val = j.value("n_val", 0);
  r.per_class.clear();
  for (const auto& v : j.at("per_class_jaccard")) r.per_class.push_back(json_opt(v));
  const auto& wj = j.at("weighted_jaccard");
  r.weighted_jaccard = wj.is_null() ? std::numeric_limits<double>::quiet_NaN() : wj.get<double>();
  r.bach = json_opt(j.value("bach", nlohmann::json()));
  r.loss = json_opt(j.value("loss", nlohmann::json()));
  r.sub_images = j.value("sub_images", 0);
  r.regions.clear();
  for (const auto& s : j.value("regions", nlohmann::json::array()))
    r.regions.push_back({s.at(0).get<std::string>(), s.at(1).get<int>(), s.at(2).get<int>()});
}

namespace {

struct ModeGuard {
  Model<float>& m;
  bool prev;
  explicit ModeGuard(Model<float>& model) : m(model), prev(model.training()) { m.set_training(false); }
  ~ModeGuard() { m.set_training(prev); }
};

}  // namespace

ProbMap predict_region(Model<float>& model, const PyramidImage& slide, const SubImage& region, int size,
                       const EvalOptions& opts, double* loss_sum, int* loss_tiles) {
  ModeGuard mode(model);
  NoGradGuard no_grad;
  const auto& spec = model.spec();
  const int n = spec.detail_scale;
  const int P = opts.patch_size;
  if (region.x % n != 0 || region.y % n != 0 || size % n != 0) {
    throw ContractError("sub-image origin and size must be multiples of the detail scale " + std::to_string(n));
  }
  const int m = size / n;
  const int ox = region.x / n, oy = region.y / n;
  const int tiles = (m + P - 1) / P;
  const auto scales = spec.required_scales();
  ProbMap out(spec.class_count, m, m);

  struct Tile {
    int ty, tx;
  };
  std::vector<Tile> all;
  for (int ty = 0; ty < tiles; ++ty)
    for (int tx = 0; tx < tiles; ++tx) all.push_back({ty, tx});

  for (std::size_t start = 0; start < all.size(); start += opts.batch_size) {
    const std::size_t stop = std::min(all.size(), start + static_cast<std::size_t>(opts.batch_size));
    std::vector<MultiScalePatch> patches;
    for (std::size_t i = start; i < stop; ++i) {
      const double cx = (ox + all[i].tx * P + P / 2.0) * n;
      const double cy = (oy + all[i].ty * P + P / 2.0) * n;
      // Tiles may hang past the slide edge; those pixels are white fill.
      patches.push_back(extract_patch_unchecked(slide, cx, cy, scales, P, n));
    }
    Batch batch = make_batch(patches, scales, spec.class_count);
    const ModelOutputs<float> o = model.forward(batch.input);
    if (loss_sum) {
      const auto terms = composite_loss(o, batch.target, batch.presence, opts.class_weights,
                                        spec.classification_loss && o.clss.has_value());
      *loss_sum += terms.total.value()[0] * static_cast<double>(stop - start);
      if (loss_tiles) *loss_tiles += static_cast<int>(stop - start);
    }
    const Tensor<float>& seg = o.seg.value();
    for (std::size_t i = start; i < stop; ++i) {
      const int b = static_cast<int>(i - start);
      for (int c = 0; c < spec.class_count; ++c) {
        for (int y = 0; y < P; ++y) {
          const int yy = all[i].ty * P + y;
          if (yy >= m) break;
          for (int x = 0; x < P; ++x) {
            const int xx = all[i].tx * P + x;
            if (xx >= m) break;
            out.at(c, yy, xx) = seg.at(b, c, y, x);
          }
        }
      }
    }
  }
  return out;
}

ProbMap resample_probs(const ProbMap& src, int scale, int size) {
  if (scale == 1) {
    if (src.h != size || src.w != size) throw ContractError("scale-1 maps must already match the region");
    return src;
  }
  if (static_cast<long>(src.h) * scale < size || static_cast<long>(src.w) * scale < size) {
    throw ContractError("resample_probs: scale-" + std::to_string(scale) + " maps of " + std::to_string(src.h) +
                        "x" + std::to_string(src.w) + " leave a coverage gap for region " + std::to_string(size));
  }
  ProbMap out(src.k, size, size);
  std::vector<int> i0(size), i1(size);
  std::vector<float> fr(size);
  for (int t = 0; t < size; ++t) {
    const double u = std::clamp((t + 0.5) / scale - 0.5, 0.0, static_cast<double>(src.h - 1));
    i0[t] = static_cast<int>(std::floor(u));
    i1[t] = std::min(i0[t] + 1, src.h - 1);
    fr[t] = static_cast<float>(u - i0[t]);
  }
  for (int c = 0; c < src.k; ++c) {
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const float top = src.at(c, i0[y], i0[x]) + fr[x] * (src.at(c, i0[y], i1[x]) - src.at(c, i0[y], i0[x]));
        const float bot = src.at(c, i1[y], i0[x]) + fr[x] * (src.at(c, i1[y], i1[x]) - src.at(c, i1[y], i0[x]));
        out.at(c, y, x) = top + fr[y] * (bot - top);
      }
    }
  }
  return out;
}

Predictor model_predictor(Model<float>& model, const EvalOptions& opts) {
  return [&model, opts](const PyramidImage& slide, const SubImage& region, int size) {
    const ProbMap p = predict_region(model, slide, region, size, opts);
    return resample_probs(p, model.spec().detail_scale, size);
  };
}

LabelMap crop_labels(const PyramidImage& slide, const SubImage& region, int size) {
  const auto& labels = slide.level(1).labels;
  if (!labels) throw ConfigError("slide '" + slide.id + "' has no labels");
  if (region.x < 0 || region.y < 0 || region.x + size > labels->w || region.y + size > labels->h) {
    throw ContractError("sub-image outside slide '" + slide.id + "'");
  }
  LabelMap out(size, size, 1);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) out.at(y, x) = labels->at(region.y + y, region.x + x);
  return out;
}

namespace {

FoldReport evaluate_impl(const std::vector<const PyramidImage*>& slides, const ValidationSet& vset,
                         const EvalOptions& opts,
                         const std::function<LabelMap(const PyramidImage&, const SubImage&)>& label) {
  if (slides.empty()) throw ContractError("evaluation needs at least one slide");
  const int k = slides.front()->class_count;
  MetricAccumulator acc(k);
  FoldReport rep;
  for (const PyramidImage* s : slides) {
    for (const auto& region : vset.for_slide(s->id)) {
      acc.add(label(*s, region), crop_labels(*s, region, vset.size));
      rep.regions.push_back(region);
    }
  }
  if (rep.regions.empty()) throw ContractError("validation set has no sub-images for the given slides");
  const MetricResult r = acc.result(interest_weights(opts.class_weights, opts.classes_of_interest));
  rep.per_class = r.per_class;
  rep.weighted_jaccard = r.weighted;
  rep.bach = r.bach;
  rep.sub_images = r.sub_images;
  rep.n_val = static_cast<int>(slides.size());
  return rep;
}

}  // namespace

FoldReport evaluate_predictor(const Predictor& predict, const std::vector<const PyramidImage*>& slides,
                              const ValidationSet& vset, const EvalOptions& opts) {
  return evaluate_impl(slides, vset, opts, [&](const PyramidImage& s, const SubImage& r) {
    return argmax_map(predict(s, r, vset.size), opts.class_weights, opts.threshold);
  });
}

FoldReport evaluate_labeler(const Labeler& label, const std::vector<const PyramidImage*>& slides,
                            const ValidationSet& vset, const EvalOptions& opts) {
  return evaluate_impl(slides, vset, opts,
                       [&](const PyramidImage& s, const SubImage& r) { return label(s, r, vset.size); });
}

FoldReport evaluate_model(Model<float>& model, const std::vector<const PyramidImage*>& slides,
                          const ValidationSet& vset, const EvalOptions& opts) {
  double loss = 0.0;
  int tiles = 0;
  const int n = model.spec().detail_scale;
  FoldReport rep = evaluate_impl(slides, vset, opts, [&](const PyramidImage& s, const SubImage& r) {
    const ProbMap p = predict_region(model, s, r, vset.size, opts, opts.compute_loss ? &loss : nullptr, &tiles);
    return argmax_map(resample_probs(p, n, vset.size), opts.class_weights, opts.threshold);
  });
  if (opts.compute_loss && tiles > 0) rep.loss = loss / tiles;
  rep.arch = model.spec().name;
  return rep;
}

}  // namespace msy
