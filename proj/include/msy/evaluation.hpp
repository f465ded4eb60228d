#pragma once

#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msy/models.hpp"
#include "msy/sampling.hpp"

namespace msy {

class UnsupportedError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Per-class probability maps, class-major (k x h x w).
struct ProbMap {
  int k = 0, h = 0, w = 0;
  std::vector<float> data;

  ProbMap() = default;
  ProbMap(int k_, int h_, int w_, float v = 0.f)
      : k(k_), h(h_), w(w_), data(static_cast<std::size_t>(k_) * h_ * w_, v) {}
  float& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * h + y) * w + x]; }
  float at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * h + y) * w + x]; }
};

// Class map from per-class sigmoid maps: argmax over classes with positive
// weight; pixels whose best probability is below `threshold` become class 0.
LabelMap argmax_map(const ProbMap& p, std::span<const double> weights, double threshold = 0.5);

struct MetricResult {
  std::vector<std::optional<double>> per_class;  // empty when the class has weight 0 or an empty union
  double weighted = 0.0;
  std::optional<double> bach;
  int sub_images = 0;
};

// Accumulates pooled intersection/union counts and the distance penalty.
class MetricAccumulator {
 public:
  explicit MetricAccumulator(int class_count);
  void add(const LabelMap& pred, const LabelMap& gt);
  MetricResult result(std::span<const double> weights) const;
  int class_count() const { return k_; }

 private:
  int k_;
  int count_ = 0;
  std::vector<std::uint64_t> inter_, uni_;
  double bach_num_ = 0, bach_den_ = 0;
};

MetricResult jaccard(const LabelMap& pred, const LabelMap& gt, std::span<const double> weights);

// Distance-penalised accuracy of the BACH challenge (Aresta et al. 2019):
// 1 - sum|pred - gt| / sum max(gt, |gt - 3|) over pixels where pred or gt is
// not background. Defined for the four malignancy-ordered classes only.
double bach_metric(const LabelMap& pred, const LabelMap& gt, int class_count = 4);

// Metric weights: class weights with every class outside `interest` zeroed.
std::vector<double> interest_weights(std::span<const double> class_weights, const std::vector<int>& interest);

struct EvalOptions {
  int patch_size = kDefaultPatchSize;
  int batch_size = 8;
  std::vector<double> class_weights{0, 1, 2, 6};
  std::vector<int> classes_of_interest{2, 3};
  double threshold = 0.5;
  bool compute_loss = true;
};

struct FoldReport {
  std::string arch;
  int fold = 0;
  int n_train = 0;
  int n_val = 0;
  std::vector<std::optional<double>> per_class;
  double weighted_jaccard = 0.0;
  std::optional<double> bach;
  std::optional<double> loss;
  int sub_images = 0;
  std::vector<SubImage> regions;
};

void to_json(nlohmann::json& j, const FoldReport& r);
void from_json(const nlohmann::json& j, FoldReport& r);

// Scale-1 probability maps for a size x size sub-image.
using Predictor = std::function<ProbMap(const PyramidImage&, const SubImage&, int size)>;

// Runs in eval mode and restores the model's mode afterwards.
// Tiles the sub-image into disjoint P-strided detail windows at the model's
// detail scale with co-centred context, and returns the stitched maps at that
// scale. Optionally accumulates the composite loss of each tile.
ProbMap predict_region(Model<float>& model, const PyramidImage& slide, const SubImage& region, int size,
                       const EvalOptions& opts, double* loss_sum = nullptr, int* loss_tiles = nullptr);

// Bilinear (half-pixel) resampling of maps at scale n onto the scale-1 grid of
// a size x size region whose origin is a multiple of n.
ProbMap resample_probs(const ProbMap& src, int scale, int size);

Predictor model_predictor(Model<float>& model, const EvalOptions& opts);

// Class maps for a size x size sub-image, for combiners that are not an argmax.
using Labeler = std::function<LabelMap(const PyramidImage&, const SubImage&, int size)>;

FoldReport evaluate_labeler(const Labeler& label, const std::vector<const PyramidImage*>& slides,
                            const ValidationSet& vset, const EvalOptions& opts);

FoldReport evaluate_predictor(const Predictor& predict, const std::vector<const PyramidImage*>& slides,
                              const ValidationSet& vset, const EvalOptions& opts);

// Model evaluation with the validation loss alongside the metrics.
FoldReport evaluate_model(Model<float>& model, const std::vector<const PyramidImage*>& slides,
                          const ValidationSet& vset, const EvalOptions& opts);

LabelMap crop_labels(const PyramidImage& slide, const SubImage& region, int size);

}  // namespace msy
