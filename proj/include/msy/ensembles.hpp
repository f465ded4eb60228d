#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msy/evaluation.hpp"

namespace msy {

class EnsembleStateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class Combiner { Average, Majority, Logistic };

std::string to_string(Combiner c);
Combiner parse_combiner(const std::string& s);

// Per-class logistic model on member logits:
// p_c = sigmoid(bias_c + sum_m w_cm * logit(p_mc)).
struct LogisticModel {
  int members = 0;
  std::vector<std::vector<double>> weights;  // class -> member weights
  std::vector<double> bias;
  bool fitted() const { return !bias.empty(); }
};

void to_json(nlohmann::json& j, const LogisticModel& m);
void from_json(const nlohmann::json& j, LogisticModel& m);

struct EnsembleSpec {
  std::map<int, std::string> members;  // scale -> checkpoint
  Combiner combiner = Combiner::Average;
  std::optional<LogisticModel> logistic;

  void validate() const;
};

void to_json(nlohmann::json& j, const EnsembleSpec& s);
void from_json(const nlohmann::json& j, EnsembleSpec& s);

struct Combined {
  LabelMap labels;
  ProbMap probs;
};

// All member maps share one shape. `weights` selects the classes eligible in
// the argmax (positive weight); `threshold` is the background rule of
// argmax_map.
Combined combine(const std::vector<ProbMap>& members, Combiner combiner, std::span<const double> weights,
                 double threshold = 0.5, const LogisticModel* logistic = nullptr);

// One training region: the members' scale-1 maps and its ground truth.
struct LogisticSample {
  std::vector<ProbMap> members;
  LabelMap gt;
};

// Newton fit per class on up to `max_pixels` pixels, half positives and half
// negatives where available.
LogisticModel fit_logistic(const std::vector<LogisticSample>& samples, int max_pixels = 100000,
                           std::uint64_t seed = 0, double l2 = 1e-6);

// Per-scale members and their combiner.
class Ensemble {
 public:
  Ensemble(std::vector<std::unique_ptr<Model<float>>> members, Combiner combiner, EvalOptions opts);
  static Ensemble load(const EnsembleSpec& spec, const EvalOptions& opts);

  std::vector<ProbMap> member_maps(const PyramidImage& slide, const SubImage& region, int size);
  Combined predict(const PyramidImage& slide, const SubImage& region, int size);
  Labeler labeler();

  void set_logistic(LogisticModel m) { logistic_ = std::move(m); }
  const std::optional<LogisticModel>& logistic() const { return logistic_; }
  void fit(const std::vector<const PyramidImage*>& slides, const ValidationSet& vset, int max_pixels = 100000,
           std::uint64_t seed = 0);
  std::size_t size() const { return members_.size(); }
  Model<float>& member(std::size_t i) { return *members_.at(i); }

 private:
  std::vector<std::unique_ptr<Model<float>>> members_;
  Combiner combiner_;
  EvalOptions opts_;
  std::optional<LogisticModel> logistic_;
};

}  // namespace msy
