#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msy/ensembles.hpp"
#include "msy/evaluation.hpp"
#include "msy/stats.hpp"
#include "msy/training.hpp"

namespace msy {

struct DatasetConfig {
  std::string path;                      // pyramid dataset root, or
  std::optional<SynthParams> synthetic;  // generated in memory
  int synthetic_slides = 8;
  std::uint64_t synthetic_seed = 100;
};

struct EvalConfig {
  int sub_image_size = 3072;
  int per_slide = 3;
  std::uint64_t seed = 7;
  double threshold = 0.5;
};

struct EnsembleConfig {
  std::string name;
  std::map<int, std::string> members;  // scale -> architecture name in the run
  Combiner combiner = Combiner::Average;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 1;
  DatasetConfig dataset;
  int folds = 5;
  std::vector<std::vector<std::string>> fold_slides;  // explicit validation folds (optional)
  std::vector<std::string> architectures{"unet", "msY16"};
  double width = 1.0;
  std::string baseline = "unet";
  double alpha = 0.05;
  TrainConfig train;
  EvalConfig eval;
  std::vector<EnsembleConfig> ensembles;
  int finetune_frozen_epochs = 10;
  std::filesystem::path out_dir = "runs/experiment";

  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);
ExperimentConfig load_experiment(const std::filesystem::path& path);

std::vector<PyramidImage> load_slides(const DatasetConfig& d);

// Validation folds (slide ids) partitioning the slides; a seeded shuffle is
// redrawn until every class occurs in every validation fold.
std::vector<std::vector<std::string>> make_folds(const std::vector<PyramidImage>& slides, int k,
                                                 std::uint64_t seed, int max_attempts = 1000);

struct SummaryRow {
  std::string name;
  std::optional<double> params_m;
  std::vector<double> scores;  // weighted Jaccard per fold
  Interval ci;
  std::optional<TTest> test;  // vs baseline
  bool tie = false;
  bool rejected = false;
};

struct CvSummary {
  std::string baseline;
  double n_train = 0, n_val = 0, alpha = 0.05;
  std::vector<SummaryRow> rows;

  const SummaryRow& row(const std::string& name) const;
  std::string text() const;
  std::string csv() const;
};

void to_json(nlohmann::json& j, const CvSummary& s);

// Table from persisted fold reports: t-interval per row, one-sided corrected
// t-test against the baseline and Benjamini-Hochberg over those tests.
CvSummary summarize(const std::map<std::string, std::vector<FoldReport>>& reports, const std::string& baseline,
                    double n_train, double n_val, double alpha = 0.05,
                    const std::map<std::string, double>& params_m = {});

struct CvResult {
  CvSummary summary;
  std::map<std::string, std::vector<FoldReport>> reports;
  std::vector<std::vector<std::string>> folds;
  double seconds = 0;  // wall time of the work done in this call
};

// Trains and evaluates every architecture on every fold, then the configured
// ensembles. Completed folds with a matching run hash are reused.
CvResult run_cv(const ExperimentConfig& cfg, std::ostream* log = nullptr);

// One architecture on one fold, written to <out_dir>/<arch>/fold_<i>.
FoldReport run_fold(const ExperimentConfig& cfg, const std::string& arch, int fold, std::ostream* log = nullptr);

// Fine-tunes the fold-i checkpoints of `source_run` on fold i of this
// experiment's dataset.
CvResult run_finetune_cv(const ExperimentConfig& cfg, const std::filesystem::path& source_run,
                         std::ostream* log = nullptr);

void write_fold_scores_csv(const std::filesystem::path& path, const std::vector<FoldReport>& reports);
// A fold listed more than once is an error unless `average_repeats` is set.
std::vector<double> read_fold_scores_csv(const std::filesystem::path& path, bool average_repeats = false);

}  // namespace msy
