#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msy/evaluation.hpp"
#include "msy/models.hpp"
#include "msy/sampling.hpp"

namespace msy {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double lr = 1e-3;
  double gamma = 0.5;
  int decay_every = 30;
  int epochs_min = 1;
  int epochs_max = 120;
  int patches_per_epoch = kPatchesPerEpoch;
  int batch_size = 8;
  int patch_size = kDefaultPatchSize;
  std::vector<double> class_weights{0, 1, 2, 6};
  std::vector<int> classes_of_interest{2, 3};
  std::uint64_t seed = 0;
  std::vector<int> validation_epochs{1, 3, 5, 8, 11, 16, 21};
  int validation_every = 10;  // after the explicit list
  int patience = 3;           // validation points without improvement
  bool augment = true;
  int queue_capacity = 4;
  int presence_min_pixels = 1;
  int freeze_epochs = 0;  // leading epochs with only the output layers trainable
  bool save_checkpoints = true;

  void validate(int class_count) const;
  double lr_at(int epoch) const;  // epochs are 1-based
  bool is_validation_epoch(int epoch) const;
  EvalOptions eval_options() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct Batch {
  ModelInput<float> input;
  Tensor<float> target;    // N x K x P x P one-hot
  Tensor<float> presence;  // N x K x 1 x 1
  std::vector<int> ids;    // directive indices, for diagnostics
};

// Raw 0..255 pixels are mapped to [-1, 1]; normalized pyramids pass through.
Tensor<float> images_to_tensor(const std::vector<const RgbImage*>& images, bool normalized);
Batch make_batch(const std::vector<MultiScalePatch>& patches, const std::vector<int>& scales, int class_count);

template <typename T>
struct LossTerms {
  Var<T> total;
  Var<T> seg;
  std::optional<Var<T>> clss;
};

// seg: class-weighted BCE normalised by the weight sum; clss (when enabled and
// the model has a class output): BCE against the presence vector; total = sum.
template <typename T>
LossTerms<T> composite_loss(const ModelOutputs<T>& out, const Tensor<T>& target, const Tensor<T>& presence,
                            std::span<const double> weights, bool use_class_loss, double eps = 1e-7);

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::uint64_t plan_seed = 0;
  std::optional<double> val_loss;
  std::optional<double> val_weighted_jaccard;
  bool frozen = false;
};

struct RunManifest {
  std::string config_hash;
  nlohmann::json config;
  ArchitectureSpec spec;
  std::string validation_set;
  std::vector<std::string> train_slides, val_slides;
  std::vector<EpochRecord> trajectory;
  std::string best_checkpoint;
  std::string last_checkpoint;
  int best_epoch = 0;
  double best_val_loss = 0.0;
  std::string status = "running";
};

void to_json(nlohmann::json& j, const EpochRecord& r);
void to_json(nlohmann::json& j, const RunManifest& m);

std::string hash_json(const nlohmann::json& j);

struct TrainData {
  std::vector<const PyramidImage*> train;
  std::vector<const PyramidImage*> val;
  const ValidationSet* validation = nullptr;
  std::string validation_file;
};

// Optional per-epoch callback, e.g. for progress logging.
using EpochHook = std::function<void(const EpochRecord&)>;

// Trains in place; with an output directory, writes manifest.json,
// trajectory.jsonl and best/last checkpoints there. On return the model holds
// the best-validation weights when validation ran.
RunManifest train(Model<float>& model, const TrainData& data, const TrainConfig& cfg,
                  const std::filesystem::path& out_dir = {}, const EpochHook& hook = {});

// Replaces the output layers for `new_class_count`, trains only them for
// `frozen_epochs`, then everything.
RunManifest finetune(Model<float>& model, int new_class_count, const TrainData& data, TrainConfig cfg,
                     int frozen_epochs = 10, const std::filesystem::path& out_dir = {}, const EpochHook& hook = {});

// Produces the batches of one epoch on a worker thread through a bounded queue.
void for_each_batch(const std::vector<const PyramidImage*>& slides, const EpochPlan& plan,
                    const std::vector<int>& scales, int label_scale, const TrainConfig& cfg, int class_count,
                    const std::function<void(Batch&)>& consume);

}  // namespace msy
