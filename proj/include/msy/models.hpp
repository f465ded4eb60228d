#pragma once

#include <map>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msy/blocks.hpp"

namespace msy {

class SpecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Topology { ResNet18, ResNet34 };
enum class Terminal { Merge, Classifier };
enum class Alignment { Aligned, NonalignedRandom, NonalignedIdentity };

struct ContextEncoderSpec {
  int scale = 16;
  Topology topology = Topology::ResNet18;
  Terminal terminal = Terminal::Merge;
  bool operator==(const ContextEncoderSpec&) const = default;
};

struct ArchitectureSpec {
  std::string name = "unet";
  int class_count = 4;
  // Channel multiplier on the ResNet widths 64/64/128/256/512 and the decoder.
  double width = 1.0;
  // Scale of the image the segmenting (detail) encoder consumes. 1 for every
  // family member; per-scale ensemble members use 4 or 16.
  int detail_scale = 1;
  Topology detail_topology = Topology::ResNet18;
  std::vector<ContextEncoderSpec> context_encoders;
  // Encoder levels (1..5, 5 = bottleneck) carrying a merge block.
  std::set<int> merge_levels{5};
  bool use_gate = false;
  bool classification_loss = false;
  Alignment alignment = Alignment::Aligned;
  MergeInit merge_init = MergeInit::Random;
  double identity_noise_std = 1e-4;
  std::string pretrained;  // optional checkpoint with encoder.* weights

  int channels(int base) const;
  std::vector<int> required_scales() const;
  bool has_merge_encoders() const;
  bool has_classifier_encoder() const;
  bool has_class_output() const { return has_classifier_encoder() || classification_loss; }
  // Throws SpecError naming the first violated invariant.
  void validate() const;
  bool operator==(const ArchitectureSpec&) const = default;
};

void to_json(nlohmann::json& j, const ArchitectureSpec& s);
void from_json(const nlohmann::json& j, ArchitectureSpec& s);

// Named family members: unet, msY4, msY16, msUI4, msUI16, msYI, msY2,
// msY2-nonaligned-random, msY2-nonaligned-identity, and a "-multi" suffix on
// any of msY4/msY16/msYI/msY2 for merge blocks at every encoder level.
ArchitectureSpec preset(const std::string& name, int class_count = 4, double width = 1.0);

template <typename T>
struct BasicBlock {
  Conv2d<T> conv1, conv2;
  BatchNorm2d<T> bn1, bn2;
  std::optional<Conv2d<T>> down;
  std::optional<BatchNorm2d<T>> down_bn;

  Var<T> operator()(const Var<T>& x, bool training) const;
};

// ResNet-18/34 convolutional body (no fully connected layer). Levels 1..5
// have strides 2, 4, 8, 16, 32 and widths 64, 64, 128, 256, 512 (times the
// width multiplier).
template <typename T>
class ResNetEncoder {
 public:
  ResNetEncoder() = default;
  ResNetEncoder(ParamStore<T>& store, const std::string& name, Topology topology, double width, Rng& rng);

  Var<T> stage(int level, const Var<T>& x, bool training) const;
  int level_channels(int level) const { return channels_.at(level - 1); }

 private:
  Conv2d<T> stem_;
  BatchNorm2d<T> stem_bn_;
  std::vector<std::vector<BasicBlock<T>>> layers_;
  std::vector<int> channels_;
};

template <typename T>
struct ModelInput {
  // N x 3 x P x P image batch per scale.
  std::map<int, Tensor<T>> images;
  // Optional per-item slide footprints per scale. Missing scales default to
  // windows of P * scale pixels co-centred on the origin.
  std::map<int, std::vector<Footprint>> footprints;
};

template <typename T>
struct ModelOutputs {
  Var<T> seg;                  // N x n_cls x P x P probabilities
  std::optional<Var<T>> clss;  // N x n_cls x 1 x 1 probabilities
  // Decoder skip tensors (levels 0..4, level 0 being the full-resolution
  // branch), exposed for provenance checks.
  std::vector<Var<T>> skips;
  // Main-path and aligned-context footprints of the bottleneck merge.
  std::vector<Footprint> bottleneck_footprints;
};

template <typename T>
class Model {
 public:
  explicit Model(ArchitectureSpec spec, std::uint64_t seed = 0);

  const ArchitectureSpec& spec() const { return spec_; }
  ParamStore<T>& store() { return store_; }
  const ParamStore<T>& store() const { return store_; }
  std::size_t parameter_count() const { return store_.parameter_count(); }

  void set_training(bool on) { training_ = on; }
  bool training() const { return training_; }

  ModelOutputs<T> forward(const ModelInput<T>& input) const;

  MergeBlock<T>& merge_block(int level) { return merges_.at(level); }
  ContextGate<T>* gate() { return gate_ ? &*gate_ : nullptr; }
  const std::vector<std::string>& output_layer_prefixes() const { return output_prefixes_; }

  // Re-creates the output layers (final 1x1 conv, classifier FC, gate leak)
  // for a new class count; all other weights are kept.
  void replace_output_layers(int class_count, std::uint64_t seed);
  // Marks every parameter outside the output layers as (non-)trainable.
  void freeze_body(bool frozen);

 private:
  void build_heads(Rng& rng);

  ArchitectureSpec spec_;
  ParamStore<T> store_;
  bool training_ = true;

  ResNetEncoder<T> detail_;
  std::vector<ResNetEncoder<T>> contexts_;
  std::map<int, MergeBlock<T>> merges_;  // level -> block (level 5 always present)
  std::vector<Conv2d<T>> adapters_;      // 1x1 skip adapters, levels 1..4
  Conv2d<T> up3_, up2_, up1_, up0_, orig0_, orig1_, orig2_;
  Conv2d<T> seg_head_;
  std::optional<Linear<T>> cls_head_;
  std::optional<ContextGate<T>> gate_;
  int cls_source_ = -1;  // index into contexts_ feeding the class head
  std::vector<std::string> output_prefixes_;
};

template <typename T>
std::unique_ptr<Model<T>> build(const ArchitectureSpec& spec, std::uint64_t seed = 0);

// msY2-shaped spec with the bottleneck merge replaced by a plain concat + 1x1
// conv. identity_noise: identity on main channels, zero elsewhere, plus
// N(0, noise_std) on all weights.
template <typename T>
std::unique_ptr<Model<T>> build_nonaligned_variant(ArchitectureSpec spec, Alignment init, std::uint64_t seed = 0,
                                                   double noise_std = 1e-4);

// Adds a merge block after every encoder stage of the detail path.
template <typename T>
std::unique_ptr<Model<T>> build_multimerge_variant(ArchitectureSpec spec, std::uint64_t seed = 0);

}  // namespace msy
