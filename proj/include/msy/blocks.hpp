#pragma once

#include <string>
#include <vector>

#include "msy/backend/nn.hpp"
#include "msy/backend/tensor_map.hpp"

namespace msy {

// Inputs to a fusion block disagree on spatial size, channels or class count.
class GeometryError : public ContractError {
 public:
  using ContractError::ContractError;
};

// Crop size applied to a context map of spatial size `level_size` before
// upsampling by its scale: level_size * 4/16 for scale 4 and level_size * 8/16
// for scale 16, rounded down with a minimum of 1.
int merge_crop_size(int level_size, int scale);

// Brings a context feature map of scale n onto the grid of the main path:
// central crop, n x n bilinear upsampling and, where the upsampled map is
// larger than the main map, a second central crop to level_size.
template <typename T>
TensorMap<T> align_context(const TensorMap<T>& ctx, int scale, int level_size);

template <typename T>
struct ContextFeature {
  TensorMap<T> map;
  int scale = 1;
};

enum class MergeInit { Random, Identity };

// Multi-scale merge block: aligned context maps are concatenated after the
// main map and reduced back to the main channel count by a 1x1 conv + ReLU.
// With aligned == false the crop/upsample step is skipped (plain concat).
template <typename T>
struct MergeBlock {
  Conv2d<T> conv;
  bool aligned = true;

  int side_count() const { return conv.in_channels() / conv.out_channels() - 1; }
  TensorMap<T> operator()(const TensorMap<T>& main, const std::vector<ContextFeature<T>>& ctxs) const;
};

// 1x1 conv with (m + 1) * channels inputs and `channels` outputs. The bias
// starts at zero; MergeInit::Identity selects the main channels exactly, and
// identity_noise_std > 0 perturbs that identity.
template <typename T>
MergeBlock<T> make_merge_block(ParamStore<T>& store, const std::string& name, int channels, int side_encoders,
                               bool aligned, MergeInit init, Rng& rng, double identity_noise_std = 0.0);

// Context classification gate. Segmentation probabilities are multiplied
// channel-wise by the context class probabilities; the ungated maps are
// leaked alongside and a 1x1 conv (2 * n_cls -> n_cls, no activation)
// combines both halves. Output is in the probability domain.
template <typename T>
struct ContextGate {
  Conv2d<T> leak;

  int class_count() const { return leak.out_channels(); }
  // seg_logits: N x n_cls x H x W; class_logits: N x n_cls x 1 x 1.
  Var<T> operator()(const Var<T>& seg_logits, const Var<T>& class_logits) const;
};

template <typename T>
ContextGate<T> make_context_gate(ParamStore<T>& store, const std::string& name, int class_count, Rng& rng);

// Leak weights that pass the ungated (half = 0) or gated (half = 1) maps through unchanged.
template <typename T>
void select_gate_half(ContextGate<T>& gate, int half);

}  // namespace msy
