#include "msy/blocks.hpp"

namespace msy {

int merge_crop_size(int level_size, int scale) {
  int keep16;
  switch (scale) {
    case 4:
      keep16 = 4;
      break;
    case 16:
      keep16 = 8;
      break;
    default:
      throw GeometryError("merge block supports context scales 4 and 16, got " + std::to_string(scale));
  }
  return std::max(1, level_size * keep16 / 16);
}

template <typename T>
TensorMap<T> align_context(const TensorMap<T>& ctx, int scale, int level_size) {
  if (ctx.height() != level_size || ctx.width() != level_size) {
    throw GeometryError("context map " + std::to_string(ctx.height()) + "x" + std::to_string(ctx.width()) +
                        " does not match level size " + std::to_string(level_size));
  }
  const int c = merge_crop_size(level_size, scale);
  if (c * scale < level_size) {
    throw GeometryError("context crop " + std::to_string(c) + " upsampled by " + std::to_string(scale) +
                        " cannot cover level size " + std::to_string(level_size));
  }
  return upsample_center_crop(center_crop(ctx, c, c), scale, level_size, level_size);
}

template <typename T>
TensorMap<T> MergeBlock<T>::operator()(const TensorMap<T>& main, const std::vector<ContextFeature<T>>& ctxs) const {
  if (static_cast<int>(ctxs.size()) != side_count()) {
    throw GeometryError("merge block built for " + std::to_string(side_count()) + " side encoders, got " +
                        std::to_string(ctxs.size()));
  }
  const int s = main.height();
  std::vector<Var<T>> parts{main.data};
  for (const auto& ctx : ctxs) {
    if (ctx.map.channels() != main.channels() || ctx.map.data.shape().n != main.data.shape().n) {
      throw GeometryError("context map " + ctx.map.data.shape().str() + " incompatible with main " +
                          main.data.shape().str());
    }
    if (ctx.map.height() != s || ctx.map.width() != main.width()) {
      throw GeometryError("context map " + ctx.map.data.shape().str() + " differs spatially from main " +
                          main.data.shape().str());
    }
    parts.push_back(aligned ? align_context(ctx.map, ctx.scale, s).data : ctx.map.data);
  }
  Var<T> merged = parts.size() == 1 ? parts.front() : ops::concat_channels(parts);
  return {ops::relu(conv(merged)), main.footprints};
}

template <typename T>
MergeBlock<T> make_merge_block(ParamStore<T>& store, const std::string& name, int channels, int side_encoders,
                               bool aligned, MergeInit init, Rng& rng, double identity_noise_std) {
  MergeBlock<T> block;
  block.aligned = aligned;
  block.conv = make_conv(store, name, channels * (side_encoders + 1), channels, 1, 1, 0, true, rng);
  block.conv.bias->value().zero();
  if (init == MergeInit::Identity) init_identity(block.conv, identity_noise_std, rng);
  return block;
}

template <typename T>
Var<T> ContextGate<T>::operator()(const Var<T>& seg_logits, const Var<T>& class_logits) const {
  const Shape s = seg_logits.shape(), c = class_logits.shape();
  if (s.c != class_count() || c.c != class_count() || c.n != s.n || c.h != 1 || c.w != 1) {
    throw GeometryError("context gate for " + std::to_string(class_count()) + " classes got seg " + s.str() +
                        " and class " + c.str());
  }
  Var<T> probs = ops::sigmoid(seg_logits);
  Var<T> gated = ops::channel_multiply(probs, ops::sigmoid(class_logits));
  return leak(ops::concat_channels<T>({probs, gated}));
}

template <typename T>
ContextGate<T> make_context_gate(ParamStore<T>& store, const std::string& name, int class_count, Rng& rng) {
  return {make_conv(store, name, 2 * class_count, class_count, 1, 1, 0, true, rng)};
}

template <typename T>
void select_gate_half(ContextGate<T>& gate, int half) {
  const int n = gate.class_count();
  Tensor<T>& w = gate.leak.weight.value();
  w.zero();
  for (int o = 0; o < n; ++o) w.at(o, half * n + o, 0, 0) = T(1);
  if (gate.leak.bias) gate.leak.bias->value().zero();
}

#define MSY_INSTANTIATE_BLOCKS(T)                                                                           \
  template TensorMap<T> align_context(const TensorMap<T>&, int, int);                                        \
  template struct MergeBlock<T>;                                                                            \
  template MergeBlock<T> make_merge_block(ParamStore<T>&, const std::string&, int, int, bool, MergeInit, Rng&, \
                                          double);                                                          \
  template struct ContextGate<T>;                                                                           \
  template ContextGate<T> make_context_gate(ParamStore<T>&, const std::string&, int, Rng&);                  \
  template void select_gate_half(ContextGate<T>&, int);

MSY_INSTANTIATE_BLOCKS(float)
MSY_INSTANTIATE_BLOCKS(double)

}  // namespace msy
