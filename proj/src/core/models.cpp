#include "msy/models.hpp"

#include <algorithm>
#include <cmath>

#include "msy/checkpoint.hpp"

namespace msy {

namespace {

const char* topology_name(Topology t) { return t == Topology::ResNet18 ? "resnet18" : "resnet34"; }
Topology parse_topology(const std::string& s) {
  if (s == "resnet18") return Topology::ResNet18;
  if (s == "resnet34") return Topology::ResNet34;
  throw SpecError("unknown encoder topology '" + s + "'");
}
const char* alignment_name(Alignment a) {
  switch (a) {
    case Alignment::Aligned:
      return "aligned";
    case Alignment::NonalignedRandom:
      return "nonaligned_random";
    case Alignment::NonalignedIdentity:
      return "nonaligned_identity";
  }
  return "aligned";
}
Alignment parse_alignment(const std::string& s) {
  if (s == "aligned") return Alignment::Aligned;
  if (s == "nonaligned_random") return Alignment::NonalignedRandom;
  if (s == "nonaligned_identity") return Alignment::NonalignedIdentity;
  throw SpecError("unknown alignment mode '" + s + "'");
}

std::vector<int> block_counts(Topology t) {
  return t == Topology::ResNet18 ? std::vector<int>{2, 2, 2, 2} : std::vector<int>{3, 4, 6, 3};
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

int ArchitectureSpec::channels(int base) const {
  return std::max(1, static_cast<int>(std::lround(base * width)));
}

std::vector<int> ArchitectureSpec::required_scales() const {
  std::set<int> s{detail_scale};
  for (const auto& c : context_encoders) s.insert(c.scale);
  return {s.begin(), s.end()};
}

bool ArchitectureSpec::has_merge_encoders() const {
  return std::any_of(context_encoders.begin(), context_encoders.end(),
                     [](const auto& c) { return c.terminal == Terminal::Merge; });
}

bool ArchitectureSpec::has_classifier_encoder() const {
  return std::any_of(context_encoders.begin(), context_encoders.end(),
                     [](const auto& c) { return c.terminal == Terminal::Classifier; });
}

void ArchitectureSpec::validate() const {
  auto fail = [&](const std::string& what) { throw SpecError("architecture '" + name + "': " + what); };
  if (class_count < 2) fail("class_count must be >= 2");
  if (!(width > 0.0)) fail("width must be positive");
  if (detail_scale != 1 && detail_scale != 4 && detail_scale != 16) fail("detail_scale must be 1, 4 or 16");
  if (merge_levels.empty() || !merge_levels.count(5)) fail("merge_levels must contain the bottleneck level 5");
  for (int l : merge_levels)
    if (l < 1 || l > 5) fail("merge level " + std::to_string(l) + " outside 1..5");
  int classifiers = 0;
  for (const auto& c : context_encoders) {
    if (c.scale < 1) fail("context scale must be >= 1");
    if (c.terminal == Terminal::Classifier) ++classifiers;
    if (c.terminal == Terminal::Merge && alignment == Alignment::Aligned && c.scale != 4 && c.scale != 16) {
      fail("aligned merge encoders need scale 4 or 16, got " + std::to_string(c.scale));
    }
    if (c.scale == detail_scale) fail("context encoder duplicates the detail scale");
  }
  if (classifiers > 1) fail("at most one classifier-terminal encoder is supported");
  if (use_gate != (classifiers == 1)) fail("use_gate requires exactly one classifier-terminal encoder and vice versa");
  if (classification_loss && context_encoders.empty()) fail("classification_loss needs a context encoder");
  if (alignment != Alignment::Aligned) {
    if (!has_merge_encoders()) fail("non-aligned merging needs merge-terminal encoders");
    if (merge_levels.size() != 1) fail("non-aligned merging is defined at the bottleneck only");
  }
  if (merge_levels.size() > 1 && !has_merge_encoders()) fail("multiple merge levels need merge-terminal encoders");
}

void to_json(nlohmann::json& j, const ArchitectureSpec& s) {
  nlohmann::json ctx = nlohmann::json::array();
  for (const auto& c : s.context_encoders) {
    ctx.push_back({{"scale", c.scale},
                   {"topology", topology_name(c.topology)},
                   {"terminal", c.terminal == Terminal::Merge ? "merge" : "classifier"}});
  }
  j = {{"name", s.name},
       {"class_count", s.class_count},
       {"width", s.width},
       {"detail_scale", s.detail_scale},
       {"detail_topology", topology_name(s.detail_topology)},
       {"context_encoders", ctx},
       {"merge_levels", std::vector<int>(s.merge_levels.begin(), s.merge_levels.end())},
       {"use_gate", s.use_gate},
       {"classification_loss", s.classification_loss},
       {"alignment_mode", alignment_name(s.alignment)},
       {"merge_init", s.merge_init == MergeInit::Identity ? "identity" : "random"},
       {"identity_noise_std", s.identity_noise_std},
       {"pretrained", s.pretrained}};
}

void from_json(const nlohmann::json& j, ArchitectureSpec& s) {
  ArchitectureSpec d;
  if (j.contains("preset")) {
    d = preset(j.at("preset").get<std::string>(), j.value("class_count", 4), j.value("width", 1.0));
  }
  s = d;
  s.name = j.value("name", d.name);
  s.class_count = j.value("class_count", d.class_count);
  s.width = j.value("width", d.width);
  s.detail_scale = j.value("detail_scale", d.detail_scale);
  if (j.contains("detail_topology")) s.detail_topology = parse_topology(j.at("detail_topology"));
  if (j.contains("context_encoders")) {
    s.context_encoders.clear();
    for (const auto& c : j.at("context_encoders")) {
      ContextEncoderSpec e;
      e.scale = c.at("scale").get<int>();
      e.topology = parse_topology(c.value("topology", std::string("resnet18")));
      const auto term = c.value("terminal", std::string("merge"));
      if (term != "merge" && term != "classifier") throw SpecError("unknown terminal '" + term + "'");
      e.terminal = term == "merge" ? Terminal::Merge : Terminal::Classifier;
      s.context_encoders.push_back(e);
    }
  }
  if (j.contains("merge_levels")) {
    const auto levels = j.at("merge_levels").get<std::vector<int>>();
    s.merge_levels = {levels.begin(), levels.end()};
  }
  s.use_gate = j.value("use_gate", d.use_gate);
  s.classification_loss = j.value("classification_loss", d.classification_loss);
  if (j.contains("alignment_mode")) s.alignment = parse_alignment(j.at("alignment_mode"));
  if (j.contains("merge_init")) {
    const auto m = j.at("merge_init").get<std::string>();
    if (m != "random" && m != "identity") throw SpecError("unknown merge_init '" + m + "'");
    s.merge_init = m == "identity" ? MergeInit::Identity : MergeInit::Random;
  }
  s.identity_noise_std = j.value("identity_noise_std", d.identity_noise_std);
  s.pretrained = j.value("pretrained", d.pretrained);
}

ArchitectureSpec preset(const std::string& full_name, int class_count, double width) {
  ArchitectureSpec s;
  s.name = full_name;
  s.class_count = class_count;
  s.width = width;
  std::string base = full_name;
  bool multi = false, nocls = false;
  if (ends_with(base, "-nocls")) {
    nocls = true;
    base.resize(base.size() - 6);
  }
  if (ends_with(base, "-multi")) {
    multi = true;
    base.resize(base.size() - 6);
  }
  const ContextEncoderSpec m4{4, Topology::ResNet18, Terminal::Merge};
  const ContextEncoderSpec m16{16, Topology::ResNet18, Terminal::Merge};
  if (base == "unet") {
  } else if (base == "unet4" || base == "unet16") {
    s.detail_scale = base == "unet4" ? 4 : 16;
  } else if (base == "msY4") {
    s.context_encoders = {m4};
  } else if (base == "msY16") {
    s.context_encoders = {m16};
    s.classification_loss = true;
  } else if (base == "msUI4" || base == "msUI16") {
    s.context_encoders = {{base == "msUI4" ? 4 : 16, Topology::ResNet18, Terminal::Classifier}};
    s.use_gate = true;
    s.classification_loss = true;
  } else if (base == "msYI") {
    s.context_encoders = {m4, {16, Topology::ResNet18, Terminal::Classifier}};
    s.use_gate = true;
    s.classification_loss = true;
  } else if (base == "msY2" || base == "msY2-res34" || base == "msY2-nonaligned-random" ||
             base == "msY2-nonaligned-identity") {
    s.context_encoders = {m4, m16};
    if (base == "msY2-res34") s.context_encoders[1].topology = Topology::ResNet34;
    s.classification_loss = true;
    if (base == "msY2-nonaligned-random") s.alignment = Alignment::NonalignedRandom;
    if (base == "msY2-nonaligned-identity") s.alignment = Alignment::NonalignedIdentity;
  } else {
    throw SpecError("unknown architecture preset '" + full_name + "'");
  }
  if (multi) s.merge_levels = {1, 2, 3, 4, 5};
  if (nocls) s.classification_loss = false;
  s.validate();
  return s;
}

template <typename T>
Var<T> BasicBlock<T>::operator()(const Var<T>& x, bool training) const {
  Var<T> h = ops::relu(bn1(conv1(x), training));
  h = bn2(conv2(h), training);
  Var<T> shortcut = down ? (*down_bn)((*down)(x), training) : x;
  return ops::relu(ops::add(h, shortcut));
}

template <typename T>
ResNetEncoder<T>::ResNetEncoder(ParamStore<T>& store, const std::string& name, Topology topology, double width,
                                Rng& rng) {
  auto ch = [width](int base) { return std::max(1, static_cast<int>(std::lround(base * width))); };
  channels_ = {ch(64), ch(64), ch(128), ch(256), ch(512)};
  stem_ = make_conv(store, name + ".conv1", 3, channels_[0], 7, 2, 3, false, rng);
  stem_bn_ = make_batch_norm(store, name + ".bn1", channels_[0]);
  const auto counts = block_counts(topology);
  int in = channels_[0];
  for (int layer = 0; layer < 4; ++layer) {
    const int out = channels_[layer + 1];
    std::vector<BasicBlock<T>> blocks;
    for (int b = 0; b < counts[layer]; ++b) {
      const std::string p = name + ".layer" + std::to_string(layer + 1) + "." + std::to_string(b);
      const int stride = (b == 0 && layer > 0) ? 2 : 1;
      BasicBlock<T> blk;
      blk.conv1 = make_conv(store, p + ".conv1", in, out, 3, stride, 1, false, rng);
      blk.bn1 = make_batch_norm(store, p + ".bn1", out);
      blk.conv2 = make_conv(store, p + ".conv2", out, out, 3, 1, 1, false, rng);
      blk.bn2 = make_batch_norm(store, p + ".bn2", out);
      if (stride != 1 || in != out) {
        blk.down = make_conv(store, p + ".downsample.0", in, out, 1, stride, 0, false, rng);
        blk.down_bn = make_batch_norm(store, p + ".downsample.1", out);
      }
      blocks.push_back(std::move(blk));
      in = out;
    }
    layers_.push_back(std::move(blocks));
  }
}

template <typename T>
Var<T> ResNetEncoder<T>::stage(int level, const Var<T>& x, bool training) const {
  if (level == 1) return ops::relu(stem_bn_(stem_(x), training));
  if (level < 1 || level > 5) throw ContractError("encoder level must be in 1..5");
  Var<T> h = level == 2 ? ops::max_pool2d(x, 3, 2, 1) : x;
  for (const auto& blk : layers_[level - 2]) h = blk(h, training);
  return h;
}

template <typename T>
Model<T>::Model(ArchitectureSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  spec_.validate();
  Rng rng(seed);
  const auto& s = spec_;
  detail_ = ResNetEncoder<T>(store_, "detail", s.detail_topology, s.width, rng);
  int merge_sides = 0;
  for (std::size_t i = 0; i < s.context_encoders.size(); ++i) {
    const auto& c = s.context_encoders[i];
    contexts_.emplace_back(store_, "ctx" + std::to_string(i), c.topology, s.width, rng);
    if (c.terminal == Terminal::Merge) ++merge_sides;
  }

  const bool aligned = s.alignment == Alignment::Aligned;
  const MergeInit init =
      (s.alignment == Alignment::NonalignedIdentity || s.merge_init == MergeInit::Identity) ? MergeInit::Identity
                                                                                            : MergeInit::Random;
  const double noise = s.alignment == Alignment::NonalignedIdentity ? s.identity_noise_std : 0.0;
  for (int level = 1; level <= 4; ++level) {
    adapters_.push_back(make_conv(store_, "dec.adapt" + std::to_string(level), detail_.level_channels(level),
                                  detail_.level_channels(level), 1, 1, 0, true, rng));
  }
  for (int level : s.merge_levels) {
    // The bottleneck block doubles as the 1x1 bottleneck adapter, so the
    // baseline U-Net carries it with zero side encoders.
    if (level < 5 && merge_sides == 0) continue;
    merges_.emplace(level, make_merge_block(store_, "dec.merge" + std::to_string(level),
                                            detail_.level_channels(level), merge_sides, aligned, init, rng, noise));
  }

  const int c1 = detail_.level_channels(1), c2 = detail_.level_channels(2), c3 = detail_.level_channels(3);
  const int c4 = detail_.level_channels(4), c5 = detail_.level_channels(5);
  const int d3 = s.channels(512), d2 = s.channels(256), d1 = s.channels(256), d0 = s.channels(128);
  const int o = s.channels(64);
  up3_ = make_conv(store_, "dec.up3", c4 + c5, d3, 3, 1, 1, true, rng);
  up2_ = make_conv(store_, "dec.up2", c3 + d3, d2, 3, 1, 1, true, rng);
  up1_ = make_conv(store_, "dec.up1", c2 + d2, d1, 3, 1, 1, true, rng);
  up0_ = make_conv(store_, "dec.up0", c1 + d1, d0, 3, 1, 1, true, rng);
  orig0_ = make_conv(store_, "dec.orig0", 3, o, 3, 1, 1, true, rng);
  orig1_ = make_conv(store_, "dec.orig1", o, o, 3, 1, 1, true, rng);
  orig2_ = make_conv(store_, "dec.orig2", o + d0, o, 3, 1, 1, true, rng);
  build_heads(rng);

  if (!s.pretrained.empty()) {
    load_encoder_weights(store_, "detail", s.pretrained);
    for (std::size_t i = 0; i < contexts_.size(); ++i) {
      load_encoder_weights(store_, "ctx" + std::to_string(i), s.pretrained);
    }
  }
}

template <typename T>
void Model<T>::build_heads(Rng& rng) {
  const auto& s = spec_;
  seg_head_ = make_conv(store_, "head.seg", s.channels(64), s.class_count, 1, 1, 0, true, rng);
  cls_source_ = -1;
  for (std::size_t i = 0; i < s.context_encoders.size(); ++i) {
    if (s.context_encoders[i].terminal == Terminal::Classifier) cls_source_ = static_cast<int>(i);
  }
  if (cls_source_ < 0 && s.classification_loss) {
    // Class head on the coarsest merge-terminal context encoder.
    int best_scale = 0;
    for (std::size_t i = 0; i < s.context_encoders.size(); ++i) {
      if (s.context_encoders[i].scale > best_scale) {
        best_scale = s.context_encoders[i].scale;
        cls_source_ = static_cast<int>(i);
      }
    }
  }
  cls_head_.reset();
  gate_.reset();
  output_prefixes_ = {"head.seg"};
  if (cls_source_ >= 0) {
    cls_head_ = make_linear(store_, "head.cls", contexts_[cls_source_].level_channels(5), s.class_count, rng);
    output_prefixes_.push_back("head.cls");
  }
  if (s.use_gate) {
    gate_ = make_context_gate(store_, "head.gate", s.class_count, rng);
    output_prefixes_.push_back("head.gate");
  }
}

template <typename T>
void Model<T>::replace_output_layers(int class_count, std::uint64_t seed) {
  if (class_count < 2) throw SpecError("class_count must be >= 2");
  store_.erase_prefix("head.");
  spec_.class_count = class_count;
  Rng rng(seed);
  build_heads(rng);
}

template <typename T>
void Model<T>::freeze_body(bool frozen) {
  for (auto& p : store_.params()) {
    const bool is_head = p.name.rfind("head.", 0) == 0;
    p.var.set_requires_grad(is_head || !frozen);
    if (!is_head && frozen) p.var.zero_grad();
  }
}

template <typename T>
ModelOutputs<T> Model<T>::forward(const ModelInput<T>& input) const {
  const auto& s = spec_;
  auto image = [&](int scale) -> const Tensor<T>& {
    auto it = input.images.find(scale);
    if (it == input.images.end()) {
      throw InputError("architecture '" + s.name + "' needs an image at scale " + std::to_string(scale));
    }
    return it->second;
  };
  const Tensor<T>& detail_img = image(s.detail_scale);
  const Shape ds = detail_img.shape();
  if (ds.c != 3 || ds.h != ds.w || ds.h % 32 != 0) {
    throw InputError("detail image must be N x 3 x P x P with P a multiple of 32, got " + ds.str());
  }
  auto footprints = [&](int scale) {
    auto it = input.footprints.find(scale);
    if (it != input.footprints.end()) return it->second;
    const double e = static_cast<double>(ds.h) * scale;
    return std::vector<Footprint>(ds.n, Footprint{-e / 2, -e / 2, e, e});
  };

  // Context encoders run to the bottleneck independently of the detail path.
  std::vector<std::vector<TensorMap<T>>> ctx_feats(contexts_.size());
  for (std::size_t i = 0; i < contexts_.size(); ++i) {
    const int scale = s.context_encoders[i].scale;
    const Tensor<T>& img = image(scale);
    if (!(img.shape() == ds)) {
      throw InputError("scale-" + std::to_string(scale) + " image " + img.shape().str() + " differs from detail " +
                       ds.str());
    }
    Var<T> h(img);
    const auto fp = footprints(scale);
    for (int level = 1; level <= 5; ++level) {
      h = contexts_[i].stage(level, h, training_);
      ctx_feats[i].push_back({h, fp});
    }
  }
  auto merge_inputs = [&](int level) {
    std::vector<ContextFeature<T>> out;
    for (std::size_t i = 0; i < contexts_.size(); ++i) {
      if (s.context_encoders[i].terminal != Terminal::Merge) continue;
      out.push_back({ctx_feats[i][level - 1], s.context_encoders[i].scale});
    }
    return out;
  };

  Var<T> x(detail_img);
  const auto detail_fp = footprints(s.detail_scale);
  std::vector<Var<T>> enc;
  Var<T> h = x;
  for (int level = 1; level <= 4; ++level) {
    h = detail_.stage(level, h, training_);
    auto it = merges_.find(level);
    if (it != merges_.end()) h = it->second(TensorMap<T>{h, detail_fp}, merge_inputs(level)).data;
    enc.push_back(h);
  }
  h = detail_.stage(5, h, training_);
  ModelOutputs<T> out;
  const TensorMap<T> bottleneck = merges_.at(5)(TensorMap<T>{h, detail_fp}, merge_inputs(5));
  out.bottleneck_footprints = bottleneck.footprints;
  for (const auto& ctx : merge_inputs(5)) {
    if (s.alignment != Alignment::Aligned) break;
    const auto aligned = align_context(ctx.map, ctx.scale, h.shape().h);
    out.bottleneck_footprints.insert(out.bottleneck_footprints.end(), aligned.footprints.begin(),
                                     aligned.footprints.end());
  }

  Var<T> orig = ops::relu(orig1_(ops::relu(orig0_(x))));
  out.skips.push_back(orig);
  for (int level = 1; level <= 4; ++level) out.skips.push_back(ops::relu(adapters_[level - 1](enc[level - 1])));

  Var<T> d = bottleneck.data;
  const Conv2d<T>* ups[] = {&up3_, &up2_, &up1_, &up0_};
  for (int k = 0; k < 4; ++k) {
    d = ops::upsample_bilinear(d, 2, 2);
    d = ops::relu((*ups[k])(ops::concat_channels<T>({d, out.skips[4 - k]})));
  }
  d = ops::upsample_bilinear(d, 2, 2);
  d = ops::relu(orig2_(ops::concat_channels<T>({d, orig})));
  Var<T> logits = seg_head_(d);

  if (cls_source_ >= 0) {
    Var<T> cls_logits = (*cls_head_)(ops::global_avg_pool(ctx_feats[cls_source_][4].data));
    if (gate_) {
      out.seg = ops::clamp((*gate_)(logits, cls_logits), T(0), T(1));
    } else {
      out.seg = ops::sigmoid(logits);
    }
    out.clss = ops::sigmoid(cls_logits);
  } else {
    out.seg = ops::sigmoid(logits);
  }
  return out;
}

template <typename T>
std::unique_ptr<Model<T>> build(const ArchitectureSpec& spec, std::uint64_t seed) {
  spec.validate();
  return std::make_unique<Model<T>>(spec, seed);
}

template <typename T>
std::unique_ptr<Model<T>> build_nonaligned_variant(ArchitectureSpec spec, Alignment init, std::uint64_t seed,
                                                   double noise_std) {
  int merge_encoders = 0;
  for (const auto& c : spec.context_encoders) merge_encoders += c.terminal == Terminal::Merge;
  if (merge_encoders < 2 || spec.merge_levels != std::set<int>{5}) {
    throw SpecError("non-aligned variant expects an msY2-shaped spec (two merge encoders, bottleneck merge)");
  }
  if (init == Alignment::Aligned) throw SpecError("non-aligned variant needs a non-aligned init mode");
  spec.alignment = init;
  spec.identity_noise_std = noise_std;
  return build<T>(spec, seed);
}

template <typename T>
std::unique_ptr<Model<T>> build_multimerge_variant(ArchitectureSpec spec, std::uint64_t seed) {
  if (!spec.has_merge_encoders()) throw SpecError("multi-merge variant needs a merge-terminal context encoder");
  spec.merge_levels = {1, 2, 3, 4, 5};
  return build<T>(spec, seed);
}

template class ResNetEncoder<float>;
template class ResNetEncoder<double>;
template struct BasicBlock<float>;
template struct BasicBlock<double>;
template class Model<float>;
template class Model<double>;
template std::unique_ptr<Model<float>> build(const ArchitectureSpec&, std::uint64_t);
template std::unique_ptr<Model<double>> build(const ArchitectureSpec&, std::uint64_t);
template std::unique_ptr<Model<float>> build_nonaligned_variant(ArchitectureSpec, Alignment, std::uint64_t, double);
template std::unique_ptr<Model<double>> build_nonaligned_variant(ArchitectureSpec, Alignment, std::uint64_t, double);
template std::unique_ptr<Model<float>> build_multimerge_variant(ArchitectureSpec, std::uint64_t);
template std::unique_ptr<Model<double>> build_multimerge_variant(ArchitectureSpec, std::uint64_t);

}  // namespace msy
