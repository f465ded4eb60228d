#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "msy/backend/grad_check.hpp"
#include "msy/training.hpp"
#include "test_util.hpp"

using namespace msy;
using msy::testing::bit_equal;
using msy::testing::random_tensor;
using msy::testing::random_var;

namespace {

constexpr double kWidth = 0.125;
const std::vector<double> kWeights{0, 1, 2, 6};

Tensor<double> one_hot_target(int n, int k, int p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor<double> t(Shape{n, k, p, p});
  for (int b = 0; b < n; ++b)
    for (int i = 0; i < p * p; ++i) t.plane(b, static_cast<int>(rng() % k))[i] = 1.0;
  return t;
}

ModelOutputs<double> outputs(Var<double> seg, std::optional<Var<double>> clss = std::nullopt) {
  ModelOutputs<double> o{seg, clss, {}, {}};
  return o;
}

struct Fixture {
  std::vector<PyramidImage> slides;
  ValidationSet vset;
  TrainData data;

  explicit Fixture(int class_count = 4, int n_train = 3) {
    SynthParams p;
    p.base_size = 256;
    p.class_count = class_count;
    for (int i = 0; i < n_train + 1; ++i) slides.push_back(synth_slide(p, 40 + i, "s" + std::to_string(i)));
    vset = make_validation_set({slides.back()}, 1, 64, 5);
    for (int i = 0; i < n_train; ++i) data.train.push_back(&slides[i]);
    data.val.push_back(&slides.back());
    data.validation = &vset;
  }
};

TrainConfig tiny_config(int class_count = 4) {
  TrainConfig c;
  c.patch_size = 32;
  c.batch_size = 8;
  c.patches_per_epoch = 32;
  c.epochs_min = 1;
  c.epochs_max = 2;
  c.seed = 11;
  c.save_checkpoints = false;
  c.queue_capacity = 2;
  if (class_count == 3) {
    c.class_weights = {0, 1, 2};
    c.classes_of_interest = {1, 2};
  }
  return c;
}

std::unique_ptr<Model<float>> small(const std::string& arch, int k = 4, std::uint64_t seed = 3) {
  return build<float>(preset(arch, k, kWidth), seed);
}

ModelInput<float> input_for(const ArchitectureSpec& s, int n, int p, std::uint64_t seed) {
  ModelInput<float> in;
  for (int scale : s.required_scales()) in.images[scale] = random_tensor<float>(Shape{n, 3, p, p}, seed + scale);
  return in;
}

double grad_norm(Model<float>& m, const std::string& prefix) {
  double s = 0;
  for (auto& p : m.store().params()) {
    if (p.name.rfind(prefix, 0) != 0 || !p.var.has_grad()) continue;
    const Tensor<float>& g = p.var.grad();
    for (std::size_t i = 0; i < g.numel(); ++i) s += double(g[i]) * g[i];
  }
  return std::sqrt(s);
}

std::map<std::string, Tensor<float>> snapshot(Model<float>& m, const std::string& prefix) {
  std::map<std::string, Tensor<float>> out;
  for (auto& p : m.store().params())
    if (p.name.rfind(prefix, 0) == 0) out.emplace(p.name, p.var.value());
  return out;
}

bool unchanged(Model<float>& m, const std::map<std::string, Tensor<float>>& snap) {
  for (const auto& [name, t] : snap)
    if (!bit_equal(m.store().find(name)->var.value(), t)) return false;
  return true;
}

}  // namespace

TEST(CompositeLoss, UniformHalfIsLn2) {
  const auto target = one_hot_target(2, 4, 8, 1);
  Var<double> p(Tensor<double>(Shape{2, 4, 8, 8}, 0.5), true);
  const auto t = composite_loss(outputs(p), target, Tensor<double>(Shape{2, 4, 1, 1}), kWeights, false);
  EXPECT_NEAR(t.seg.value()[0], std::log(2.0), 1e-12);
  EXPECT_FALSE(t.clss.has_value());
  EXPECT_EQ(t.total.value()[0], t.seg.value()[0]);
}

TEST(CompositeLoss, PerfectPredictionNearZero) {
  const auto target = one_hot_target(2, 4, 8, 2);
  Tensor<double> pv = target;
  for (std::size_t i = 0; i < pv.numel(); ++i) pv[i] = std::clamp(pv[i], 1e-7, 1 - 1e-7);
  const auto t = composite_loss(outputs(Var<double>(pv, true)), target, Tensor<double>(Shape{2, 4, 1, 1}), kWeights,
                                false);
  EXPECT_LT(t.total.value()[0], 1e-2);
}

TEST(CompositeLoss, ViableErrorCostsThreeTimesWholeTumor) {
  // All pixels background and predicted perfectly, except one miss.
  Tensor<double> target(Shape{1, 4, 8, 8});
  std::fill(target.plane(0, 0), target.plane(0, 0) + 64, 1.0);
  auto loss_with_miss = [&](int cls) {
    Tensor<double> gt = target;
    gt.at(0, 0, 3, 3) = 0.0;
    gt.at(0, cls, 3, 3) = 1.0;
    Tensor<double> pv = target;
    for (std::size_t i = 0; i < pv.numel(); ++i) pv[i] = std::clamp(pv[i], 1e-7, 1 - 1e-7);
    return composite_loss(outputs(Var<double>(pv, true)), gt, Tensor<double>(Shape{1, 4, 1, 1}), kWeights, false)
        .total.value()[0];
  };
  const auto base = [&] {
    Tensor<double> pv = target;
    for (std::size_t i = 0; i < pv.numel(); ++i) pv[i] = std::clamp(pv[i], 1e-7, 1 - 1e-7);
    return composite_loss(outputs(Var<double>(pv, true)), target, Tensor<double>(Shape{1, 4, 1, 1}), kWeights, false)
        .total.value()[0];
  }();
  const double viable = loss_with_miss(3) - base;
  const double whole = loss_with_miss(2) - base;
  ASSERT_GT(whole, 0);
  EXPECT_NEAR(viable / whole, 3.0, 1e-9);
}

TEST(CompositeLoss, ClassTermAddsWithUnitWeight) {
  const auto target = one_hot_target(2, 4, 8, 3);
  const auto seg = Var<double>(random_tensor<double>(Shape{2, 4, 8, 8}, 4, 0.05, 0.95), true);
  const auto cls = Var<double>(random_tensor<double>(Shape{2, 4, 1, 1}, 5, 0.05, 0.95), true);
  Tensor<double> presence(Shape{2, 4, 1, 1});
  presence.at(0, 1, 0, 0) = presence.at(1, 3, 0, 0) = 1.0;
  const auto on = composite_loss(outputs(seg, cls), target, presence, kWeights, true);
  ASSERT_TRUE(on.clss.has_value());
  double oracle = 0;
  for (std::size_t i = 0; i < presence.numel(); ++i)
    oracle -= presence[i] * std::log(cls.value()[i]) + (1 - presence[i]) * std::log(1 - cls.value()[i]);
  EXPECT_NEAR(on.clss->value()[0], oracle / presence.numel(), 1e-12);
  EXPECT_NEAR(on.total.value()[0], on.seg.value()[0] + on.clss->value()[0], 1e-12);
  const auto off = composite_loss(outputs(seg, cls), target, presence, kWeights, false);
  EXPECT_FALSE(off.clss.has_value());
  EXPECT_EQ(off.total.value()[0], on.seg.value()[0]);
}

TEST(CompositeLoss, GradientMatchesFiniteDifferences) {
  const auto target = one_hot_target(2, 4, 6, 6);
  Tensor<double> presence(Shape{2, 4, 1, 1});
  presence.at(0, 2, 0, 0) = presence.at(1, 0, 0, 0) = 1.0;
  auto seg_logits = random_var<double>(Shape{2, 4, 6, 6}, 7, -2, 2);
  auto cls_logits = random_var<double>(Shape{2, 4, 1, 1}, 8, -2, 2);
  const double err = grad_check(
      [&] {
        return composite_loss(outputs(ops::sigmoid(seg_logits), ops::sigmoid(cls_logits)), target, presence,
                              kWeights, true)
            .total;
      },
      {{"seg", seg_logits}, {"cls", cls_logits}}, 1e-6);
  EXPECT_LT(err, 1e-3);
}

TEST(CompositeLoss, DoublingWeightsKeepsGradientDirection) {
  const auto target = one_hot_target(2, 4, 6, 9);
  auto grad_for = [&](std::vector<double> w) {
    auto logits = random_var<double>(Shape{2, 4, 6, 6}, 10, -2, 2);
    auto t = composite_loss(outputs(ops::sigmoid(logits)), target, Tensor<double>(Shape{2, 4, 1, 1}), w, false);
    t.total.backward();
    return Tensor<double>(logits.grad());
  };
  const auto g1 = grad_for(kWeights);
  const auto g2 = grad_for({0, 2, 4, 12});
  double dot = 0, n1 = 0, n2 = 0;
  for (std::size_t i = 0; i < g1.numel(); ++i) {
    dot += g1[i] * g2[i];
    n1 += g1[i] * g1[i];
    n2 += g2[i] * g2[i];
  }
  ASSERT_GT(n1, 0);
  EXPECT_NEAR(dot / std::sqrt(n1 * n2), 1.0, 1e-12);
}

TEST(TrainConfig, StepDecaySchedule) {
  TrainConfig c;
  EXPECT_DOUBLE_EQ(c.lr_at(1), 1e-3);
  EXPECT_DOUBLE_EQ(c.lr_at(30), 1e-3);
  EXPECT_DOUBLE_EQ(c.lr_at(31), 5e-4);
  EXPECT_DOUBLE_EQ(c.lr_at(61), 2.5e-4);
}

TEST(TrainConfig, ValidationCadence) {
  TrainConfig c;
  std::vector<int> got;
  for (int e = 1; e <= 60; ++e)
    if (c.is_validation_epoch(e)) got.push_back(e);
  EXPECT_EQ(got, (std::vector<int>{1, 3, 5, 8, 11, 16, 21, 31, 41, 51}));
}

TEST(TrainConfig, RejectsBadWeights) {
  TrainConfig c;
  EXPECT_THROW(c.validate(3), ConfigError);
  c.class_weights = {0, 0, 0, 0};
  EXPECT_THROW(c.validate(4), ConfigError);
  c.class_weights = {0, 1, -1, 6};
  EXPECT_THROW(c.validate(4), ConfigError);
  c.class_weights = kWeights;
  EXPECT_NO_THROW(c.validate(4));
  c.patch_size = 48;
  EXPECT_THROW(c.validate(4), ConfigError);
}

TEST(TrainConfig, JsonRoundTrip) {
  TrainConfig c = tiny_config();
  c.lr = 3e-4;
  c.validation_epochs = {2, 4};
  const TrainConfig back = nlohmann::json(c).get<TrainConfig>();
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(c));
}

TEST(Train, BitReproducibleTrajectory) {
  Fixture f;
  const auto cfg = tiny_config();
  auto a = small("unet");
  auto b = small("unet");
  const auto ma = train(*a, f.data, cfg);
  const auto mb = train(*b, f.data, cfg);
  ASSERT_EQ(ma.trajectory.size(), 2u);
  ASSERT_EQ(mb.trajectory.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(ma.trajectory[i].train_loss, mb.trajectory[i].train_loss);
    EXPECT_EQ(ma.trajectory[i].val_loss, mb.trajectory[i].val_loss);
    EXPECT_EQ(ma.trajectory[i].plan_seed, mb.trajectory[i].plan_seed);
  }
  EXPECT_NE(ma.trajectory[0].plan_seed, ma.trajectory[1].plan_seed);
  EXPECT_EQ(ma.config_hash, mb.config_hash);
  for (auto& p : a->store().params()) EXPECT_TRUE(bit_equal(p.var.value(), b->store().find(p.name)->var.value()));
}

TEST(Train, WritesManifestTrajectoryAndCheckpoints) {
  Fixture f;
  auto cfg = tiny_config();
  cfg.save_checkpoints = true;
  const auto dir = std::filesystem::temp_directory_path() / "msy_train_manifest";
  std::filesystem::remove_all(dir);
  auto m = small("unet");
  const auto man = train(*m, f.data, cfg, dir);
  EXPECT_EQ(man.status, "completed");
  EXPECT_TRUE(std::filesystem::exists(dir / "manifest.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "best.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "last.ckpt"));
  std::ifstream traj(dir / "trajectory.jsonl");
  int lines = 0;
  for (std::string line; std::getline(traj, line);) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("epoch").get<int>(), ++lines);
  }
  EXPECT_EQ(lines, 2);
  std::ifstream mf(dir / "manifest.json");
  const auto j = nlohmann::json::parse(mf);
  EXPECT_EQ(j.at("config_hash").get<std::string>(), man.config_hash);
  EXPECT_EQ(j.at("best_epoch").get<int>(), man.best_epoch);
  std::filesystem::remove_all(dir);
}

TEST(Train, NonFiniteLossFailsFastWithManifest) {
  Fixture f;
  const auto dir = std::filesystem::temp_directory_path() / "msy_train_nan";
  std::filesystem::remove_all(dir);
  auto m = small("unet");
  m->store().find("head.seg.bias")->var.value().fill(std::numeric_limits<float>::quiet_NaN());
  try {
    train(*m, f.data, tiny_config(), dir);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos);
  }
  std::ifstream mf(dir / "manifest.json");
  const auto j = nlohmann::json::parse(mf);
  EXPECT_EQ(j.at("status").get<std::string>().rfind("failed", 0), 0u);
  std::filesystem::remove_all(dir);
}

TEST(Train, RejectsClassCountMismatch) {
  Fixture f(3, 1);
  auto m = small("unet");
  EXPECT_THROW(train(*m, f.data, tiny_config()), TrainingError);
}

TEST(Train, StopsAfterPatienceWithoutImprovement) {
  Fixture f(4, 1);
  auto cfg = tiny_config();
  cfg.epochs_max = 30;
  cfg.lr = 1e-12;  // effectively frozen, so validation loss never improves
  cfg.validation_epochs = {1, 2, 3, 4, 5, 6};
  cfg.patience = 3;
  cfg.patches_per_epoch = 8;
  auto m = small("unet");
  const auto man = train(*m, f.data, cfg);
  EXPECT_EQ(man.status, "converged");
  EXPECT_LE(man.trajectory.size(), 6u);
}

TEST(Freezing, FrozenBodyGetsNoGradient) {
  auto m = small("msY16");
  m->freeze_body(true);
  m->set_training(true);
  const auto in = input_for(m->spec(), 2, 64, 1);
  const auto out = m->forward(in);
  Tensor<float> target(out.seg.shape());
  target.fill(1.f);
  Tensor<float> presence(Shape{2, 4, 1, 1}, 1.f);
  m->store().zero_grad();
  composite_loss(out, target, presence, kWeights, true).total.backward();
  EXPECT_EQ(grad_norm(*m, "detail."), 0.0);
  EXPECT_EQ(grad_norm(*m, "ctx0."), 0.0);
  EXPECT_EQ(grad_norm(*m, "dec."), 0.0);
  EXPECT_GT(grad_norm(*m, "head.seg"), 0.0);
  EXPECT_GT(grad_norm(*m, "head.cls"), 0.0);
}

TEST(Finetune, FrozenPhaseThenFullTraining) {
  Fixture f(3, 2);
  auto m = small("unet", 4);
  auto cfg = tiny_config(3);
  cfg.epochs_max = 2;
  const auto before = snapshot(*m, "detail.");
  bool frozen_ok = false, moved = false;
  const auto man = finetune(*m, 3, f.data, cfg, 1, {}, [&](const EpochRecord& r) {
    if (r.epoch == 1) frozen_ok = r.frozen && unchanged(*m, before);
    if (r.epoch == 2) moved = !r.frozen && !unchanged(*m, before);
  });
  EXPECT_TRUE(frozen_ok);
  EXPECT_TRUE(moved);
  EXPECT_EQ(m->spec().class_count, 3);
  EXPECT_EQ(m->store().find("head.seg.weight")->var.shape().n, 3);
  ASSERT_GE(man.trajectory.size(), 2u);
  EXPECT_TRUE(man.trajectory[0].frozen);
  EXPECT_FALSE(man.trajectory[1].frozen);
}

TEST(Finetune, ClassifierHeadResized) {
  Fixture f(3, 1);
  auto m = small("msY16", 4);
  auto cfg = tiny_config(3);
  cfg.epochs_max = 1;
  cfg.patches_per_epoch = 8;
  finetune(*m, 3, f.data, cfg, 1);
  EXPECT_EQ(m->store().find("head.cls.weight")->var.shape().n, 3);
  EXPECT_EQ(m->store().find("head.cls.bias")->var.shape().c, 3);
}

TEST(GradientFlow, ClassLossReachesContextEncoderThroughSilencedMerge) {
  auto m = small("msY16");
  // Zero the merge weights reading the context channels.
  auto& w = m->store().find("dec.merge5.weight")->var.value();
  const int main_c = w.shape().c / 2;
  for (int o = 0; o < w.shape().n; ++o)
    for (int i = main_c; i < w.shape().c; ++i) w.at(o, i, 0, 0) = 0.f;
  m->set_training(true);
  const auto in = input_for(m->spec(), 2, 64, 2);
  auto ctx_grad = [&](bool class_loss) {
    const auto out = m->forward(in);
    Tensor<float> target(out.seg.shape());
    for (int n = 0; n < 2; ++n) std::fill(target.plane(n, 1), target.plane(n, 1) + 64 * 64, 1.f);
    Tensor<float> presence(Shape{2, 4, 1, 1});
    presence.at(0, 1, 0, 0) = presence.at(1, 1, 0, 0) = 1.f;
    m->store().zero_grad();
    composite_loss(out, target, presence, kWeights, class_loss).total.backward();
    return grad_norm(*m, "ctx0.");
  };
  EXPECT_EQ(ctx_grad(false), 0.0);
  EXPECT_GT(ctx_grad(true), 0.0);
}

class LossDecreases : public ::testing::TestWithParam<std::string> {};

TEST_P(LossDecreases, OverFirstFiveEpochs) {
  Fixture f(4, 3);
  auto cfg = tiny_config();
  cfg.epochs_max = 5;
  cfg.patches_per_epoch = 48;
  cfg.validation_epochs = {};
  cfg.validation_every = 1000;
  auto m = small(GetParam());
  const auto man = train(*m, f.data, cfg);
  ASSERT_EQ(man.trajectory.size(), 5u);
  // Least-squares slope of the training loss over the epochs.
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& r : man.trajectory) {
    ASSERT_TRUE(std::isfinite(r.train_loss));
    sx += r.epoch;
    sy += r.train_loss;
    sxx += r.epoch * r.epoch;
    sxy += r.epoch * r.train_loss;
  }
  const double slope = (5 * sxy - sx * sy) / (5 * sxx - sx * sx);
  EXPECT_LT(slope, 0.0);
  EXPECT_LT(man.trajectory.back().train_loss, man.trajectory.front().train_loss);
}

INSTANTIATE_TEST_SUITE_P(Family, LossDecreases,
                         ::testing::Values("unet", "unet4", "msY4", "msY16", "msY16-nocls", "msUI16", "msYI",
                                           "msY2", "msY16-multi", "msY2-nonaligned-random",
                                           "msY2-nonaligned-identity"),
                         [](const auto& info) {
                           std::string s = info.param;
                           for (char& c : s)
                             if (!std::isalnum(static_cast<unsigned char>(c))) c = '_';
                           return s;
                         });
