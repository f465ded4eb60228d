#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "msy/checkpoint.hpp"
#include "msy/ensembles.hpp"

using namespace msy;

namespace {

const std::vector<double> kWeights{0, 1, 2, 6};
const std::vector<double> kAll{1, 1, 1, 1};

ProbMap random_map(int k, int h, int w, std::uint64_t seed, float lo = 0.f, float hi = 1.f) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(lo, hi);
  ProbMap p(k, h, w);
  for (auto& v : p.data) v = u(rng);
  return p;
}

// Map whose per-pixel argmax over all classes is `cls` with probability `p`,
// the others sharing the rest.
ProbMap vote(int k, int h, int w, int cls, float p) {
  ProbMap m(k, h, w, (1.f - p) / (k - 1));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m.at(cls, y, x) = p;
  return m;
}

LogisticModel logistic_model(std::vector<double> member_weights, int k, double bias = 0.0) {
  LogisticModel m;
  m.members = static_cast<int>(member_weights.size());
  m.weights.assign(k, member_weights);
  m.bias.assign(k, bias);
  return m;
}

bool same_labels(const LabelMap& a, const LabelMap& b) { return a.h == b.h && a.w == b.w && a.data == b.data; }

}  // namespace

TEST(Combine, IdenticalMembersAgreeUnderAllCombiners) {
  const auto m = random_map(4, 12, 12, 1);
  const std::vector<ProbMap> members{m, m, m};
  const auto expected = argmax_map(m, kWeights);
  const auto lm = logistic_model({1.0 / 3, 1.0 / 3, 1.0 / 3}, 4);
  for (Combiner c : {Combiner::Average, Combiner::Majority, Combiner::Logistic})
    EXPECT_TRUE(same_labels(combine(members, c, kWeights, 0.5, &lm).labels, expected)) << to_string(c);
}

TEST(Combine, MajorityTakesTwoOfThree) {
  const std::vector<ProbMap> members{vote(4, 4, 4, 1, 0.6f), vote(4, 4, 4, 1, 0.6f), vote(4, 4, 4, 3, 0.99f)};
  const auto out = combine(members, Combiner::Majority, kAll);
  for (auto v : out.labels.data) EXPECT_EQ(v, 1);
  // The average alone would side with the confident dissenter.
  for (auto v : combine(members, Combiner::Average, kAll, 0.0).labels.data) EXPECT_EQ(v, 3);
}

TEST(Combine, MajorityTieBrokenByMeanProbability) {
  // Three-way split: class 2 has the highest mean probability.
  const std::vector<ProbMap> members{vote(4, 3, 3, 1, 0.55f), vote(4, 3, 3, 2, 0.9f), vote(4, 3, 3, 3, 0.6f)};
  for (auto v : combine(members, Combiner::Majority, kAll).labels.data) EXPECT_EQ(v, 2);
  // Two-two split between classes 1 and 3.
  const std::vector<ProbMap> four{vote(4, 2, 2, 1, 0.7f), vote(4, 2, 2, 1, 0.7f), vote(4, 2, 2, 3, 0.8f),
                                  vote(4, 2, 2, 3, 0.95f)};
  for (auto v : combine(four, Combiner::Majority, kAll).labels.data) EXPECT_EQ(v, 3);
}

TEST(Combine, MajorityWithBackgroundVotes) {
  // Two members fall below the threshold (background), one says class 2.
  const std::vector<ProbMap> members{ProbMap(4, 2, 2, 0.1f), ProbMap(4, 2, 2, 0.2f), vote(4, 2, 2, 2, 0.9f)};
  for (auto v : combine(members, Combiner::Majority, kWeights).labels.data) EXPECT_EQ(v, 0);
}

TEST(Combine, DegenerateLogisticFollowsFirstMember) {
  const std::vector<ProbMap> members{random_map(4, 16, 16, 2), random_map(4, 16, 16, 3), random_map(4, 16, 16, 4)};
  const auto lm = logistic_model({1, 0, 0}, 4);
  const auto out = combine(members, Combiner::Logistic, kWeights, 0.5, &lm);
  EXPECT_TRUE(same_labels(out.labels, argmax_map(members[0], kWeights)));
  for (std::size_t i = 0; i < out.probs.data.size(); ++i) EXPECT_NEAR(out.probs.data[i], members[0].data[i], 1e-5);
}

TEST(Combine, UnfittedLogisticIsAStateError) {
  const std::vector<ProbMap> members{random_map(4, 4, 4, 5), random_map(4, 4, 4, 6)};
  EXPECT_THROW(combine(members, Combiner::Logistic, kWeights), EnsembleStateError);
  LogisticModel empty;
  EXPECT_THROW(combine(members, Combiner::Logistic, kWeights, 0.5, &empty), EnsembleStateError);
  const auto three = logistic_model({1, 0, 0}, 4);
  EXPECT_THROW(combine(members, Combiner::Logistic, kWeights, 0.5, &three), EnsembleStateError);
}

TEST(Combine, RejectsMisalignedMembers) {
  EXPECT_THROW(combine({random_map(4, 4, 4, 1), random_map(4, 4, 5, 2)}, Combiner::Average, kWeights),
               ContractError);
  EXPECT_THROW(combine({}, Combiner::Average, kWeights), ContractError);
  EXPECT_THROW(combine({random_map(3, 4, 4, 1)}, Combiner::Average, kWeights), ContractError);
}

TEST(CombineProperty, AverageAndMajorityIgnoreMemberOrder) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::vector<ProbMap> m{random_map(4, 10, 10, seed * 3), random_map(4, 10, 10, seed * 3 + 1),
                           random_map(4, 10, 10, seed * 3 + 2)};
    std::vector<int> order{0, 1, 2};
    const auto avg = combine(m, Combiner::Average, kWeights);
    const auto maj = combine(m, Combiner::Majority, kWeights);
    while (std::next_permutation(order.begin(), order.end())) {
      std::vector<ProbMap> p;
      for (int i : order) p.push_back(m[i]);
      const auto a = combine(p, Combiner::Average, kWeights);
      EXPECT_EQ(a.probs.data, avg.probs.data);
      EXPECT_TRUE(same_labels(a.labels, avg.labels));
      EXPECT_TRUE(same_labels(combine(p, Combiner::Majority, kWeights).labels, maj.labels));
    }
  }
}

TEST(CombineProperty, AverageStaysInUnitInterval) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto out = combine({random_map(4, 8, 8, seed), random_map(4, 8, 8, seed + 100)}, Combiner::Average, kAll);
    for (float v : out.probs.data) {
      EXPECT_GE(v, 0.f);
      EXPECT_LE(v, 1.f);
    }
  }
}

TEST(CombineProperty, JointMonotoneRecalibrationKeepsClassOrder) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<ProbMap> m{random_map(4, 8, 8, trial * 2), random_map(4, 8, 8, trial * 2 + 1)};
    // Increasing affine maps into [0, 1].
    const float a = std::uniform_real_distribution<float>(0.1f, 0.9f)(rng);
    const float b = std::uniform_real_distribution<float>(0.f, 1.f - a)(rng);
    std::vector<ProbMap> r = m;
    for (auto& p : r)
      for (auto& v : p.data) v = a * v + b;
    const auto base = combine(m, Combiner::Average, kAll).probs;
    const auto cal = combine(r, Combiner::Average, kAll).probs;
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x)
        for (int c = 0; c < 4; ++c)
          for (int d = 0; d < 4; ++d)
            if (base.at(c, y, x) > base.at(d, y, x) + 1e-5f) EXPECT_GT(cal.at(c, y, x), cal.at(d, y, x));
  }
  // Identical members: any increasing map keeps the order.
  const auto m = random_map(4, 8, 8, 77);
  ProbMap sq = m;
  for (auto& v : sq.data) v = v * v;
  EXPECT_TRUE(same_labels(combine({m, m}, Combiner::Average, kAll, 0.0).labels,
                          combine({sq, sq}, Combiner::Average, kAll, 0.0).labels));
}

TEST(Resample, ScaleOneIsIdentity) {
  const auto m = random_map(3, 16, 16, 1);
  EXPECT_EQ(resample_probs(m, 1, 16).data, m.data);
  EXPECT_THROW(resample_probs(m, 1, 32), ContractError);
}

TEST(Resample, ConstantStaysConstant) {
  const auto out = resample_probs(ProbMap(2, 8, 8, 0.7f), 4, 32);
  for (float v : out.data) EXPECT_FLOAT_EQ(v, 0.7f);
}

TEST(Resample, CheckerboardHasNoOvershoot) {
  ProbMap m(1, 8, 8);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) m.at(0, y, x) = ((x + y) % 2) ? 0.9f : 0.2f;
  const auto out = resample_probs(m, 4, 32);
  for (float v : out.data) {
    EXPECT_GE(v, 0.2f - 1e-6f);
    EXPECT_LE(v, 0.9f + 1e-6f);
  }
}

TEST(Resample, MatchesDirectBilinearOracle) {
  const auto m = random_map(2, 6, 6, 4);
  const int s = 4, size = 24;
  const auto out = resample_probs(m, s, size);
  auto src = [&](int c, int y, int x) {
    return double(m.at(c, std::clamp(y, 0, 5), std::clamp(x, 0, 5)));
  };
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        // Pixel centres: target (t + 0.5) sits at source coordinate (t + 0.5) / s - 0.5.
        const double v = std::clamp((y + 0.5) / s - 0.5, 0.0, 5.0), u = std::clamp((x + 0.5) / s - 0.5, 0.0, 5.0);
        const int y0 = int(v), x0 = int(u);
        const double fy = v - y0, fx = u - x0;
        const double want = (1 - fy) * ((1 - fx) * src(c, y0, x0) + fx * src(c, y0, x0 + 1)) +
                            fy * ((1 - fx) * src(c, y0 + 1, x0) + fx * src(c, y0 + 1, x0 + 1));
        ASSERT_NEAR(out.at(c, y, x), want, 1e-5) << c << " " << y << " " << x;
      }
}

TEST(Resample, CoverageGapIsAnError) {
  EXPECT_THROW(resample_probs(ProbMap(2, 4, 4), 4, 20), ContractError);
  EXPECT_NO_THROW(resample_probs(ProbMap(2, 5, 5), 4, 20));
}

TEST(FitLogistic, RecoversSlopesOfAKnownModel) {
  // Two classes; class 1 occurs with probability sigmoid(0.3 + 2 logit(p0) - 1 logit(p1)).
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.02, 0.98), coin(0.0, 1.0);
  std::vector<LogisticSample> samples;
  auto lg = [](double p) { return std::log(p / (1 - p)); };
  for (int s = 0; s < 4; ++s) {
    LogisticSample smp;
    smp.members = {ProbMap(2, 100, 100), ProbMap(2, 100, 100)};
    smp.gt = LabelMap(100, 100, 1, 0);
    for (int i = 0; i < 100 * 100; ++i) {
      const double p0 = u(rng), p1 = u(rng);
      smp.members[0].data[10000 + i] = float(p0);
      smp.members[1].data[10000 + i] = float(p1);
      smp.members[0].data[i] = float(1 - p0);
      smp.members[1].data[i] = float(1 - p1);
      const double z = 0.3 + 2 * lg(p0) - lg(p1);
      smp.gt.data[i] = coin(rng) < 1 / (1 + std::exp(-z)) ? 1 : 0;
    }
    samples.push_back(std::move(smp));
  }
  const auto m = fit_logistic(samples, 100000, 1);
  ASSERT_TRUE(m.fitted());
  // Balanced sampling shifts the intercept but leaves the slopes consistent.
  EXPECT_NEAR(m.weights[1][0], 2.0, 0.15);
  EXPECT_NEAR(m.weights[1][1], -1.0, 0.15);
  // Class 0 is the complement, so its slopes flip sign.
  EXPECT_NEAR(m.weights[0][0], 2.0, 0.15);
  EXPECT_NEAR(m.weights[0][1], -1.0, 0.15);
}

TEST(FitLogistic, DeterministicForASeed) {
  LogisticSample s{{random_map(4, 20, 20, 1), random_map(4, 20, 20, 2), random_map(4, 20, 20, 3)}, LabelMap(20, 20, 1)};
  std::mt19937_64 rng(5);
  for (auto& v : s.gt.data) v = rng() % 4;
  const auto a = fit_logistic({s}, 200, 7);
  const auto b = fit_logistic({s}, 200, 7);
  EXPECT_EQ(nlohmann::json(a), nlohmann::json(b));
  EXPECT_EQ(a.members, 3);
  EXPECT_THROW(fit_logistic({}), ContractError);
}

TEST(EnsembleSpec, JsonRoundTripAndValidation) {
  EnsembleSpec s;
  s.members = {{1, "a.ckpt"}, {4, "b.ckpt"}, {16, "c.ckpt"}};
  s.combiner = Combiner::Logistic;
  s.logistic = logistic_model({0.5, 0.3, 0.2}, 4, -0.1);
  const auto back = nlohmann::json(s).get<EnsembleSpec>();
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(s));
  EXPECT_NO_THROW(s.validate());
  s.logistic = logistic_model({1, 0}, 4);
  EXPECT_THROW(s.validate(), ConfigError);
  EXPECT_THROW(parse_combiner("vote"), ConfigError);
  EXPECT_THROW(EnsembleSpec{}.validate(), ConfigError);
}

TEST(Ensemble, OneMemberPerScale) {
  std::vector<std::unique_ptr<Model<float>>> ms;
  ms.push_back(build<float>(preset("unet", 4, 0.125), 1));
  ms.push_back(build<float>(preset("unet", 4, 0.125), 2));
  EXPECT_THROW(Ensemble(std::move(ms), Combiner::Average, EvalOptions{}), ConfigError);
}

TEST(Ensemble, PerScaleMembersPredictAlignedMaps) {
  SynthParams sp;
  sp.base_size = 256;
  const auto slide = synth_slide(sp, 3, "e");
  std::vector<std::unique_ptr<Model<float>>> ms;
  for (const char* a : {"unet16", "unet", "unet4"}) ms.push_back(build<float>(preset(a, 4, 0.125), 5));
  EvalOptions o;
  o.patch_size = 32;
  o.batch_size = 4;
  Ensemble e(std::move(ms), Combiner::Average, o);
  ASSERT_EQ(e.size(), 3u);
  EXPECT_EQ(e.member(0).spec().detail_scale, 1);
  EXPECT_EQ(e.member(2).spec().detail_scale, 16);
  const auto maps = e.member_maps(slide, {"e", 64, 64}, 128);
  ASSERT_EQ(maps.size(), 3u);
  for (const auto& m : maps) {
    EXPECT_EQ(m.h, 128);
    EXPECT_EQ(m.w, 128);
  }
  const auto c = e.predict(slide, {"e", 64, 64}, 128);
  const auto direct = combine(maps, Combiner::Average, o.class_weights, o.threshold);
  EXPECT_EQ(c.probs.data, direct.probs.data);
  EXPECT_TRUE(same_labels(c.labels, direct.labels));
}

TEST(Ensemble, LoadsFromCheckpointsAndChecksScale) {
  const auto dir = std::filesystem::temp_directory_path() / "msy_ens_load";
  std::filesystem::create_directories(dir);
  EnsembleSpec s;
  for (const char* a : {"unet", "unet4"}) {
    auto m = build<float>(preset(a, 4, 0.125), 1);
    const auto path = (dir / (std::string(a) + ".ckpt")).string();
    save_checkpoint(path, *m);
    s.members[m->spec().detail_scale] = path;
  }
  EXPECT_EQ(Ensemble::load(s, EvalOptions{}).size(), 2u);
  std::swap(s.members[1], s.members[4]);
  EXPECT_THROW(Ensemble::load(s, EvalOptions{}), ConfigError);
  std::filesystem::remove_all(dir);
}
