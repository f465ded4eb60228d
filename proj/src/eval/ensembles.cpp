#include "msy/ensembles.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <Eigen/Dense>

#include "msy/checkpoint.hpp"

namespace msy {

std::string to_string(Combiner c) {
  switch (c) {
    case Combiner::Average: return "average";
    case Combiner::Majority: return "majority";
    case Combiner::Logistic: return "logistic";
  }
  return "?";
}

Combiner parse_combiner(const std::string& s) {
  if (s == "average") return Combiner::Average;
  if (s == "majority") return Combiner::Majority;
  if (s == "logistic") return Combiner::Logistic;
  throw ConfigError("unknown combiner '" + s + "' (average, majority, logistic)");
}

void to_json(nlohmann::json& j, const LogisticModel& m) {
  j = {{"members", m.members}, {"weights", m.weights}, {"bias", m.bias}};
}
void from_json(const nlohmann::json& j, LogisticModel& m) {
  m.members = j.at("members").get<int>();
  m.weights = j.at("weights").get<std::vector<std::vector<double>>>();
  m.bias = j.at("bias").get<std::vector<double>>();
}

void EnsembleSpec::validate() const {
  if (members.empty()) throw ConfigError("ensemble needs members");
  for (const auto& [scale, path] : members)
    if (path.empty()) throw ConfigError("ensemble member at scale " + std::to_string(scale) + " has no checkpoint");
  if (combiner == Combiner::Logistic && logistic && logistic->members != static_cast<int>(members.size()))
    throw ConfigError("logistic model fitted for a different member count");
}

void to_json(nlohmann::json& j, const EnsembleSpec& s) {
  nlohmann::json m = nlohmann::json::object();
  for (const auto& [scale, path] : s.members) m[std::to_string(scale)] = path;
  j = {{"members", m}, {"combiner", to_string(s.combiner)}};
  if (s.logistic) j["logistic"] = *s.logistic;
}
void from_json(const nlohmann::json& j, EnsembleSpec& s) {
  s.members.clear();
  for (const auto& [k, v] : j.at("members").items()) s.members[std::stoi(k)] = v.get<std::string>();
  s.combiner = parse_combiner(j.value("combiner", "average"));
  s.logistic.reset();
  if (j.contains("logistic")) s.logistic = j.at("logistic").get<LogisticModel>();
}

namespace {

constexpr double kLogitEps = 1e-6;

double logit(double p) {
  p = std::clamp(p, kLogitEps, 1.0 - kLogitEps);
  return std::log(p / (1.0 - p));
}

void check_members(const std::vector<ProbMap>& m) {
  if (m.empty()) throw ContractError("combine: no member maps");
  for (const auto& p : m)
    if (p.k != m[0].k || p.h != m[0].h || p.w != m[0].w) throw ContractError("combine: member maps differ in shape");
}

ProbMap average(const std::vector<ProbMap>& m) {
  ProbMap out(m[0].k, m[0].h, m[0].w);
  std::vector<float> v(m.size());
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    for (std::size_t k = 0; k < m.size(); ++k) v[k] = m[k].data[i];
    std::sort(v.begin(), v.end());  // order-free summation
    double s = 0;
    for (float x : v) s += x;
    out.data[i] = static_cast<float>(s / static_cast<double>(m.size()));
  }
  return out;
}

}  // namespace

Combined combine(const std::vector<ProbMap>& members, Combiner combiner, std::span<const double> weights,
                 double threshold, const LogisticModel* logistic) {
  check_members(members);
  const int K = members[0].k, H = members[0].h, W = members[0].w;
  if (static_cast<int>(weights.size()) != K) throw ContractError("combine: weights length != class count");
  Combined out;
  switch (combiner) {
    case Combiner::Average: {
      out.probs = average(members);
      out.labels = argmax_map(out.probs, weights, threshold);
      break;
    }
    case Combiner::Majority: {
      out.probs = average(members);
      std::vector<LabelMap> votes;
      for (const auto& m : members) votes.push_back(argmax_map(m, weights, threshold));
      out.labels = LabelMap(H, W, 1, 0);
      std::vector<int> count(K);
      for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
          std::fill(count.begin(), count.end(), 0);
          for (const auto& v : votes) ++count[v.at(y, x)];
          const int top = *std::max_element(count.begin(), count.end());
          // Tie score: mean probability, or for an ineligible background the
          // complement of the best eligible mean probability.
          double best_eligible = 0;
          for (int c = 0; c < K; ++c)
            if (weights[c] > 0) best_eligible = std::max(best_eligible, static_cast<double>(out.probs.at(c, y, x)));
          int pick = -1;
          double pick_score = -1;
          for (int c = 0; c < K; ++c) {
            if (count[c] != top) continue;
            const double score = weights[c] > 0 ? out.probs.at(c, y, x) : 1.0 - best_eligible;
            if (score > pick_score) {
              pick_score = score;
              pick = c;
            }
          }
          out.labels.at(y, x) = static_cast<std::uint8_t>(pick);
        }
      }
      break;
    }
    case Combiner::Logistic: {
      if (!logistic || !logistic->fitted()) throw EnsembleStateError("logistic combiner has not been fitted");
      if (logistic->members != static_cast<int>(members.size()) || static_cast<int>(logistic->bias.size()) != K)
        throw EnsembleStateError("logistic model does not match the members or class count");
      out.probs = ProbMap(K, H, W);
      for (int c = 0; c < K; ++c) {
        for (int y = 0; y < H; ++y) {
          for (int x = 0; x < W; ++x) {
            double z = logistic->bias[c];
            for (std::size_t m = 0; m < members.size(); ++m) z += logistic->weights[c][m] * logit(members[m].at(c, y, x));
            out.probs.at(c, y, x) = static_cast<float>(1.0 / (1.0 + std::exp(-z)));
          }
        }
      }
      out.labels = argmax_map(out.probs, weights, threshold);
      break;
    }
  }
  return out;
}

LogisticModel fit_logistic(const std::vector<LogisticSample>& samples, int max_pixels, std::uint64_t seed,
                           double l2) {
  if (samples.empty()) throw ContractError("fit_logistic: no samples");
  const int M = static_cast<int>(samples[0].members.size());
  const int K = samples[0].members.at(0).k;
  for (const auto& s : samples) {
    check_members(s.members);
    if (static_cast<int>(s.members.size()) != M || s.members[0].k != K || s.gt.h != s.members[0].h ||
        s.gt.w != s.members[0].w)
      throw ContractError("fit_logistic: inconsistent samples");
  }
  LogisticModel model;
  model.members = M;
  model.weights.assign(K, std::vector<double>(M, 1.0 / M));
  model.bias.assign(K, 0.0);

  std::mt19937_64 rng(seed);
  struct Px {
    int s, i;
  };
  for (int c = 0; c < K; ++c) {
    std::vector<Px> pos, neg;
    for (int s = 0; s < static_cast<int>(samples.size()); ++s)
      for (int i = 0; i < static_cast<int>(samples[s].gt.data.size()); ++i)
        (samples[s].gt.data[i] == c ? pos : neg).push_back({s, i});
    // Without both outcomes the fit is unidentified; keep the logit average.
    if (pos.empty() || neg.empty()) continue;
    const std::size_t half = static_cast<std::size_t>(std::max(1, max_pixels / 2));
    auto take = [&](std::vector<Px>& v) {
      if (v.size() > half) {
        std::shuffle(v.begin(), v.end(), rng);
        v.resize(half);
      }
    };
    take(pos);
    take(neg);
    const int n = static_cast<int>(pos.size() + neg.size());
    Eigen::MatrixXd X(n, M + 1);
    Eigen::VectorXd y(n);
    int r = 0;
    for (const auto* set : {&pos, &neg}) {
      for (const Px& p : *set) {
        X(r, 0) = 1.0;
        const auto& ms = samples[p.s].members;
        for (int m = 0; m < M; ++m) X(r, m + 1) = logit(ms[m].data[static_cast<std::size_t>(c) * ms[m].h * ms[m].w + p.i]);
        y(r) = set == &pos ? 1.0 : 0.0;
        ++r;
      }
    }
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(M + 1);
    for (int it = 0; it < 100; ++it) {
      const Eigen::VectorXd z = X * beta;
      const Eigen::VectorXd p = z.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
      const Eigen::VectorXd wv = p.unaryExpr([](double v) { return std::max(v * (1.0 - v), 1e-12); });
      Eigen::MatrixXd H = X.transpose() * wv.asDiagonal() * X;
      H.diagonal().array() += l2 * n;
      const Eigen::VectorXd g = X.transpose() * (y - p) - l2 * n * beta;
      const Eigen::VectorXd step = H.ldlt().solve(g);
      beta += step;
      if (step.norm() < 1e-10) break;
    }
    model.bias[c] = beta(0);
    for (int m = 0; m < M; ++m) model.weights[c][m] = beta(m + 1);
  }
  return model;
}

Ensemble::Ensemble(std::vector<std::unique_ptr<Model<float>>> members, Combiner combiner, EvalOptions opts)
    : members_(std::move(members)), combiner_(combiner), opts_(std::move(opts)) {
  if (members_.empty()) throw ConfigError("ensemble needs members");
  std::set<int> scales;
  for (const auto& m : members_) {
    if (!scales.insert(m->spec().detail_scale).second)
      throw ConfigError("two ensemble members at scale " + std::to_string(m->spec().detail_scale));
    if (m->spec().class_count != members_[0]->spec().class_count)
      throw ConfigError("ensemble members disagree on the class count");
  }
  std::sort(members_.begin(), members_.end(),
            [](const auto& a, const auto& b) { return a->spec().detail_scale < b->spec().detail_scale; });
}

Ensemble Ensemble::load(const EnsembleSpec& spec, const EvalOptions& opts) {
  spec.validate();
  std::vector<std::unique_ptr<Model<float>>> ms;
  for (const auto& [scale, path] : spec.members) {
    auto ck = load_checkpoint(path);
    if (ck.model->spec().detail_scale != scale)
      throw ConfigError("checkpoint " + path + " has detail scale " + std::to_string(ck.model->spec().detail_scale) +
                        ", listed at scale " + std::to_string(scale));
    ms.push_back(std::move(ck.model));
  }
  Ensemble e(std::move(ms), spec.combiner, opts);
  if (spec.logistic) e.set_logistic(*spec.logistic);
  return e;
}

std::vector<ProbMap> Ensemble::member_maps(const PyramidImage& slide, const SubImage& region, int size) {
  std::vector<ProbMap> out;
  for (auto& m : members_)
    out.push_back(resample_probs(predict_region(*m, slide, region, size, opts_), m->spec().detail_scale, size));
  return out;
}

Combined Ensemble::predict(const PyramidImage& slide, const SubImage& region, int size) {
  return combine(member_maps(slide, region, size), combiner_, opts_.class_weights, opts_.threshold,
                 logistic_ ? &*logistic_ : nullptr);
}

Labeler Ensemble::labeler() {
  return [this](const PyramidImage& s, const SubImage& r, int size) { return predict(s, r, size).labels; };
}

void Ensemble::fit(const std::vector<const PyramidImage*>& slides, const ValidationSet& vset, int max_pixels,
                   std::uint64_t seed) {
  std::vector<LogisticSample> samples;
  for (const PyramidImage* s : slides)
    for (const auto& r : vset.for_slide(s->id)) samples.push_back({member_maps(*s, r, vset.size), crop_labels(*s, r, vset.size)});
  if (samples.empty()) throw ContractError("no train-split sub-images to fit the logistic combiner");
  logistic_ = fit_logistic(samples, max_pixels, seed);
}

}  // namespace msy
