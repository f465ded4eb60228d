#include "msy/stats.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include <boost/math/distributions/non_central_t.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "msy/backend/ops.hpp"

namespace msy {

namespace bm = boost::math;

CvComparison CvComparison::from_scores(const std::vector<double>& model, const std::vector<double>& baseline,
                                       double n_train, double n_val, bool one_sided) {
  if (model.size() != baseline.size()) {
    throw StatsError("paired comparison needs one score per fold for both models (" + std::to_string(model.size()) +
                     " vs " + std::to_string(baseline.size()) + ")");
  }
  CvComparison c;
  for (std::size_t i = 0; i < model.size(); ++i) c.differences.push_back(model[i] - baseline[i]);
  c.n_train = n_train;
  c.n_val = n_val;
  c.one_sided = one_sided;
  return c;
}

double correction_factor(int n, double n_train, double n_val) {
  if (n < 1 || !(n_train > 0) || !(n_val >= 0)) throw StatsError("correction factor needs n >= 1 and n_train > 0");
  return std::sqrt(1.0 / n + n_val / n_train) / std::sqrt(1.0 / n);
}

TTest corrected_t_test(const CvComparison& cmp) {
  const auto& d = cmp.differences;
  const int n = static_cast<int>(d.size());
  if (n < 2) throw StatsError("corrected t-test needs at least 2 folds");
  if (!(cmp.n_train > 0) || !(cmp.n_val >= 0)) throw StatsError("n_train must be > 0 and n_val >= 0");
  double scale = 0;
  for (double x : d) {
    if (!std::isfinite(x)) throw StatsError("non-finite fold difference");
    scale = std::max(scale, std::abs(x));
  }
  TTest r;
  r.df = n - 1;
  r.mean = std::accumulate(d.begin(), d.end(), 0.0) / n;
  double ss = 0;
  for (double x : d) ss += (x - r.mean) * (x - r.mean);
  const double var = ss / (n - 1);
  // Differences equal up to rounding count as a tie.
  if (var <= std::pow(1e-12 * std::max(scale, 1e-300), 2)) {
    throw TieError("all fold differences are equal (" + std::to_string(r.mean) + "); exact tie, no p-value");
  }
  r.sd = std::sqrt(var);
  r.t = r.mean / std::sqrt((1.0 / n + cmp.n_val / cmp.n_train) * var);
  const bm::students_t dist(r.df);
  r.p = cmp.one_sided ? bm::cdf(bm::complement(dist, r.t)) : 2.0 * bm::cdf(bm::complement(dist, std::abs(r.t)));
  return r;
}

std::vector<bool> bh_stepup(const std::vector<double>& p, double alpha) {
  const std::size_t m = p.size();
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
  std::size_t k = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (!(p[order[i]] >= 0 && p[order[i]] <= 1)) throw StatsError("p-values must lie in [0, 1]");
    if (p[order[i]] <= static_cast<double>(i + 1) * alpha / static_cast<double>(m)) k = i + 1;
  }
  std::vector<bool> out(m, false);
  for (std::size_t i = 0; i < k; ++i) out[order[i]] = true;
  return out;
}

double power_estimate(double delta, double sd_single, int n, double n_train, double n_val, double alpha) {
  if (n < 2 || !(sd_single > 0) || !(alpha > 0 && alpha < 1)) throw StatsError("power needs n >= 2, sd > 0, 0 < alpha < 1");
  const double sd = correction_factor(n, n_train, n_val) * std::sqrt(2.0) * sd_single;
  const double df = n - 1;
  const double crit = bm::quantile(bm::complement(bm::students_t(df), alpha));
  const double ncp = delta / (sd / std::sqrt(static_cast<double>(n)));
  if (ncp == 0) return alpha;
  return bm::cdf(bm::complement(bm::non_central_t(df, ncp), crit));
}

Interval t_interval(const std::vector<double>& xs, double level) {
  const int n = static_cast<int>(xs.size());
  if (n < 1) throw StatsError("interval of an empty sample");
  Interval r;
  r.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  if (n < 2) return r;
  double ss = 0;
  for (double x : xs) ss += (x - r.mean) * (x - r.mean);
  const double q = bm::quantile(bm::complement(bm::students_t(n - 1), (1.0 - level) / 2));
  r.half_width = q * std::sqrt(ss / (n - 1) / n);
  return r;
}

std::vector<double> average_repeats(std::vector<std::pair<int, double>> rows) {
  if (rows.empty()) throw StatsError("no fold scores to average");
  std::map<int, std::vector<double>> by_fold;
  for (const auto& [fold, score] : rows) by_fold[fold].push_back(score);
  const std::size_t repeats = by_fold.begin()->second.size();
  std::vector<double> out;
  for (const auto& [fold, scores] : by_fold) {
    if (scores.size() != repeats) {
      throw StatsError("fold " + std::to_string(fold) + " has " + std::to_string(scores.size()) + " repeats, expected " +
                       std::to_string(repeats));
    }
    out.push_back(std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(repeats));
  }
  return out;
}

MemProbeSeries mem_regression(std::vector<MemPoint> pts) {
  std::set<int> distinct;
  for (const auto& p : pts) distinct.insert(p.batch_size);
  if (pts.size() < 3 || distinct.size() < 2) throw StatsError("memory regression needs >= 3 points over >= 2 batch sizes");
  if (distinct.size() < 3) throw StatsError("memory regression needs >= 3 distinct batch sizes");
  const double n = static_cast<double>(pts.size());
  double mx = 0, my = 0;
  for (const auto& p : pts) {
    mx += p.batch_size;
    my += p.memory_gb;
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0, syy = 0;
  for (const auto& p : pts) {
    sxx += (p.batch_size - mx) * (p.batch_size - mx);
    sxy += (p.batch_size - mx) * (p.memory_gb - my);
    syy += (p.memory_gb - my) * (p.memory_gb - my);
  }
  MemProbeSeries s;
  s.slope = sxy / sxx;
  s.intercept = my - s.slope * mx;
  double ssr = 0;
  for (const auto& p : pts) {
    const double e = p.memory_gb - (s.intercept + s.slope * p.batch_size);
    ssr += e * e;
  }
  s.r2 = syy > 0 ? 1.0 - ssr / syy : 1.0;
  s.slope_se = pts.size() > 2 ? std::sqrt(ssr / (n - 2) / sxx) : 0.0;
  s.points = std::move(pts);
  return s;
}

MemProbeSeries memprobe(const ArchitectureSpec& spec, const std::vector<int>& batch_sizes, int patch_size,
                        MemoryMeter& meter, std::uint64_t seed) {
  auto model = build<float>(spec, seed);
  model->set_training(true);
  std::vector<MemPoint> pts;
  for (int b : batch_sizes) {
    if (b < 1) throw StatsError("batch sizes must be >= 1");
    ModelInput<float> in;
    for (int s : spec.required_scales()) in.images[s] = Tensor<float>(Shape{b, 3, patch_size, patch_size}, 0.1f);
    Tensor<float> target(Shape{b, spec.class_count, patch_size, patch_size});
    std::vector<double> w(spec.class_count, 1.0);
    model->store().zero_grad();
    meter.reset();
    {
      const auto out = model->forward(in);
      Var<float> loss = ops::weighted_bce(out.seg, target, w);
      loss.backward();
    }
    pts.push_back({b, meter.peak_bytes() / 1e9});
    model->store().zero_grad();
  }
  MemProbeSeries s = mem_regression(pts);
  s.arch = spec.name;
  return s;
}

}  // namespace msy
