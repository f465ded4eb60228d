#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "msy/backend/memory.hpp"
#include "msy/models.hpp"

namespace msy {

class TieError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};
class StatsError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Paired per-fold differences (model minus baseline).
struct CvComparison {
  std::vector<double> differences;
  double n_train = 0;
  double n_val = 0;
  bool one_sided = true;  // alternative: mean difference > 0

  static CvComparison from_scores(const std::vector<double>& model, const std::vector<double>& baseline,
                                  double n_train, double n_val, bool one_sided = true);
};

struct TTest {
  double t = 0;
  double p = 1;
  int df = 0;
  double mean = 0;
  double sd = 0;
};

// Inflation of the standard error over the naive sqrt(1/n) for overlapping
// CV training sets.
double correction_factor(int n, double n_train, double n_val);

// t = mean / sqrt((1/n + n_val/n_train) var), unbiased variance, Student t
// with n - 1 degrees of freedom. Zero variance raises TieError.
TTest corrected_t_test(const CvComparison& cmp);

// Benjamini-Hochberg step-up; true marks a rejected hypothesis.
std::vector<bool> bh_stepup(const std::vector<double>& pvalues, double alpha = 0.05);

// Power of the one-sided paired t-test at effect `delta` with pair sd
// correction_factor * sqrt(2) * sd_single, via the noncentral t.
double power_estimate(double delta, double sd_single = 0.045, int n = 5, double n_train = 40, double n_val = 10,
                      double alpha = 0.05);

// Mean and half-width of the two-sided t confidence interval.
struct Interval {
  double mean = 0, half_width = 0;
  double lo() const { return mean - half_width; }
  double hi() const { return mean + half_width; }
};
Interval t_interval(const std::vector<double>& xs, double level = 0.95);

// Per-fold mean over repeated runs, ordered by fold index. Rows are
// (fold, score); every fold present must be repeated the same number of times.
std::vector<double> average_repeats(std::vector<std::pair<int, double>> rows);

struct MemPoint {
  int batch_size = 0;
  double memory_gb = 0;
};

struct MemProbeSeries {
  std::string arch;
  std::vector<MemPoint> points;
  double slope = 0;      // GB per patch in the batch
  double intercept = 0;  // overhead GB
  double r2 = 0;
  double slope_se = 0;
};

// Ordinary least squares of memory on batch size.
MemProbeSeries mem_regression(std::vector<MemPoint> points);

// Peak memory of one forward+backward pass per batch size, as seen by the
// meter (model parameters included).
MemProbeSeries memprobe(const ArchitectureSpec& spec, const std::vector<int>& batch_sizes, int patch_size,
                        MemoryMeter& meter, std::uint64_t seed = 0);

}  // namespace msy
