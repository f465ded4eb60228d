#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "msy/backend/autograd.hpp"

namespace msy {

class GradCheckError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedVar {
  std::string name;
  Var<double> var;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

struct GradCheckOptions {
  double eps = 1e-5;
  // Floor of the relative-error denominator, so entries whose true gradient
  // is zero are compared in absolute terms.
  double abs_floor = 1e-6;
  // Check at most this many randomly chosen entries per parameter (0 = all).
  std::size_t max_entries_per_param = 0;
  unsigned seed = 0;
};

// Compares the backprop gradient of the scalar function f with central finite
// differences over every listed parameter. f must rebuild its graph from the
// parameters on each call.
GradCheckReport grad_check(const std::function<Var<double>()>& f, const std::vector<NamedVar>& params,
                           const GradCheckOptions& opts = {});

inline double grad_check(const std::function<Var<double>()>& f, const std::vector<NamedVar>& params, double eps) {
  GradCheckOptions o;
  o.eps = eps;
  return grad_check(f, params, o).max_rel_error;
}

}  // namespace msy
