#include "msy/backend/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace msy {

namespace {

double eval_scalar(const std::function<Var<double>()>& f, const std::string& where) {
  NoGradGuard guard;
  const Var<double> out = f();
  if (out.value().numel() != 1) throw ContractError("grad_check: function must return a scalar");
  const double v = out.value()[0];
  if (!std::isfinite(v)) throw GradCheckError("grad_check: non-finite function value " + where);
  return v;
}

}  // namespace

GradCheckReport grad_check(const std::function<Var<double>()>& f, const std::vector<NamedVar>& params,
                           const GradCheckOptions& opts) {
  if (!(opts.eps >= 1e-6 && opts.eps <= 1e-2)) {
    throw ContractError("grad_check: eps must lie in [1e-6, 1e-2], got " + std::to_string(opts.eps));
  }
  for (const auto& p : params) {
    p.var.node()->requires_grad = true;
    p.var.node()->grad = Tensor<double>();
  }
  Var<double> out = f();
  if (out.value().numel() != 1) throw ContractError("grad_check: function must return a scalar");
  if (!std::isfinite(out.value()[0])) throw GradCheckError("grad_check: non-finite function value at x");
  out.backward();

  GradCheckReport report;
  std::mt19937 rng(opts.seed);
  for (const auto& p : params) {
    Tensor<double>& x = p.var.node()->value;
    const Tensor<double> analytic =
        p.var.node()->grad.empty() ? Tensor<double>(x.shape()) : p.var.node()->grad;
    std::vector<std::size_t> idx(x.numel());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (opts.max_entries_per_param > 0 && idx.size() > opts.max_entries_per_param) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opts.max_entries_per_param);
    }
    for (const std::size_t i : idx) {
      const double a = analytic[i];
      if (!std::isfinite(a)) {
        throw GradCheckError("grad_check: non-finite analytic gradient in " + p.name + "[" + std::to_string(i) + "]");
      }
      const double orig = x[i];
      const std::string where = "perturbing " + p.name + "[" + std::to_string(i) + "]";
      x[i] = orig + opts.eps;
      const double up = eval_scalar(f, where);
      x[i] = orig - opts.eps;
      const double down = eval_scalar(f, where);
      x[i] = orig;
      const double numeric = (up - down) / (2.0 * opts.eps);
      const double denom = std::max({std::abs(a), std::abs(numeric), opts.abs_floor});
      const double rel = std::abs(a - numeric) / denom;
      ++report.checked;
      if (rel > report.max_rel_error || report.worst_param.empty()) {
        report.max_rel_error = std::max(report.max_rel_error, rel);
        if (rel >= report.max_rel_error) {
          report.worst_param = p.name;
          report.worst_index = i;
          report.analytic = a;
          report.numeric = numeric;
        }
      }
    }
  }
  return report;
}

}  // namespace msy
