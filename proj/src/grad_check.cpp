#include "pele/grad_check.hpp"

#include <cmath>

namespace pele {

GradCheckReport grad_check(const std::function<Tensor()>& f,
                           const std::vector<Tensor>& leaves, double h,
                           double tol) {
  std::vector<std::vector<double>> analytic;
  {
    for (auto leaf : leaves) leaf.zero_grad();
    Tape tape;
    Tensor loss = f();
    if (!loss.is_scalar()) throw ShapeError("grad_check: f must return a scalar");
    tape.backward(loss);
    for (const auto& leaf : leaves) analytic.push_back(leaf.grad());
  }

  GradCheckReport report;
  report.pass = true;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor leaf = leaves[li];
    auto& vals = leaf.values();
    for (std::size_t j = 0; j < vals.size(); ++j) {
      const double orig = vals[j];
      vals[j] = orig + h;
      const double fp = f().item();
      vals[j] = orig - h;
      const double fm = f().item();
      vals[j] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw NumericError("grad_check: non-finite function value under perturbation");
      }
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[li][j];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-12});
      const double rel = std::fabs(a - numeric) / denom;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst = "leaf[" + std::to_string(li) + "] elem " + std::to_string(j);
      }
    }
  }
  report.pass = report.max_rel_err < tol;
  return report;
}

}  // namespace pele
