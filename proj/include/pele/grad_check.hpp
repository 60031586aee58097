#pragma once

#include <functional>
#include <string>
#include <vector>

#include "pele/tensor.hpp"

namespace pele {

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  std::string worst;  // "leaf[i] elem j" locator for the largest error
};

// Central-difference check of reverse-mode gradients. f() must be a
// deterministic scalar function of the current leaf values; it is re-run
// under elementwise +/-h perturbations and compared against one taped
// backward pass. Relative error divides by max(|analytic|, |numeric|, 1e-12).
GradCheckReport grad_check(const std::function<Tensor()>& f,
                           const std::vector<Tensor>& leaves,
                           double h = 1e-6, double tol = 1e-4);

}  // namespace pele
