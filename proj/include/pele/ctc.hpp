#pragma once

#include <vector>

#include "pele/tensor.hpp"

namespace pele {

// Sequence loss over blank-augmented frame alignments. log_probs is
// [T, V+1] with rows already log-normalized and blank at index V; targets
// range over [0, V).

// Merge adjacent repeats, then delete blanks.
std::vector<int> ctc_collapse(const std::vector<int>& alignment, int blank);

struct CtcLoss {
  Tensor loss;            // defined only when feasible
  bool feasible = false;  // false when no alignment can emit the target
  double value() const;   // +inf marker when infeasible
};

// Forward dynamic program in log space (log-sum-exp, -1e30 floor for
// impossible states). Differentiable w.r.t. log_probs. A target that cannot
// fit in T frames (length plus required repeat separators) is flagged as
// infeasible rather than clamped.
CtcLoss ctc_nll(const Tensor& log_probs, const std::vector<int>& target);

// Exponential enumeration oracle: sums the probability of every alignment
// that collapses to the target. Requires (V+1)^T <= 1e6. Returns the NLL,
// +inf when no alignment matches.
double ctc_brute_force(const Tensor& log_probs, const std::vector<int>& target);

}  // namespace pele
