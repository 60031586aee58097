#include "pele/ctc.hpp"

#include <cmath>
#include <limits>

namespace pele {

namespace {

constexpr double kLogZero = -1e30;

double log_add(double a, double b) {
  if (a < b) std::swap(a, b);
  if (b <= kLogZero * 0.5) return a;  // adding an impossible state
  return a + std::log1p(std::exp(b - a));
}

void check_problem(const Tensor& log_probs, const std::vector<int>& target) {
  if (log_probs.rank() != 2) throw ShapeError("ctc: log_probs must be [T, V+1]");
  const int n_labels = static_cast<int>(log_probs.cols());
  if (n_labels < 2) throw ShapeError("ctc: need at least one token plus blank");
  for (int t : target) {
    if (t < 0 || t >= n_labels - 1) {
      throw ShapeError("ctc: target symbol out of range (blank is reserved)");
    }
  }
}

// Minimum frames needed: one per target symbol plus one separating blank per
// adjacent repeat.
std::size_t min_frames(const std::vector<int>& target) {
  std::size_t need = target.size();
  for (std::size_t i = 1; i < target.size(); ++i) {
    if (target[i] == target[i - 1]) ++need;
  }
  return need;
}

}  // namespace

std::vector<int> ctc_collapse(const std::vector<int>& alignment, int blank) {
  std::vector<int> out;
  int prev = std::numeric_limits<int>::min();  // sentinel distinct from any symbol
  for (int s : alignment) {
    if (s != prev) {
      out.push_back(s);
      prev = s;
    }
  }
  std::vector<int> cleaned;
  for (int s : out) {
    if (s != blank) cleaned.push_back(s);
  }
  return cleaned;
}

double CtcLoss::value() const {
  return feasible ? loss.item() : std::numeric_limits<double>::infinity();
}

CtcLoss ctc_nll(const Tensor& log_probs, const std::vector<int>& target) {
  check_problem(log_probs, target);
  const std::size_t t_len = log_probs.rows();
  const std::size_t n_labels = log_probs.cols();
  const int blank = static_cast<int>(n_labels) - 1;

  CtcLoss result;
  if (min_frames(target) > t_len) return result;  // infeasible, flagged

  // Blank-augmented label sequence: blank, y1, blank, y2, ..., blank.
  const std::size_t s_len = 2 * target.size() + 1;
  std::vector<int> labels(s_len, blank);
  for (std::size_t i = 0; i < target.size(); ++i) labels[2 * i + 1] = target[i];

  const auto& x = log_probs.values();
  auto lp = [&](std::size_t t, int k) { return x[t * n_labels + static_cast<std::size_t>(k)]; };

  auto alpha = std::make_shared<std::vector<double>>(t_len * s_len, kLogZero);
  auto a = [&](std::size_t t, std::size_t s) -> double& { return (*alpha)[t * s_len + s]; };

  a(0, 0) = lp(0, labels[0]);
  if (s_len > 1) a(0, 1) = lp(0, labels[1]);
  for (std::size_t t = 1; t < t_len; ++t) {
    for (std::size_t s = 0; s < s_len; ++s) {
      double acc = a(t - 1, s);
      if (s >= 1) acc = log_add(acc, a(t - 1, s - 1));
      if (s >= 2 && labels[s] != blank && labels[s] != labels[s - 2]) {
        acc = log_add(acc, a(t - 1, s - 2));
      }
      a(t, s) = acc <= kLogZero * 0.5 ? kLogZero : acc + lp(t, labels[s]);
    }
  }
  double log_p = a(t_len - 1, s_len - 1);
  if (s_len > 1) log_p = log_add(log_p, a(t_len - 1, s_len - 2));
  if (log_p <= kLogZero * 0.5) return result;  // no surviving path
  log_p = std::min(log_p, 0.0);  // guard rounding above certainty

  auto out = Tensor::scalar(-log_p);
  if (Tape::active() != nullptr && log_probs.requires_grad()) {
    out.set_requires_grad(true);
    auto xn = log_probs.handle();
    auto on = out.handle();
    Tape::active()->record(on, [xn, on, alpha, labels, t_len, s_len, n_labels, blank, log_p] {
      if (!xn->requires_grad) return;
      const double g = on->grad[0];
      const auto& xv = xn->values;
      auto lpv = [&](std::size_t t, int k) {
        return xv[t * n_labels + static_cast<std::size_t>(k)];
      };
      // Suffix DP mirrors alpha; beta(t,s) includes the emission at t.
      std::vector<double> beta(t_len * s_len, kLogZero);
      auto b = [&](std::size_t t, std::size_t s) -> double& { return beta[t * s_len + s]; };
      b(t_len - 1, s_len - 1) = lpv(t_len - 1, labels[s_len - 1]);
      if (s_len > 1) b(t_len - 1, s_len - 2) = lpv(t_len - 1, labels[s_len - 2]);
      for (std::size_t t = t_len - 1; t-- > 0;) {
        for (std::size_t s = 0; s < s_len; ++s) {
          double acc = b(t + 1, s);
          if (s + 1 < s_len) acc = log_add(acc, b(t + 1, s + 1));
          if (s + 2 < s_len && labels[s + 2] != blank && labels[s + 2] != labels[s]) {
            acc = log_add(acc, b(t + 1, s + 2));
          }
          b(t, s) = acc <= kLogZero * 0.5 ? kLogZero : acc + lpv(t, labels[s]);
        }
      }
      // d(-logP)/d x_t(k) = -sum_{s: labels[s]=k} exp(alpha+beta-x-logP).
      if (xn->grad.empty()) xn->grad.assign(xv.size(), 0.0);
      auto& gx = xn->grad;
      for (std::size_t t = 0; t < t_len; ++t) {
        std::vector<double> acc(n_labels, kLogZero);
        for (std::size_t s = 0; s < s_len; ++s) {
          const double ab = (*alpha)[t * s_len + s] + beta[t * s_len + s];
          if (ab <= kLogZero * 0.5) continue;
          auto& slot = acc[static_cast<std::size_t>(labels[s])];
          slot = log_add(slot, ab);
        }
        for (std::size_t k = 0; k < n_labels; ++k) {
          if (acc[k] <= kLogZero * 0.5) continue;
          const double xk = lpv(t, static_cast<int>(k));
          gx[t * n_labels + k] += -g * std::exp(acc[k] - xk - log_p);
        }
      }
    });
  }
  result.loss = out;
  result.feasible = true;
  return result;
}

double ctc_brute_force(const Tensor& log_probs, const std::vector<int>& target) {
  check_problem(log_probs, target);
  const std::size_t t_len = log_probs.rows();
  const std::size_t n_labels = log_probs.cols();
  const int blank = static_cast<int>(n_labels) - 1;

  double total = 0.0;
  for (std::size_t t = 0, paths = 1; t < t_len; ++t) {
    paths *= n_labels;
    if (paths > 1000000) throw ShapeError("ctc_brute_force: instance too large");
  }

  std::vector<int> align(t_len, 0);
  const auto& x = log_probs.values();
  while (true) {
    if (ctc_collapse(align, blank) == target) {
      double lp = 0.0;
      for (std::size_t t = 0; t < t_len; ++t) lp += x[t * n_labels + align[t]];
      total += std::exp(lp);
    }
    std::size_t pos = 0;
    while (pos < t_len && ++align[pos] == static_cast<int>(n_labels)) {
      align[pos] = 0;
      ++pos;
    }
    if (pos == t_len) break;
  }
  if (total <= 0.0) return std::numeric_limits<double>::infinity();
  return -std::log(total);
}

}  // namespace pele
