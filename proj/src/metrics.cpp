#include "pele/metrics.hpp"

namespace pele {

EditCounts edit_distance(const std::vector<int>& ref, const std::vector<int>& hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  // op: 0 = match/sub (diagonal), 1 = deletion (up), 2 = insertion (left)
  std::vector<std::size_t> dist((n + 1) * (m + 1), 0);
  std::vector<unsigned char> op((n + 1) * (m + 1), 0);
  auto at = [m](std::size_t i, std::size_t j) { return i * (m + 1) + j; };

  for (std::size_t i = 1; i <= n; ++i) {
    dist[at(i, 0)] = i;
    op[at(i, 0)] = 1;
  }
  for (std::size_t j = 1; j <= m; ++j) {
    dist[at(0, j)] = j;
    op[at(0, j)] = 2;
  }
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t diag = dist[at(i - 1, j - 1)] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      const std::size_t del = dist[at(i - 1, j)] + 1;
      const std::size_t ins = dist[at(i, j - 1)] + 1;
      std::size_t best = diag;
      unsigned char o = 0;
      if (del < best) {
        best = del;
        o = 1;
      }
      if (ins < best) {
        best = ins;
        o = 2;
      }
      dist[at(i, j)] = best;
      op[at(i, j)] = o;
    }
  }

  EditCounts c;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    switch (op[at(i, j)]) {
      case 0:
        if (ref[i - 1] != hyp[j - 1]) ++c.sub;
        --i;
        --j;
        break;
      case 1:
        ++c.del;
        --i;
        break;
      default:
        ++c.ins;
        --j;
        break;
    }
  }
  return c;
}

double error_rate(
    const std::vector<std::pair<std::vector<int>, std::vector<int>>>& pairs) {
  std::size_t errors = 0, ref_tokens = 0;
  for (const auto& [ref, hyp] : pairs) {
    errors += edit_distance(ref, hyp).total();
    ref_tokens += ref.size();
  }
  if (ref_tokens == 0) throw ConfigError("error_rate: all references are empty");
  return static_cast<double>(errors) / static_cast<double>(ref_tokens);
}

}  // namespace pele
