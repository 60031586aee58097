#pragma once

#include <vector>

#include "pele/model.hpp"

namespace pele {

struct EditCounts {
  std::size_t sub = 0, del = 0, ins = 0;
  std::size_t total() const { return sub + del + ins; }
};

// Unit-cost Levenshtein counts; ties in the traceback prefer substitution
// over deletion over insertion.
EditCounts edit_distance(const std::vector<int>& ref, const std::vector<int>& hyp);

// (S+D+I) / total reference tokens over all pairs; may exceed 1.
double error_rate(const std::vector<std::pair<std::vector<int>, std::vector<int>>>& pairs);

}  // namespace pele
