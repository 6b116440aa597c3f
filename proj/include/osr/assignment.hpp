#pragma once

#include <vector>

#include "osr/common.hpp"

namespace osr {

// sigma[i] = column assigned to row i.
struct MatchAssignment {
  std::vector<int> sigma;
  double total_cost = 0.0;
};

// Exact minimum-cost perfect matching on a square cost matrix (O(K^3) shortest augmenting paths
// with potentials). Among tied optima the lexicographically smallest sigma is returned.
// Throws NumericError on non-finite entries, ConfigError on non-square input.
MatchAssignment hungarian(const MatD& cost);

struct SlotMatch {
  MatchAssignment assignment;  // total_cost = -(total cosine similarity)
  double total_similarity = 0.0;
  int zero_norm_slots = 0;  // slots whose cosines were treated as 0
};

// Pairs slot i of `a` with slot sigma(i) of `b` maximizing total cosine similarity.
template <typename T>
SlotMatch match_slots(const Mat<T>& a, const Mat<T>& b);

std::vector<int> inverse_permutation(const std::vector<int>& sigma);

}  // namespace osr
