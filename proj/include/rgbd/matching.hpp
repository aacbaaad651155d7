#pragma once

#include <vector>

#include "rgbd/tensor.hpp"

namespace rgbd {

struct MatchResult {
    std::vector<int> assignment; // gt index -> query index, injective
    double total_cost = 0.0;
};

// Exact minimum-cost assignment of every GT row to a distinct query column
// (n_gt <= n_query), O(n^3) shortest augmenting paths. Among equal-cost
// optima the assignment with the lowest query indices in GT order wins.
MatchResult hungarian_match(const Tensor& cost);

} // namespace rgbd
