#pragma once

#include <array>
#include <string>
#include <unordered_set>
#include <vector>

#include "seqdiff/tensor.hpp"

namespace seqdiff {

inline constexpr std::array<int, 3> kCutoffs = {5, 10, 20};

/// 1-based rank of `target` among non-excluded real items: items with a higher score,
/// plus tied items with a smaller ID, come first. Padding and [unk] never count.
int rank_of_target(const Vector<double>& scores, int target, const std::unordered_set<int>& excluded = {});

inline double hr_at_k(int rank, int k) { return rank >= 1 && rank <= k ? 1.0 : 0.0; }
double ndcg_at_k(int rank, int k);

struct MetricsReport {
  std::array<double, kCutoffs.size()> hr{};
  std::array<double, kCutoffs.size()> ndcg{};
  std::size_t users = 0;
  std::vector<int> ranks;  // per evaluated user, in evaluation order

  double hr_at(int k) const;
  double ndcg_at(int k) const;

  /// Means over `ranks`.
  static MetricsReport from_ranks(std::vector<int> ranks, bool keep_ranks = false);

  std::string csv_header() const;
  std::string csv_row() const;
  std::string to_json() const;
};

}  // namespace seqdiff
