#pragma once

#include <cstddef>
#include <vector>

#include "seqdiff/random.hpp"

namespace seqdiff {

/// Loss-aware diffusion-step sampler. Keeps the most recent `history` losses per step and,
/// once every step has a full buffer, samples n with probability proportional to
/// sqrt(mean of squared recorded losses). Uniform until then.
class ImportanceSampler {
 public:
  static constexpr int kDefaultHistory = 10;

  explicit ImportanceSampler(int steps, int history = kDefaultHistory);

  int steps() const { return steps_; }
  int history_depth() const { return depth_; }

  /// Probability of step n, 1 <= n <= N.
  double probability(int n) const;
  const std::vector<double>& probabilities() const { return probs_; }

  bool warm() const { return warm_count_ == steps_; }
  bool warm(int n) const;

  int sample(RandomStream& rng) const;

  /// Records an observed loss for step n, evicting the oldest beyond the history depth.
  void update(int n, double loss);

  /// Recorded losses of step n, oldest first.
  std::vector<double> history(int n) const;
  void set_history(int n, const std::vector<double>& values);

  friend bool operator==(const ImportanceSampler& a, const ImportanceSampler& b);

 private:
  void check(int n) const;
  void recompute();

  int steps_;
  int depth_;
  int warm_count_ = 0;
  std::vector<std::vector<double>> ring_;  // per step, capacity depth_
  std::vector<std::size_t> head_;          // next write slot per step
  std::vector<double> probs_;              // index n - 1
};

}  // namespace seqdiff
