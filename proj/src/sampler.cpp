#include "seqdiff/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace seqdiff {

ImportanceSampler::ImportanceSampler(int steps, int history)
    : steps_(steps), depth_(history) {
  if (steps < 1) throw std::invalid_argument("sampler needs at least one step");
  if (history < 1) throw std::invalid_argument("history depth must be positive");
  ring_.assign(static_cast<std::size_t>(steps), {});
  head_.assign(static_cast<std::size_t>(steps), 0);
  probs_.assign(static_cast<std::size_t>(steps), 1.0 / steps);
}

void ImportanceSampler::check(int n) const {
  if (n < 1 || n > steps_) throw std::out_of_range("step " + std::to_string(n) + " outside [1, " + std::to_string(steps_) + "]");
}

double ImportanceSampler::probability(int n) const {
  check(n);
  return probs_[static_cast<std::size_t>(n - 1)];
}

bool ImportanceSampler::warm(int n) const {
  check(n);
  return static_cast<int>(ring_[static_cast<std::size_t>(n - 1)].size()) == depth_;
}

int ImportanceSampler::sample(RandomStream& rng) const {
  const double u = rng.uniform();
  double acc = 0.0;
  for (int n = 1; n <= steps_; ++n) {
    acc += probs_[static_cast<std::size_t>(n - 1)];
    if (u < acc) return n;
  }
  // rounding can leave the cumulative sum just short of 1
  for (int n = steps_; n >= 1; --n)
    if (probs_[static_cast<std::size_t>(n - 1)] > 0.0) return n;
  return steps_;
}

void ImportanceSampler::update(int n, double loss) {
  check(n);
  auto& buf = ring_[static_cast<std::size_t>(n - 1)];
  auto& head = head_[static_cast<std::size_t>(n - 1)];
  if (static_cast<int>(buf.size()) < depth_) {
    buf.push_back(loss);
    head = buf.size() % static_cast<std::size_t>(depth_);
    if (static_cast<int>(buf.size()) == depth_) ++warm_count_;
  } else {
    buf[head] = loss;
    head = (head + 1) % static_cast<std::size_t>(depth_);
  }
  if (warm()) recompute();
}

std::vector<double> ImportanceSampler::history(int n) const {
  check(n);
  const auto& buf = ring_[static_cast<std::size_t>(n - 1)];
  if (static_cast<int>(buf.size()) < depth_) return buf;
  const auto head = head_[static_cast<std::size_t>(n - 1)];
  std::vector<double> out;
  out.reserve(buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) out.push_back(buf[(head + i) % buf.size()]);
  return out;
}

void ImportanceSampler::set_history(int n, const std::vector<double>& values) {
  check(n);
  auto& buf = ring_[static_cast<std::size_t>(n - 1)];
  if (static_cast<int>(buf.size()) == depth_) --warm_count_;
  buf.clear();
  head_[static_cast<std::size_t>(n - 1)] = 0;
  const std::size_t skip = values.size() > static_cast<std::size_t>(depth_) ? values.size() - depth_ : 0;
  for (std::size_t i = skip; i < values.size(); ++i) update(n, values[i]);
  if (!warm()) std::fill(probs_.begin(), probs_.end(), 1.0 / steps_);
}

void ImportanceSampler::recompute() {
  std::vector<double> w(static_cast<std::size_t>(steps_));
  double max_w = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    // chronological order so a restored sampler reproduces the same sums
    double sq = 0.0;
    const auto& buf = ring_[i];
    for (std::size_t j = 0; j < buf.size(); ++j) {
      const double v = buf[(head_[i] + j) % buf.size()];
      sq += v * v;
    }
    w[i] = std::sqrt(sq / static_cast<double>(ring_[i].size()));
    max_w = std::max(max_w, w[i]);
  }
  if (!(max_w > 0.0) || !std::isfinite(max_w)) {
    std::fill(probs_.begin(), probs_.end(), 1.0 / steps_);
    return;
  }
  // keep every step reachable
  const double floor = 1e-12 * max_w;
  double total = 0.0;
  for (auto& v : w) {
    v = std::max(v, floor);
    total += v;
  }
  for (std::size_t i = 0; i < w.size(); ++i) probs_[i] = w[i] / total;
}

bool operator==(const ImportanceSampler& a, const ImportanceSampler& b) {
  if (a.steps_ != b.steps_ || a.depth_ != b.depth_ || a.probs_ != b.probs_) return false;
  for (int n = 1; n <= a.steps_; ++n)
    if (a.history(n) != b.history(n)) return false;
  return true;
}

}  // namespace seqdiff
