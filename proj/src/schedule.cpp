#include "seqdiff/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace seqdiff {

std::string to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::Sqrt:
      return "sqrt";
    case ScheduleKind::Cosine:
      return "cosine";
    case ScheduleKind::Linear:
      return "linear";
  }
  return "unknown";
}

ScheduleKind parse_schedule_kind(std::string_view name) {
  if (name == "sqrt") return ScheduleKind::Sqrt;
  if (name == "cosine") return ScheduleKind::Cosine;
  if (name == "linear") return ScheduleKind::Linear;
  throw std::invalid_argument("unknown schedule kind '" + std::string(name) + "'");
}

ScheduleTable ScheduleTable::from_alpha_bar(std::vector<double> alpha_bar_1_to_n) {
  if (alpha_bar_1_to_n.empty()) throw std::invalid_argument("schedule needs at least one step");
  ScheduleTable t;
  t.alpha_bar_.reserve(alpha_bar_1_to_n.size() + 1);
  t.alpha_bar_.push_back(1.0);
  t.alpha_bar_.insert(t.alpha_bar_.end(), alpha_bar_1_to_n.begin(), alpha_bar_1_to_n.end());
  const std::size_t n = t.alpha_bar_.size();
  t.beta_.assign(n, 0.0);
  for (std::size_t i = 1; i < n; ++i) {
    if (!(t.alpha_bar_[i] > 0.0 && t.alpha_bar_[i] < t.alpha_bar_[i - 1]))
      throw std::invalid_argument("alpha_bar must be positive and strictly decreasing");
    t.beta_[i] = 1.0 - t.alpha_bar_[i] / t.alpha_bar_[i - 1];
  }
  t.derive();
  return t;
}

ScheduleTable ScheduleTable::from_beta(std::vector<double> beta_1_to_n) {
  if (beta_1_to_n.empty()) throw std::invalid_argument("schedule needs at least one step");
  ScheduleTable t;
  t.beta_.reserve(beta_1_to_n.size() + 1);
  t.beta_.push_back(0.0);
  for (double b : beta_1_to_n) {
    if (!(b > 0.0 && b < 1.0)) throw std::invalid_argument("beta must lie in (0, 1)");
    t.beta_.push_back(b);
  }
  t.alpha_bar_.assign(t.beta_.size(), 1.0);
  for (std::size_t i = 1; i < t.beta_.size(); ++i) t.alpha_bar_[i] = t.alpha_bar_[i - 1] * (1.0 - t.beta_[i]);
  t.derive();
  return t;
}

void ScheduleTable::derive() {
  const std::size_t n = beta_.size();
  alpha_.assign(n, 1.0);
  beta_tilde_.assign(n, 0.0);
  c0_.assign(n, 0.0);
  cn_.assign(n, 0.0);
  for (std::size_t i = 1; i < n; ++i) {
    alpha_[i] = 1.0 - beta_[i];
    const double one_minus = 1.0 - alpha_bar_[i];
    beta_tilde_[i] = (1.0 - alpha_bar_[i - 1]) / one_minus * beta_[i];
    c0_[i] = std::sqrt(alpha_bar_[i - 1]) * beta_[i] / one_minus;
    cn_[i] = std::sqrt(alpha_[i]) * (1.0 - alpha_bar_[i - 1]) / one_minus;
  }
}

void ScheduleTable::check_step(int n) const {
  if (n < 1 || n > steps())
    throw std::out_of_range("diffusion step " + std::to_string(n) + " outside [1, " + std::to_string(steps()) + "]");
}

double ScheduleTable::beta(int n) const {
  check_step(n);
  return beta_[static_cast<std::size_t>(n)];
}

double ScheduleTable::alpha(int n) const {
  check_step(n);
  return alpha_[static_cast<std::size_t>(n)];
}

double ScheduleTable::alpha_bar(int n) const {
  if (n == 0) return 1.0;
  check_step(n);
  return alpha_bar_[static_cast<std::size_t>(n)];
}

double ScheduleTable::beta_tilde(int n) const {
  check_step(n);
  return beta_tilde_[static_cast<std::size_t>(n)];
}

PosteriorCoeffs ScheduleTable::posterior(int n) const {
  check_step(n);
  const auto i = static_cast<std::size_t>(n);
  return {c0_[i], cn_[i], beta_tilde_[i]};
}

double raw_alpha_bar(ScheduleKind kind, int n, int steps) {
  const double frac = static_cast<double>(n) / static_cast<double>(steps);
  switch (kind) {
    case ScheduleKind::Sqrt:
      return 1.0 - std::sqrt(frac + 0.0001);
    case ScheduleKind::Cosine: {
      auto g = [](double f) {
        const double c = std::cos((f + 0.008) / 1.008 * std::numbers::pi / 2.0);
        return c * c;
      };
      return g(frac) / g(0.0);
    }
    case ScheduleKind::Linear:
      break;
  }
  throw std::invalid_argument("raw_alpha_bar: linear schedule is defined through beta");
}

ScheduleTable make_schedule(ScheduleKind kind, int steps) {
  if (steps < 2) throw std::invalid_argument("schedule needs N >= 2, got " + std::to_string(steps));
  if (kind == ScheduleKind::Linear) {
    constexpr double first = 1e-4;
    constexpr double last = 0.02;
    std::vector<double> beta(static_cast<std::size_t>(steps));
    for (int n = 1; n <= steps; ++n)
      beta[static_cast<std::size_t>(n - 1)] = first + static_cast<double>(n - 1) / (steps - 1) * (last - first);
    beta.back() = last;
    return ScheduleTable::from_beta(std::move(beta));
  }
  if (kind != ScheduleKind::Sqrt && kind != ScheduleKind::Cosine) throw std::invalid_argument("unknown schedule kind");
  std::vector<double> alpha_bar(static_cast<std::size_t>(steps));
  for (int n = 1; n <= steps; ++n)
    alpha_bar[static_cast<std::size_t>(n - 1)] = std::clamp(raw_alpha_bar(kind, n, steps), kAlphaBarMin, kAlphaBarMax);
  // clamping can flatten the tail; keep it strictly decreasing
  for (std::size_t i = 1; i < alpha_bar.size(); ++i)
    if (alpha_bar[i] >= alpha_bar[i - 1]) alpha_bar[i] = std::nextafter(alpha_bar[i - 1], 0.0);
  return ScheduleTable::from_alpha_bar(std::move(alpha_bar));
}

}  // namespace seqdiff
