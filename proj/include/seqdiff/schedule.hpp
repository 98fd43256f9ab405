#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace seqdiff {

enum class ScheduleKind { Sqrt, Cosine, Linear };

std::string to_string(ScheduleKind kind);
ScheduleKind parse_schedule_kind(std::string_view name);

struct PosteriorCoeffs {
  double c0;         // weight on the clean representation
  double cn;         // weight on the step-n representation
  double beta_tilde; // posterior variance
};

/// Precomputed noise schedule. Index n runs over 1..N; alpha_bar additionally has n = 0.
/// All arrays are stored with length N + 1 and slot 0 holding the n = 0 value (beta[0] = 0).
class ScheduleTable {
 public:
  /// Builds a table from cumulative signal fractions alpha_bar[1..N] (alpha_bar[0] = 1 implied).
  static ScheduleTable from_alpha_bar(std::vector<double> alpha_bar_1_to_n);
  /// Builds a table from per-step noise amounts beta[1..N].
  static ScheduleTable from_beta(std::vector<double> beta_1_to_n);

  int steps() const { return static_cast<int>(beta_.size()) - 1; }

  double beta(int n) const;
  double alpha(int n) const;
  double alpha_bar(int n) const;  // valid for 0..N
  double beta_tilde(int n) const;
  PosteriorCoeffs posterior(int n) const;

  const std::vector<double>& alpha_bar_values() const { return alpha_bar_; }
  const std::vector<double>& beta_values() const { return beta_; }

 private:
  ScheduleTable() = default;
  void derive();
  void check_step(int n) const;

  std::vector<double> beta_;
  std::vector<double> alpha_;
  std::vector<double> alpha_bar_;
  std::vector<double> beta_tilde_;
  std::vector<double> c0_;
  std::vector<double> cn_;
};

/// Lower/upper clamp applied to the closed-form alpha_bar schedules.
inline constexpr double kAlphaBarMin = 1e-5;
inline constexpr double kAlphaBarMax = 1.0 - 1e-5;

ScheduleTable make_schedule(ScheduleKind kind, int steps);

/// Unclamped closed-form alpha_bar_n for the sqrt and cosine families.
double raw_alpha_bar(ScheduleKind kind, int n, int steps);

}  // namespace seqdiff
