#pragma once

// Forward and reverse transitions over item representations. Only the trailing
// K positions of a sequence (K = 1 by default: the target) ever carry noise.

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "seqdiff/random.hpp"
#include "seqdiff/schedule.hpp"
#include "seqdiff/tensor.hpp"

namespace seqdiff {

inline constexpr int kPaddingId = 0;
inline constexpr int kUnknownId = 1;

template <typename Scalar>
struct HiddenSequence {
  Matrix<Scalar> values;            // T x d, row t is h_t at `step`
  int step = 0;
  std::vector<int> noised_positions;  // 0-based rows carrying injected noise
  std::vector<bool> padded;           // rows excluded from attention

  Index length() const { return values.rows(); }
  Index width() const { return values.cols(); }
};

/// A d-dimensional standard normal sample tied to (seed, stream, counter).
struct NoiseDraw {
  Vector<double> epsilon;
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
  std::uint64_t counter = 0;

  static NoiseDraw draw(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter, Index width) {
    // splitmix-style mixing keeps (stream, counter) pairs apart
    std::uint64_t z = stream + 0x9e3779b97f4a7c15ULL * (counter + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    z ^= z >> 31;
    RandomStream rng(seed, z);
    NoiseDraw nd;
    nd.seed = seed;
    nd.stream = stream;
    nd.counter = counter;
    nd.epsilon.resize(width);
    for (Index i = 0; i < width; ++i) nd.epsilon(i) = rng.normal();
    return nd;
  }

  static NoiseDraw zeros(Index width) {
    NoiseDraw nd;
    nd.epsilon = Vector<double>::Zero(width);
    return nd;
  }

  template <typename Scalar>
  Vector<Scalar> as() const {
    return epsilon.cast<Scalar>();
  }
};

/// Row t of the result is E(items[t]); no noise is added at this stage.
template <typename Scalar>
HiddenSequence<Scalar> embed_sequence(std::span<const int> items, const Matrix<Scalar>& embedding) {
  HiddenSequence<Scalar> h;
  h.values.resize(static_cast<Index>(items.size()), embedding.cols());
  h.padded.resize(items.size());
  for (std::size_t t = 0; t < items.size(); ++t) {
    const int id = items[t];
    if (id < 0 || id >= embedding.rows())
      throw std::out_of_range("item id " + std::to_string(id) + " outside vocabulary of size " +
                              std::to_string(embedding.rows()));
    h.values.row(static_cast<Index>(t)) = embedding.row(id);
    h.padded[t] = id == kPaddingId;
  }
  h.step = 0;
  return h;
}

/// Rows the forward process noises: the last `k` non-padded positions window.
inline std::vector<int> noised_rows(const std::vector<bool>& padded, int k) {
  const int length = static_cast<int>(padded.size());
  if (k < 1 || k > length)
    throw std::out_of_range("noise-last-K must lie in [1, " + std::to_string(length) + "], got " + std::to_string(k));
  std::vector<int> rows;
  for (int t = length - k; t < length; ++t)
    if (!padded[static_cast<std::size_t>(t)]) rows.push_back(t);
  return rows;
}

/// Closed-form q(h^n | h^0) on the trailing `k` positions; all other rows are copied verbatim.
/// `noise` holds one draw per position of the trailing window (index 0 is position T-k).
template <typename Scalar>
HiddenSequence<Scalar> forward_noise(const HiddenSequence<Scalar>& h0, int n, const ScheduleTable& schedule,
                                     std::span<const NoiseDraw> noise, int k = 1) {
  if (h0.step != 0) throw std::invalid_argument("forward_noise expects a step-0 sequence");
  if (n < 1 || n > schedule.steps())
    throw std::out_of_range("diffusion step " + std::to_string(n) + " outside [1, " + std::to_string(schedule.steps()) + "]");
  if (static_cast<int>(noise.size()) != k) throw std::invalid_argument("forward_noise: need one noise draw per noised position");
  HiddenSequence<Scalar> out = h0;
  out.step = n;
  out.noised_positions = noised_rows(h0.padded, k);
  const Scalar signal = static_cast<Scalar>(std::sqrt(schedule.alpha_bar(n)));
  const Scalar spread = static_cast<Scalar>(std::sqrt(1.0 - schedule.alpha_bar(n)));
  const int window_start = static_cast<int>(h0.length()) - k;
  for (int t : out.noised_positions) {
    const auto& eps = noise[static_cast<std::size_t>(t - window_start)].epsilon;
    if (eps.size() != h0.width()) throw ShapeError("forward_noise: noise width mismatch");
    out.values.row(t) = signal * h0.values.row(t) + spread * eps.cast<Scalar>().transpose();
  }
  return out;
}

/// One Markov step q(h^n | h^{n-1}); kept as an independent check on forward_noise.
template <typename Scalar>
Vector<Scalar> forward_one_step(const Vector<Scalar>& previous, int n, const ScheduleTable& schedule, const NoiseDraw& noise) {
  const double beta = schedule.beta(n);
  return static_cast<Scalar>(std::sqrt(1.0 - beta)) * previous + static_cast<Scalar>(std::sqrt(beta)) * noise.as<Scalar>();
}

template <typename Scalar>
struct PosteriorMean {
  Vector<Scalar> mean;
  double beta_tilde;
};

/// Mean and variance of q(h^{n-1} | h^n, h^0).
template <typename Scalar>
PosteriorMean<Scalar> posterior_mean(const Vector<Scalar>& clean, const Vector<Scalar>& noisy, int n,
                                     const ScheduleTable& schedule) {
  if (clean.size() != noisy.size()) throw ShapeError("posterior_mean: width mismatch");
  const auto c = schedule.posterior(n);
  return {static_cast<Scalar>(c.c0) * clean + static_cast<Scalar>(c.cn) * noisy, c.beta_tilde};
}

/// Draw from p(h^{n-1} | h^n) with the untrained variance beta_n. Valid for 2 <= n <= N.
template <typename Scalar>
Vector<Scalar> reverse_step(const Vector<Scalar>& noisy, const Vector<Scalar>& predicted_clean, int n,
                            const ScheduleTable& schedule, const NoiseDraw& noise) {
  if (n < 2 || n > schedule.steps())
    throw std::out_of_range("reverse_step: step " + std::to_string(n) + " outside [2, " + std::to_string(schedule.steps()) + "]");
  if (noisy.size() != predicted_clean.size() || noise.epsilon.size() != noisy.size())
    throw ShapeError("reverse_step: width mismatch");
  const auto c = schedule.posterior(n);
  Vector<Scalar> mean = static_cast<Scalar>(c.c0) * predicted_clean + static_cast<Scalar>(c.cn) * noisy;
  return mean + static_cast<Scalar>(std::sqrt(schedule.beta(n))) * noise.as<Scalar>();
}

/// softmax(W h + b) over the vocabulary.
template <typename Scalar>
Vector<Scalar> project_to_items(const Vector<Scalar>& clean, const Matrix<Scalar>& weight, const Matrix<Scalar>& bias) {
  if (weight.cols() != clean.size() || bias.size() != weight.rows()) throw ShapeError("project_to_items: shape mismatch");
  Vector<Scalar> logits = weight * clean;
  logits += Eigen::Map<const Vector<Scalar>>(bias.data(), bias.size());
  const Scalar m = logits.maxCoeff();
  Vector<Scalar> p = (logits.array() - m).exp().matrix();
  return p / p.sum();
}

/// Full reverse chain from step `start` down to 1: reverse_step for n = start..2, then the
/// deterministic prediction denoise(h^1, 1). `denoise(h, n)` predicts the clean target.
template <typename Scalar>
Vector<Scalar> reverse_chain(Vector<Scalar> noisy, int start, const ScheduleTable& schedule,
                             const std::function<Vector<Scalar>(const Vector<Scalar>&, int)>& denoise,
                             const std::function<NoiseDraw()>& next_noise) {
  if (start < 1 || start > schedule.steps()) throw std::out_of_range("reverse_chain: start step out of range");
  for (int n = start; n >= 2; --n) {
    Vector<Scalar> predicted = denoise(noisy, n);
    noisy = reverse_step(noisy, predicted, n, schedule, next_noise());
  }
  return denoise(noisy, 1);
}

}  // namespace seqdiff
