#pragma once

// Next-item prediction. Efficient mode draws h^N once per seed and denoises in a
// single call; full-chain mode walks the reverse process from N down to 1.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "seqdiff/diffusion.hpp"
#include "seqdiff/dsr.hpp"
#include "seqdiff/random.hpp"
#include "seqdiff/schedule.hpp"
#include "seqdiff/tensor.hpp"

namespace seqdiff {

enum class InferenceMode { Efficient, FullChain };

inline std::string to_string(InferenceMode m) { return m == InferenceMode::Efficient ? "efficient" : "full_chain"; }

inline InferenceMode parse_inference_mode(const std::string& s) {
  if (s == "efficient") return InferenceMode::Efficient;
  if (s == "full_chain" || s == "full-chain") return InferenceMode::FullChain;
  throw std::invalid_argument("unknown inference mode '" + s + "'");
}

struct InferenceConfig {
  InferenceMode mode = InferenceMode::Efficient;
  std::vector<std::uint64_t> seeds;
  int chunk = 256;  // sequences denoised per graph

  /// `count` seeds drawn from the master seed's inference stream.
  static std::vector<std::uint64_t> derive_seeds(std::uint64_t master, int count = 10) {
    if (count < 1) throw std::invalid_argument("seed count must be positive");
    RandomStream rng(master, "inference-seeds");
    std::vector<std::uint64_t> out(static_cast<std::size_t>(count));
    for (auto& s : out) s = rng.next_u64();
    return out;
  }

  void validate() const {
    if (seeds.empty()) throw std::invalid_argument("inference needs at least one seed");
    if (chunk < 1) throw std::invalid_argument("inference chunk must be positive");
  }
};

struct PredictionResult {
  Vector<double> probabilities;               // |V|, mean over seeds
  std::vector<Vector<double>> per_seed;       // filled when requested
};

/// One inference request: a length-T sequence ending in [unk] and a key that
/// separates its noise from other requests under the same seed.
struct InferenceRequest {
  std::vector<int> sequence;
  std::uint64_t key = 0;
};

namespace detail {

inline NoiseDraw initial_noise(std::uint64_t seed, std::uint64_t key, int position, Index width) {
  return NoiseDraw::draw(seed, key, static_cast<std::uint64_t>(position), width);
}

inline NoiseDraw chain_noise(std::uint64_t seed, std::uint64_t key, int step, int position, Index width) {
  return NoiseDraw::draw(seed, key, (static_cast<std::uint64_t>(step) << 32) | static_cast<std::uint64_t>(position), width);
}

/// Packed inputs for a group of hidden sequences sharing one diffusion step.
template <typename Scalar>
Matrix<Scalar> denoise_group(const DsrParams<Scalar>& params, const DsrConfig& config,
                             const std::vector<HiddenSequence<Scalar>>& group) {
  Graph<Scalar> g(false);
  auto pv = bind_params(g, params);
  PackedLayout layout;
  std::vector<std::vector<int>> maps;
  for (const auto& h : group) maps.push_back(layout.append(h.padded, h.step));
  Matrix<Scalar> rows(layout.rows(), params.width());
  for (std::size_t s = 0; s < group.size(); ++s)
    for (std::size_t t = 0; t < maps[s].size(); ++t)
      if (maps[s][t] >= 0) rows.row(maps[s][t]) = group[s].values.row(static_cast<Index>(t));
  return denoise_packed(g, pv, g.constant(std::move(rows)), layout, config, nullptr).value();
}

/// softmax(W f + b) for every row of `clean`, in double precision.
template <typename Scalar>
Matrix<double> project_rows(const Matrix<Scalar>& clean, const DsrParams<Scalar>& params) {
  Matrix<Scalar> logits = clean * params.out_weight.transpose();
  logits.rowwise() += params.out_bias.row(0);
  return softmax_rows_value<double>(logits.template cast<double>());
}

}  // namespace detail

/// Predictions for a batch of requests, one PredictionResult each.
template <typename Scalar>
std::vector<PredictionResult> infer_batch(std::span<const InferenceRequest> requests, const DsrParams<Scalar>& params,
                                          const ScheduleTable& schedule, const DsrConfig& config,
                                          const InferenceConfig& inference, bool keep_per_seed = false) {
  inference.validate();
  const Index d = params.width();
  const Index vocab = params.vocab_size();
  const int top = schedule.steps();

  std::vector<PredictionResult> results(requests.size());
  for (auto& r : results) r.probabilities = Vector<double>::Zero(vocab);

  // one job per (request, seed); chunks are processed in a fixed order
  struct Job {
    std::size_t request;
    std::size_t seed;
    HiddenSequence<Scalar> clean;
    HiddenSequence<Scalar> noisy;
  };
  const std::size_t total = requests.size() * inference.seeds.size();
  for (std::size_t first = 0; first < total; first += static_cast<std::size_t>(inference.chunk)) {
    const std::size_t last = std::min(total, first + static_cast<std::size_t>(inference.chunk));
    std::vector<Job> jobs;
    jobs.reserve(last - first);
    for (std::size_t j = first; j < last; ++j) {
      Job job{j / inference.seeds.size(), j % inference.seeds.size(), {}, {}};
      const auto& req = requests[job.request];
      if (req.sequence.empty() || req.sequence.back() != kUnknownId)
        throw std::invalid_argument("inference sequences must end in the [unk] placeholder");
      if (static_cast<int>(req.sequence.size()) > config.max_length)
        throw ShapeError("inference sequence longer than max_length");
      job.clean = embed_sequence<Scalar>(req.sequence, params.item_embedding);
      const int k = std::min<int>(config.noise_last_k, static_cast<int>(req.sequence.size()));
      const int window = static_cast<int>(req.sequence.size()) - k;
      std::vector<NoiseDraw> draws;
      for (int t = window; t < static_cast<int>(req.sequence.size()); ++t)
        draws.push_back(detail::initial_noise(inference.seeds[job.seed], req.key, t, d));
      job.noisy = forward_noise<Scalar>(job.clean, top, schedule, draws, k);
      jobs.push_back(std::move(job));
    }

    std::vector<HiddenSequence<Scalar>> group;
    group.reserve(jobs.size());
    for (const auto& job : jobs) group.push_back(job.noisy);

    if (inference.mode == InferenceMode::FullChain) {
      for (int n = top; n >= 2; --n) {
        Matrix<Scalar> predicted = detail::denoise_group(params, config, group);
        const Scalar signal = static_cast<Scalar>(std::sqrt(schedule.alpha_bar(n - 1)));
        const Scalar spread = static_cast<Scalar>(std::sqrt(1.0 - schedule.alpha_bar(n - 1)));
        for (std::size_t s = 0; s < jobs.size(); ++s) {
          auto& h = group[s];
          const auto& req = requests[jobs[s].request];
          const std::uint64_t seed = inference.seeds[jobs[s].seed];
          const Index last_row = h.length() - 1;
          const Vector<Scalar> current = h.values.row(last_row).transpose();
          const Vector<Scalar> guess = predicted.row(static_cast<Index>(s)).transpose();
          const auto eps = detail::chain_noise(seed, req.key, n, static_cast<int>(last_row), d);
          h.values.row(last_row) = reverse_step<Scalar>(current, guess, n, schedule, eps).transpose();
          // other noised context rows follow the forward marginal at the new step
          for (int t : h.noised_positions) {
            if (t == last_row) continue;
            const auto ctx = detail::chain_noise(seed, req.key, n, t, d).template as<Scalar>();
            h.values.row(t) = signal * jobs[s].clean.values.row(t) + spread * ctx.transpose();
          }
          h.step = n - 1;
        }
      }
    }
    Matrix<Scalar> clean = detail::denoise_group(params, config, group);
    Matrix<double> probs = detail::project_rows(clean, params);
    for (std::size_t s = 0; s < jobs.size(); ++s) {
      auto& res = results[jobs[s].request];
      res.probabilities += probs.row(static_cast<Index>(s)).transpose();
      if (keep_per_seed) res.per_seed.push_back(probs.row(static_cast<Index>(s)).transpose());
    }
  }
  const double count = static_cast<double>(inference.seeds.size());
  for (auto& r : results) r.probabilities /= count;
  return results;
}

/// Algorithm-3 style prediction for one sequence: mean of single-pass predictions over seeds.
template <typename Scalar>
PredictionResult infer_efficient(const std::vector<int>& sequence, const DsrParams<Scalar>& params,
                                 const ScheduleTable& schedule, const DsrConfig& config, InferenceConfig inference,
                                 std::uint64_t key = 0, bool keep_per_seed = false) {
  inference.mode = InferenceMode::Efficient;
  const InferenceRequest req{sequence, key};
  return infer_batch<Scalar>(std::span<const InferenceRequest>(&req, 1), params, schedule, config, inference,
                             keep_per_seed)
      .front();
}

/// Reverse chain from N down to 1 for one sequence and one seed.
template <typename Scalar>
PredictionResult infer_full_chain(const std::vector<int>& sequence, const DsrParams<Scalar>& params,
                                  const ScheduleTable& schedule, const DsrConfig& config, std::uint64_t seed,
                                  std::uint64_t key = 0) {
  InferenceConfig inference;
  inference.mode = InferenceMode::FullChain;
  inference.seeds = {seed};
  const InferenceRequest req{sequence, key};
  return infer_batch<Scalar>(std::span<const InferenceRequest>(&req, 1), params, schedule, config, inference).front();
}

/// Descending probability, ties by ascending ID. Padding and [unk] are never ranked.
inline std::vector<int> rank_items(const Vector<double>& probabilities, int k,
                                   const std::unordered_set<int>& exclusions = {}) {
  std::vector<int> candidates;
  for (int id = 0; id < probabilities.size(); ++id)
    if (id != kPaddingId && id != kUnknownId && !exclusions.contains(id)) candidates.push_back(id);
  if (k < 0 || static_cast<std::size_t>(k) > candidates.size())
    throw std::invalid_argument("cannot rank " + std::to_string(k) + " items out of " + std::to_string(candidates.size()));
  const auto before = [&](int a, int b) {
    return probabilities(a) != probabilities(b) ? probabilities(a) > probabilities(b) : a < b;
  };
  std::partial_sort(candidates.begin(), candidates.begin() + k, candidates.end(), before);
  candidates.resize(static_cast<std::size_t>(k));
  return candidates;
}

}  // namespace seqdiff
