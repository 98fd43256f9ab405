#pragma once

// Importance-sampled single-step training: one diffusion step per sequence per
// iteration, loss = mse / p_n + cross-entropy, one Adam update per minibatch.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "seqdiff/adam.hpp"
#include "seqdiff/diffusion.hpp"
#include "seqdiff/dsr.hpp"
#include "seqdiff/random.hpp"
#include "seqdiff/sampler.hpp"
#include "seqdiff/schedule.hpp"
#include "seqdiff/tensor.hpp"

namespace seqdiff {

struct LossBreakdown {
  double mse = 0.0;             // ||h0_T - f(h^n_T, n)||^2
  double rec = 0.0;             // -log p(v_T | prediction)
  double weighted_total = 0.0;  // mse / p_n + rec
  int step = 0;
  double step_probability = 1.0;
};

/// Loss of one sequence from its pieces; the reference form the batched graph must reproduce.
template <typename Scalar>
LossBreakdown sequence_loss(const Vector<Scalar>& clean_target, const Vector<Scalar>& prediction,
                            const Matrix<Scalar>& out_weight, const Matrix<Scalar>& out_bias, int target, int step,
                            double step_probability) {
  LossBreakdown lb;
  lb.step = step;
  lb.step_probability = step_probability;
  lb.mse = static_cast<double>((clean_target - prediction).squaredNorm());
  Vector<double> logits = out_weight.template cast<double>() * prediction.template cast<double>();
  for (Index i = 0; i < logits.size(); ++i) logits(i) += static_cast<double>(out_bias(0, i));
  const double m = logits.maxCoeff();
  lb.rec = m + std::log((logits.array() - m).exp().sum()) - logits(target);
  lb.weighted_total = lb.mse / step_probability + lb.rec;
  return lb;
}

struct TrainOptions {
  int batch_size = 256;
  double clip_norm = 5.0;
  bool per_batch_step_sampling = false;
  bool rec_on_clean = false;  // cross-entropy on E(v_T) instead of the denoiser output
};

/// Named random streams used by training, all derived from one master seed.
struct TrainStreams {
  RandomStream dropout;
  RandomStream noise;
  RandomStream sampler;
  RandomStream shuffle;

  static TrainStreams from_master(std::uint64_t master) {
    return {RandomStream(master, "dropout"), RandomStream(master, "diffusion-noise"), RandomStream(master, "step-sampler"),
            RandomStream(master, "shuffle")};
  }

  friend bool operator==(const TrainStreams& a, const TrainStreams& b) {
    return a.dropout == b.dropout && a.noise == b.noise && a.sampler == b.sampler && a.shuffle == b.shuffle;
  }
};

template <typename Scalar>
struct BatchLoss {
  std::unique_ptr<Graph<Scalar>> graph;
  Var<Scalar> total;  // mean over the batch of weighted_total
  std::vector<LossBreakdown> per_sequence;
  std::size_t denoised_sequences = 0;
};

/// Builds the training graph for a batch. `sequences[i]` has length T and ends in its target;
/// `steps[i]` / `step_probs[i]` are the sampled diffusion step and its sampling probability.
template <typename Scalar>
BatchLoss<Scalar> compute_loss(std::span<const std::vector<int>> sequences, std::span<const int> steps,
                               std::span<const double> step_probs, const DsrParams<Scalar>& params,
                               const ScheduleTable& schedule, const DsrConfig& config, RandomStream& noise,
                               RandomStream* dropout_stream, const TrainOptions& options = {}) {
  if (sequences.empty()) throw std::invalid_argument("compute_loss: empty batch");
  if (steps.size() != sequences.size() || step_probs.size() != sequences.size())
    throw std::invalid_argument("compute_loss: one step per sequence required");
  const Index d = params.width();

  BatchLoss<Scalar> out;
  out.graph = std::make_unique<Graph<Scalar>>(true);
  auto& g = *out.graph;
  auto pv = bind_params(g, params);

  PackedLayout layout;
  std::vector<int> ids;
  std::vector<int> noised;
  std::vector<Scalar> coef;
  std::vector<Vector<Scalar>> noise_rows;
  std::vector<int> targets;
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    const auto& seq = sequences[s];
    if (static_cast<int>(seq.size()) > config.max_length) throw ShapeError("compute_loss: sequence longer than max_length");
    const int n = steps[s];
    if (n < 1 || n > schedule.steps()) throw std::out_of_range("compute_loss: diffusion step out of range");
    const int target = seq.back();
    if (target == kPaddingId || target == kUnknownId) throw std::invalid_argument("compute_loss: target is a reserved id");
    std::vector<bool> padded(seq.size());
    for (std::size_t t = 0; t < seq.size(); ++t) padded[t] = seq[t] == kPaddingId;
    const auto map = layout.append(padded, n);
    for (std::size_t t = 0; t < seq.size(); ++t)
      if (map[t] >= 0) ids.push_back(seq[t]);
    const int k = std::min<int>(config.noise_last_k, static_cast<int>(seq.size()));
    const Scalar signal = static_cast<Scalar>(std::sqrt(schedule.alpha_bar(n)));
    const Scalar spread = static_cast<Scalar>(std::sqrt(1.0 - schedule.alpha_bar(n)));
    for (int t : noised_rows(padded, k)) {
      noised.push_back(map[static_cast<std::size_t>(t)]);
      coef.push_back(signal);
      Vector<Scalar> eps(d);
      for (Index i = 0; i < d; ++i) eps(i) = static_cast<Scalar>(noise.normal());
      noise_rows.push_back(spread * eps);
    }
    targets.push_back(target);
  }
  Matrix<Scalar> noise_matrix(static_cast<Index>(noise_rows.size()), d);
  for (std::size_t i = 0; i < noise_rows.size(); ++i) noise_matrix.row(static_cast<Index>(i)) = noise_rows[i].transpose();

  auto clean = gather_rows(pv.item_embedding, ids);
  auto hidden = blend_rows(clean, std::move(noised), std::move(coef), std::move(noise_matrix));
  auto predicted = denoise_packed(g, pv, hidden, layout, config, dropout_stream);
  out.denoised_sequences = layout.sequences();

  auto clean_target = gather_rows(pv.item_embedding, targets);
  auto mse_rows = row_sq_dist(clean_target, predicted);
  auto rec_input = options.rec_on_clean ? clean_target : predicted;
  auto logits = add(matmul_nt(rec_input, pv.out_weight), pv.out_bias);
  auto rec_rows = cross_entropy_rows(logits, targets);

  const auto batch = static_cast<Scalar>(sequences.size());
  Matrix<Scalar> mse_w(static_cast<Index>(sequences.size()), 1);
  for (std::size_t s = 0; s < sequences.size(); ++s)
    mse_w(static_cast<Index>(s), 0) = static_cast<Scalar>(1.0 / step_probs[s]) / batch;
  Matrix<Scalar> rec_w = Matrix<Scalar>::Constant(static_cast<Index>(sequences.size()), 1, Scalar(1) / batch);
  out.total = add(weighted_sum(mse_rows, std::move(mse_w)), weighted_sum(rec_rows, std::move(rec_w)));

  out.per_sequence.resize(sequences.size());
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    auto& lb = out.per_sequence[s];
    lb.step = steps[s];
    lb.step_probability = step_probs[s];
    lb.mse = static_cast<double>(mse_rows.value()(static_cast<Index>(s), 0));
    lb.rec = static_cast<double>(rec_rows.value()(static_cast<Index>(s), 0));
    lb.weighted_total = lb.mse / lb.step_probability + lb.rec;
    if (!std::isfinite(lb.weighted_total)) throw NonFiniteError("compute_loss: non-finite loss");
  }
  return out;
}

struct EpochStats {
  double mean_mse = 0.0;
  double mean_rec = 0.0;
  double mean_weighted = 0.0;
  double sequences_per_second = 0.0;
  std::size_t sequences = 0;
  std::size_t denoised_sequences = 0;
  int optimizer_steps = 0;
};

/// Gradients of every parameter tensor, in DsrParams::for_each order.
template <typename Scalar>
std::vector<Matrix<Scalar>> collect_gradients(const Graph<Scalar>& g, const DsrParams<Scalar>& params) {
  std::vector<Matrix<Scalar>> grads;
  params.for_each([&](const std::string& name, const Matrix<Scalar>&) { grads.push_back(g.gradient(name)); });
  return grads;
}

/// One pass over `sequences` in a shuffled order.
template <typename Scalar>
EpochStats train_epoch(std::span<const std::vector<int>> sequences, DsrParams<Scalar>& params, AdamState<Scalar>& adam,
                       ImportanceSampler& sampler, const ScheduleTable& schedule, const DsrConfig& config,
                       const TrainOptions& options, TrainStreams& streams) {
  if (sequences.empty()) throw std::invalid_argument("train_epoch: empty dataset");
  if (options.batch_size <= 0) throw std::invalid_argument("train_epoch: batch size must be positive");
  const auto started = std::chrono::steady_clock::now();

  std::vector<std::size_t> order(sequences.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[streams.shuffle.below(i)]);

  EpochStats stats;
  auto tensors = params.tensors();
  RandomStream* dropout_stream = config.dropout > 0.0 ? &streams.dropout : nullptr;
  for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(options.batch_size)) {
    const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(options.batch_size));
    std::vector<std::vector<int>> batch;
    std::vector<int> steps;
    std::vector<double> probs;
    for (std::size_t i = begin; i < end; ++i) {
      batch.push_back(sequences[order[i]]);
      const int n = (options.per_batch_step_sampling && i != begin) ? steps.front() : sampler.sample(streams.sampler);
      steps.push_back(n);
      probs.push_back(sampler.probability(n));
    }
    auto loss = compute_loss<Scalar>(batch, steps, probs, params, schedule, config, streams.noise, dropout_stream, options);
    loss.graph->backward(loss.total);
    auto grads = collect_gradients(*loss.graph, params);
    clip_global_norm<Scalar>(grads, options.clip_norm);
    adam_step<Scalar>(tensors, grads, adam);
    ++stats.optimizer_steps;
    stats.denoised_sequences += loss.denoised_sequences;
    for (const auto& lb : loss.per_sequence) {
      sampler.update(lb.step, lb.mse);
      stats.mean_mse += lb.mse;
      stats.mean_rec += lb.rec;
      stats.mean_weighted += lb.weighted_total;
    }
  }
  stats.sequences = sequences.size();
  const double count = static_cast<double>(stats.sequences);
  stats.mean_mse /= count;
  stats.mean_rec /= count;
  stats.mean_weighted /= count;
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  stats.sequences_per_second = seconds > 0.0 ? count / seconds : 0.0;
  return stats;
}

}  // namespace seqdiff
