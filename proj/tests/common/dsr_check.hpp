#pragma once

// Finite-difference check of the full training loss with respect to every DSR tensor.

#include <cmath>
#include <string>
#include <vector>

#include "seqdiff/trainer.hpp"

namespace testing {

struct BlockError {
  std::string name;
  double relative = 0.0;  // ||g_fd - g_ad|| / max(||g_fd||, ||g_ad||)
  double fd_norm = 0.0;
  double abs_diff = 0.0;

  // Blocks whose true gradient vanishes (the key bias, by softmax shift invariance) are
  // judged on the absolute difference.
  bool passes(double tolerance) const { return relative < tolerance || abs_diff < 1e-6; }
};

struct TinyProblem {
  seqdiff::DsrConfig config;
  seqdiff::ScheduleTable schedule = seqdiff::make_schedule(seqdiff::ScheduleKind::Sqrt, 10);
  std::vector<std::vector<int>> sequences;
  std::vector<int> steps;
  std::vector<double> probs;
  std::uint64_t noise_seed = 5;

  double loss(const seqdiff::DsrParams<double>& p) const {
    seqdiff::RandomStream noise(noise_seed, "diffusion-noise");
    return compute_loss<double>(sequences, steps, probs, p, schedule, config, noise, nullptr).total.value()(0, 0);
  }
};

/// d=8, T=4, L=1, A=2, |V|=20 with a padded sequence and K=2 noising.
inline TinyProblem tiny_problem() {
  TinyProblem t;
  t.config.width = 8;
  t.config.max_length = 4;
  t.config.layers = 1;
  t.config.heads = 2;
  t.config.dropout = 0.0;
  t.config.steps = 10;
  t.config.noise_last_k = 2;
  t.sequences = {{3, 7, 12, 19}, {0, 5, 5, 2}, {0, 0, 11, 4}};
  t.steps = {1, 6, 10};
  t.probs = {0.1, 0.25, 0.05};
  return t;
}

// Every tensor redrawn at std 0.4 (gains around 1) so no gradient block is near zero by accident.
inline seqdiff::DsrParams<double> lively(seqdiff::DsrParams<double> p, std::uint64_t seed) {
  seqdiff::RandomStream rng(seed, "lively");
  p.for_each([&](const std::string& name, seqdiff::Matrix<double>& m) {
    const bool gain = name.find("gamma") != std::string::npos;
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = (gain ? 1.0 : 0.0) + 0.4 * rng.normal();
  });
  return p;
}

inline std::vector<BlockError> gradient_errors(const TinyProblem& problem, seqdiff::DsrParams<double> params,
                                               double h = 1e-6) {
  seqdiff::RandomStream noise(problem.noise_seed, "diffusion-noise");
  auto batch = compute_loss<double>(problem.sequences, problem.steps, problem.probs, params, problem.schedule,
                                    problem.config, noise, nullptr);
  batch.graph->backward(batch.total);
  const auto analytic = seqdiff::collect_gradients(*batch.graph, params);

  std::vector<BlockError> out;
  std::size_t block = 0;
  auto tensors = params.tensors();
  std::vector<std::string> names;
  params.for_each([&](const std::string& name, const seqdiff::Matrix<double>&) { names.push_back(name); });
  for (auto* m : tensors) {
    seqdiff::Matrix<double> numeric(m->rows(), m->cols());
    for (Eigen::Index i = 0; i < m->size(); ++i) {
      const double keep = m->data()[i];
      m->data()[i] = keep + h;
      const double up = problem.loss(params);
      m->data()[i] = keep - h;
      const double down = problem.loss(params);
      m->data()[i] = keep;
      numeric.data()[i] = (up - down) / (2 * h);
    }
    const double diff = (numeric - analytic[block]).norm();
    const double scale = std::max({numeric.norm(), analytic[block].norm(), 1e-12});
    out.push_back({names[block], diff / scale, numeric.norm(), diff});
    ++block;
  }
  return out;
}

}  // namespace testing
