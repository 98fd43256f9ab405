#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "seqdiff/tensor.hpp"

namespace seqdiff {

struct AdamHyper {
  double lr = 1e-3;
  double b1 = 0.9;
  double b2 = 0.999;
  double eps = 1e-8;
};

/// First/second moments, one pair per parameter tensor in a fixed order.
template <typename Scalar>
struct AdamState {
  AdamHyper hyper;
  std::vector<Matrix<Scalar>> m;
  std::vector<Matrix<Scalar>> v;
  std::int64_t step = 0;
};

/// Bias-corrected Adam update applied in place. Moments are created (zeroed) on the first call.
template <typename Scalar>
void adam_step(std::span<Matrix<Scalar>* const> params, std::span<const Matrix<Scalar>> grads, AdamState<Scalar>& state) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: parameter and gradient counts differ");
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.push_back(Matrix<Scalar>::Zero(p->rows(), p->cols()));
      state.v.push_back(Matrix<Scalar>::Zero(p->rows(), p->cols()));
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: moment count differs from parameter count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = *params[i];
    if (grads[i].rows() != p.rows() || grads[i].cols() != p.cols() || state.m[i].rows() != p.rows() ||
        state.m[i].cols() != p.cols())
      throw ShapeError("adam_step: shape mismatch at parameter " + std::to_string(i));
  }

  state.step += 1;
  const auto& h = state.hyper;
  const double t = static_cast<double>(state.step);
  const Scalar b1 = static_cast<Scalar>(h.b1);
  const Scalar b2 = static_cast<Scalar>(h.b2);
  const Scalar c1 = static_cast<Scalar>(1.0 / (1.0 - std::pow(h.b1, t)));
  const Scalar c2 = static_cast<Scalar>(1.0 / (1.0 - std::pow(h.b2, t)));
  const Scalar lr = static_cast<Scalar>(h.lr);
  const Scalar eps = static_cast<Scalar>(h.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.cwiseProduct(g);
    auto& p = *params[i];
    p.array() -= lr * (m.array() * c1) / ((v.array() * c2).sqrt() + eps);
  }
}

/// Scales gradients so their global L2 norm is at most max_norm; returns the pre-clip norm.
template <typename Scalar>
double clip_global_norm(std::span<Matrix<Scalar>> grads, double max_norm) {
  double total = 0.0;
  for (const auto& g : grads) total += static_cast<double>(g.squaredNorm());
  const double norm = std::sqrt(total);
  if (max_norm > 0.0 && norm > max_norm) {
    const Scalar s = static_cast<Scalar>(max_norm / norm);
    for (auto& g : grads) g *= s;
  }
  return norm;
}

}  // namespace seqdiff
