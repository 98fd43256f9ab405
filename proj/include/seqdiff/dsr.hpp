#pragma once

// Denoising sequence encoder: item rows + learnable position rows + sinusoidal
// step rows, a post-norm transformer encoder, and the output row at the last
// position as the predicted clean target representation.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "seqdiff/diffusion.hpp"
#include "seqdiff/random.hpp"
#include "seqdiff/schedule.hpp"
#include "seqdiff/tensor.hpp"

namespace seqdiff {

struct DsrConfig {
  int width = 256;
  int max_length = 50;
  int layers = 2;
  int heads = 2;
  double dropout = 0.2;
  int steps = 1000;
  ScheduleKind schedule = ScheduleKind::Sqrt;
  bool use_position_embedding = true;
  bool use_step_embedding = true;
  int noise_last_k = 1;
  Activation activation = Activation::Gelu;
  bool causal = false;
  double layer_norm_eps = 1e-5;
  // Item embeddings share a space with unit-variance diffusion noise, so they start at
  // unit scale; every other weight uses 0.02.
  double embedding_init_std = 1.0;

  void validate() const {
    if (width <= 0 || max_length <= 0 || layers <= 0 || heads <= 0 || steps <= 0)
      throw std::invalid_argument("model sizes must be positive");
    if (width % heads != 0) throw std::invalid_argument("width must be divisible by the head count");
    if (width % 2 != 0) throw std::invalid_argument("width must be even for the step embedding");
    if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("dropout must lie in [0, 1)");
    if (noise_last_k < 1 || noise_last_k > max_length) throw std::invalid_argument("noise_last_k must lie in [1, max_length]");
    if (!(embedding_init_std > 0.0)) throw std::invalid_argument("embedding_init_std must be positive");
  }
};

template <typename Scalar>
struct EncoderLayerParams {
  Matrix<Scalar> wq, bq, wk, bk, wv, bv, wo, bo;
  Matrix<Scalar> ln1_gamma, ln1_beta;
  Matrix<Scalar> w1, b1, w2, b2;
  Matrix<Scalar> ln2_gamma, ln2_beta;

  template <typename Self, typename F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "wq", self.wq);
    f(prefix + "bq", self.bq);
    f(prefix + "wk", self.wk);
    f(prefix + "bk", self.bk);
    f(prefix + "wv", self.wv);
    f(prefix + "bv", self.bv);
    f(prefix + "wo", self.wo);
    f(prefix + "bo", self.bo);
    f(prefix + "ln1_gamma", self.ln1_gamma);
    f(prefix + "ln1_beta", self.ln1_beta);
    f(prefix + "w1", self.w1);
    f(prefix + "b1", self.b1);
    f(prefix + "w2", self.w2);
    f(prefix + "b2", self.b2);
    f(prefix + "ln2_gamma", self.ln2_gamma);
    f(prefix + "ln2_beta", self.ln2_beta);
  }
};

/// All learnable tensors. Row vectors (biases, norms) are stored as 1 x n matrices.
template <typename Scalar>
struct DsrParams {
  Matrix<Scalar> item_embedding;      // |V| x d, rows 0 (padding) and 1 ([unk]) included
  Matrix<Scalar> position_embedding;  // T x d
  std::vector<EncoderLayerParams<Scalar>> layers;
  Matrix<Scalar> out_weight;  // |V| x d
  Matrix<Scalar> out_bias;    // 1 x |V|

  Index vocab_size() const { return item_embedding.rows(); }
  Index width() const { return item_embedding.cols(); }

  /// Calls f(name, tensor) for every tensor in a fixed order.
  template <typename F>
  void for_each(F&& f) {
    visit_all(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit_all(*this, f);
  }

  std::vector<Matrix<Scalar>*> tensors() {
    std::vector<Matrix<Scalar>*> out;
    for_each([&](const std::string&, Matrix<Scalar>& m) { out.push_back(&m); });
    return out;
  }

  template <typename To>
  DsrParams<To> cast() const {
    DsrParams<To> out;
    out.layers.resize(layers.size());
    std::vector<const Matrix<Scalar>*> src;
    for_each([&](const std::string&, const Matrix<Scalar>& m) { src.push_back(&m); });
    std::size_t i = 0;
    out.for_each([&](const std::string&, Matrix<To>& m) { m = src[i++]->template cast<To>(); });
    return out;
  }

  friend bool operator==(const DsrParams& a, const DsrParams& b) {
    if (a.layers.size() != b.layers.size()) return false;
    std::vector<const Matrix<Scalar>*> lhs;
    a.for_each([&](const std::string&, const Matrix<Scalar>& m) { lhs.push_back(&m); });
    std::size_t i = 0;
    bool same = true;
    b.for_each([&](const std::string&, const Matrix<Scalar>& m) {
      const auto* o = lhs[i++];
      same = same && o->rows() == m.rows() && o->cols() == m.cols() && *o == m;
    });
    return same;
  }

 private:
  template <typename Self, typename F>
  static void visit_all(Self& self, F& f) {
    f(std::string("item_embedding"), self.item_embedding);
    f(std::string("position_embedding"), self.position_embedding);
    for (std::size_t l = 0; l < self.layers.size(); ++l)
      EncoderLayerParams<Scalar>::visit(self.layers[l], "layer" + std::to_string(l) + ".", f);
    f(std::string("out_weight"), self.out_weight);
    f(std::string("out_bias"), self.out_bias);
  }
};

/// Normal(0, stddev) truncated to two standard deviations.
template <typename Scalar>
Matrix<Scalar> truncated_normal(Index rows, Index cols, double stddev, RandomStream& rng) {
  Matrix<Scalar> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) {
    double x = rng.normal();
    while (std::abs(x) > 2.0) x = rng.normal();
    m.data()[i] = static_cast<Scalar>(x * stddev);
  }
  return m;
}

template <typename Scalar>
DsrParams<Scalar> init_params(const DsrConfig& config, Index vocab_size, std::uint64_t seed) {
  config.validate();
  if (vocab_size < 3) throw std::invalid_argument("vocabulary needs padding, [unk] and at least one item");
  constexpr double kStd = 0.02;
  RandomStream rng(seed, "init");
  const Index d = config.width;
  const Index inner = 4 * d;
  DsrParams<Scalar> p;
  p.item_embedding = truncated_normal<Scalar>(vocab_size, d, config.embedding_init_std, rng);
  p.position_embedding = truncated_normal<Scalar>(config.max_length, d, kStd, rng);
  p.layers.resize(static_cast<std::size_t>(config.layers));
  for (auto& l : p.layers) {
    l.wq = truncated_normal<Scalar>(d, d, kStd, rng);
    l.wk = truncated_normal<Scalar>(d, d, kStd, rng);
    l.wv = truncated_normal<Scalar>(d, d, kStd, rng);
    l.wo = truncated_normal<Scalar>(d, d, kStd, rng);
    l.bq = l.bk = l.bv = l.bo = Matrix<Scalar>::Zero(1, d);
    l.ln1_gamma = l.ln2_gamma = Matrix<Scalar>::Ones(1, d);
    l.ln1_beta = l.ln2_beta = Matrix<Scalar>::Zero(1, d);
    l.w1 = truncated_normal<Scalar>(d, inner, kStd, rng);
    l.b1 = Matrix<Scalar>::Zero(1, inner);
    l.w2 = truncated_normal<Scalar>(inner, d, kStd, rng);
    l.b2 = Matrix<Scalar>::Zero(1, d);
  }
  p.out_weight = truncated_normal<Scalar>(vocab_size, d, kStd, rng);
  p.out_bias = Matrix<Scalar>::Zero(1, vocab_size);
  return p;
}

/// Sinusoidal diffusion-step embedding z_n.
template <typename Scalar = double>
Vector<Scalar> step_embedding(int n, int width) {
  if (width <= 0 || width % 2 != 0) throw std::invalid_argument("step embedding width must be positive and even");
  if (n < 0) throw std::invalid_argument("diffusion step must be non-negative");
  Vector<Scalar> z(width);
  for (int j = 0; j < width / 2; ++j) {
    const double angle = static_cast<double>(n) / std::pow(10000.0, 2.0 * j / width);
    z(2 * j) = static_cast<Scalar>(std::sin(angle));
    z(2 * j + 1) = static_cast<Scalar>(std::cos(angle));
  }
  return z;
}

/// Encoder input: h_t + y_t + z_n at every position, with either addend switchable off.
template <typename Scalar>
Matrix<Scalar> assemble_input(const HiddenSequence<Scalar>& h, const DsrParams<Scalar>& params, const DsrConfig& config) {
  if (h.width() != params.width()) throw ShapeError("assemble_input: width mismatch");
  if (h.length() > params.position_embedding.rows()) throw ShapeError("assemble_input: sequence longer than position table");
  Matrix<Scalar> out = h.values;
  if (config.use_position_embedding) out += params.position_embedding.topRows(h.length());
  if (config.use_step_embedding) out.rowwise() += step_embedding<Scalar>(h.step, static_cast<int>(h.width())).transpose();
  return out;
}

/// Describes sequences packed row-wise with padding removed. Each sequence keeps the
/// absolute position of every kept row so position embeddings line up.
struct PackedLayout {
  std::vector<int> positions;  // per packed row
  std::vector<Index> begin;    // per sequence
  std::vector<Index> length;   // per sequence
  std::vector<int> steps;      // per sequence

  Index rows() const { return static_cast<Index>(positions.size()); }
  std::size_t sequences() const { return begin.size(); }

  /// Appends the non-padded rows of one sequence; returns the packed index of each kept row
  /// (or -1 for dropped padding rows).
  std::vector<int> append(const std::vector<bool>& padded, int step) {
    if (padded.empty() || padded.back()) throw std::invalid_argument("the last position of a sequence cannot be padding");
    std::vector<int> map(padded.size(), -1);
    begin.push_back(rows());
    for (std::size_t t = 0; t < padded.size(); ++t) {
      if (padded[t]) continue;
      map[t] = static_cast<int>(positions.size());
      positions.push_back(static_cast<int>(t));
    }
    length.push_back(rows() - begin.back());
    steps.push_back(step);
    return map;
  }

  std::vector<int> last_rows() const {
    std::vector<int> out(begin.size());
    for (std::size_t s = 0; s < begin.size(); ++s) out[s] = static_cast<int>(begin[s] + length[s] - 1);
    return out;
  }
};

/// Graph handles for every tensor of a DsrParams.
template <typename Scalar>
struct DsrVars {
  struct Layer {
    Var<Scalar> wq, bq, wk, bk, wv, bv, wo, bo, ln1_gamma, ln1_beta, w1, b1, w2, b2, ln2_gamma, ln2_beta;
  };
  Var<Scalar> item_embedding, position_embedding, out_weight, out_bias;
  std::vector<Layer> layers;
};

template <typename Scalar>
DsrVars<Scalar> bind_params(Graph<Scalar>& g, const DsrParams<Scalar>& p) {
  DsrVars<Scalar> v;
  v.item_embedding = g.parameter(p.item_embedding, "item_embedding");
  v.position_embedding = g.parameter(p.position_embedding, "position_embedding");
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& src = p.layers[l];
    const std::string pre = "layer" + std::to_string(l) + ".";
    typename DsrVars<Scalar>::Layer lv;
    lv.wq = g.parameter(src.wq, pre + "wq");
    lv.bq = g.parameter(src.bq, pre + "bq");
    lv.wk = g.parameter(src.wk, pre + "wk");
    lv.bk = g.parameter(src.bk, pre + "bk");
    lv.wv = g.parameter(src.wv, pre + "wv");
    lv.bv = g.parameter(src.bv, pre + "bv");
    lv.wo = g.parameter(src.wo, pre + "wo");
    lv.bo = g.parameter(src.bo, pre + "bo");
    lv.ln1_gamma = g.parameter(src.ln1_gamma, pre + "ln1_gamma");
    lv.ln1_beta = g.parameter(src.ln1_beta, pre + "ln1_beta");
    lv.w1 = g.parameter(src.w1, pre + "w1");
    lv.b1 = g.parameter(src.b1, pre + "b1");
    lv.w2 = g.parameter(src.w2, pre + "w2");
    lv.b2 = g.parameter(src.b2, pre + "b2");
    lv.ln2_gamma = g.parameter(src.ln2_gamma, pre + "ln2_gamma");
    lv.ln2_beta = g.parameter(src.ln2_beta, pre + "ln2_beta");
    v.layers.push_back(lv);
  }
  v.out_weight = g.parameter(p.out_weight, "out_weight");
  v.out_bias = g.parameter(p.out_bias, "out_bias");
  return v;
}

/// Runs the encoder over packed hidden rows (layout.rows() x d) and returns one row per
/// sequence: the encoder output at that sequence's last position. Dropout is active only
/// when `dropout_stream` is non-null.
template <typename Scalar>
Var<Scalar> denoise_packed(Graph<Scalar>& g, const DsrVars<Scalar>& pv, Var<Scalar> hidden, const PackedLayout& layout,
                           const DsrConfig& config, RandomStream* dropout_stream = nullptr) {
  const Index d = hidden.cols();
  if (hidden.rows() != layout.rows()) throw ShapeError("denoise: hidden rows do not match the packed layout");
  if (pv.item_embedding.cols() != d) throw ShapeError("denoise: width mismatch with parameters");
  if (pv.layers.empty()) throw std::invalid_argument("denoise: at least one encoder layer is required");
  const Scalar eps = static_cast<Scalar>(config.layer_norm_eps);
  const double rate = config.dropout;

  Var<Scalar> x = hidden;
  if (config.use_position_embedding) x = add(x, gather_rows(pv.position_embedding, layout.positions));
  if (config.use_step_embedding) {
    Matrix<Scalar> z(layout.rows(), d);
    std::map<int, Vector<Scalar>> cache;
    for (std::size_t s = 0; s < layout.sequences(); ++s) {
      const int n = layout.steps[s];
      auto it = cache.find(n);
      if (it == cache.end()) it = cache.emplace(n, step_embedding<Scalar>(n, static_cast<int>(d))).first;
      for (Index r = 0; r < layout.length[s]; ++r) z.row(layout.begin[s] + r) = it->second.transpose();
    }
    x = add(x, g.constant(std::move(z), "step_embedding"));
  }
  x = dropout(x, rate, dropout_stream);

  const int heads = config.heads;
  const auto last = layout.last_rows();
  for (std::size_t l = 0; l < pv.layers.size(); ++l) {
    const auto& lp = pv.layers[l];
    const bool final_layer = l + 1 == pv.layers.size();
    // the final layer only needs queries at each sequence's last row
    Var<Scalar> queries_in = final_layer ? gather_rows(x, last) : x;
    std::vector<AttentionSegment> segments(layout.sequences());
    for (std::size_t s = 0; s < layout.sequences(); ++s) {
      auto& seg = segments[s];
      seg.kv_begin = layout.begin[s];
      seg.kv_len = layout.length[s];
      seg.q_begin = final_layer ? static_cast<Index>(s) : layout.begin[s];
      seg.q_len = final_layer ? 1 : layout.length[s];
    }
    auto q = add(matmul(queries_in, lp.wq), lp.bq);
    auto k = add(matmul(x, lp.wk), lp.bk);
    auto v = add(matmul(x, lp.wv), lp.bv);
    auto att = attention(q, k, v, std::move(segments), heads, config.causal, rate, dropout_stream);
    att = dropout(add(matmul(att, lp.wo), lp.bo), rate, dropout_stream);
    auto y = layer_norm(add(queries_in, att), lp.ln1_gamma, lp.ln1_beta, eps);
    auto inner = dropout(activation(add(matmul(y, lp.w1), lp.b1), config.activation), rate, dropout_stream);
    auto ff = dropout(add(matmul(inner, lp.w2), lp.b2), rate, dropout_stream);
    x = layer_norm(add(y, ff), lp.ln2_gamma, lp.ln2_beta, eps);
  }
  return x;
}

/// f(h^n_T, n) for a single sequence. `h.step` supplies n.
template <typename Scalar>
Vector<Scalar> denoise(const HiddenSequence<Scalar>& h, const DsrParams<Scalar>& params, const DsrConfig& config,
                       RandomStream* dropout_stream = nullptr) {
  if (h.width() != params.width()) throw ShapeError("denoise: width mismatch");
  if (h.length() > params.position_embedding.rows()) throw ShapeError("denoise: sequence longer than position table");
  Graph<Scalar> g(false);
  auto pv = bind_params(g, params);
  PackedLayout layout;
  const auto map = layout.append(h.padded, h.step);
  Matrix<Scalar> rows(layout.rows(), h.width());
  for (std::size_t t = 0; t < map.size(); ++t)
    if (map[t] >= 0) rows.row(map[t]) = h.values.row(static_cast<Index>(t));
  auto out = denoise_packed(g, pv, g.constant(std::move(rows)), layout, config, dropout_stream);
  return out.value().row(0).transpose();
}

}  // namespace seqdiff
