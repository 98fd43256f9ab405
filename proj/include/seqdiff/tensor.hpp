#pragma once

// Dense tape-based reverse-mode differentiation over row-major Eigen matrices.
//
// A Graph is built by calling the free functions below; every call evaluates
// its node immediately (define-by-run) and, when gradients are recorded,
// pushes a backward closure. Graph::backward walks the tape in reverse.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "seqdiff/random.hpp"

namespace seqdiff {

using Index = Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Activation { Gelu, Relu };

template <typename Scalar>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; only valid while the graph lives.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Graph<Scalar>* graph, int id) : graph_(graph), id_(id) {}

  int id() const { return id_; }
  Graph<Scalar>& graph() const { return *graph_; }
  bool valid() const { return graph_ != nullptr; }

  const Matrix<Scalar>& value() const { return graph_->value(*this); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }

 private:
  Graph<Scalar>* graph_ = nullptr;
  int id_ = -1;
};

template <typename Scalar>
class Graph {
 public:
  using Mat = Matrix<Scalar>;
  /// Receives the gradient flowing into a node and the node's own value.
  using Backward = std::function<void(Graph&, const Mat& grad, const Mat& out)>;

  explicit Graph(bool record_gradients = true) : record_(record_gradients) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  Var<Scalar> constant(Mat value, std::string name = {}) {
    return push("constant", std::move(name), std::move(value), nullptr, false, {});
  }

  /// Leaf whose value lives outside the graph; its gradient is retrievable by name.
  Var<Scalar> parameter(const Mat& storage, std::string name) {
    auto v = push("parameter", name, Mat(), &storage, record_, {});
    params_[name] = v.id();
    return v;
  }

  /// Owning variant of parameter(), convenient for tests and small graphs.
  Var<Scalar> variable(Mat value, std::string name) {
    auto v = push("parameter", name, std::move(value), nullptr, record_, {});
    params_[name] = v.id();
    return v;
  }

  const Mat& value(Var<Scalar> v) const {
    const Node& n = nodes_.at(static_cast<std::size_t>(v.id()));
    return n.external ? *n.external : n.value;
  }

  const std::string& op_name(Var<Scalar> v) const { return nodes_.at(static_cast<std::size_t>(v.id())).op; }

  /// Gradient of the last backward() target with respect to v; zeros when unreached.
  Mat grad(Var<Scalar> v) const {
    const Node& n = nodes_.at(static_cast<std::size_t>(v.id()));
    if (n.has_grad) return n.grad;
    const Mat& val = value(v);
    return Mat::Zero(val.rows(), val.cols());
  }

  Mat gradient(const std::string& param) const {
    auto it = params_.find(param);
    if (it == params_.end()) throw std::out_of_range("unknown parameter '" + param + "'");
    const Node& n = nodes_[static_cast<std::size_t>(it->second)];
    if (n.has_grad) return n.grad;
    const Mat& val = n.external ? *n.external : n.value;
    return Mat::Zero(val.rows(), val.cols());
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> out;
    for (const auto& [name, id] : params_) out.push_back(name);
    return out;
  }

  void backward(Var<Scalar> loss) {
    const Mat& lv = value(loss);
    if (lv.rows() != 1 || lv.cols() != 1) {
      throw ShapeError("backward: loss node " + describe(loss.id()) + " is not scalar (" +
                       std::to_string(lv.rows()) + "x" + std::to_string(lv.cols()) + ")");
    }
    if (!record_) throw std::logic_error("backward: graph was built without gradient recording");
    for (auto& n : nodes_) {
      n.has_grad = false;
      n.grad.resize(0, 0);
    }
    accumulate(loss.id(), Mat::Ones(1, 1));
    for (int id = loss.id(); id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.has_grad || !n.backward) continue;
      // closures only accumulate into strictly earlier nodes
      n.backward(*this, n.grad, n.external ? *n.external : n.value);
    }
  }

  // --- used by the op functions ---------------------------------------------

  bool requires_grad(Var<Scalar> v) const { return nodes_.at(static_cast<std::size_t>(v.id())).requires_grad; }

  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }

  /// Adds row i of `g` into row rows[i] of node `id`'s gradient.
  template <typename Derived>
  void accumulate_rows(int id, std::span<const int> rows, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      const Mat& val = n.external ? *n.external : n.value;
      n.grad = Mat::Zero(val.rows(), val.cols());
      n.has_grad = true;
    }
    for (std::size_t i = 0; i < rows.size(); ++i) n.grad.row(rows[i]) += g.row(static_cast<Index>(i));
  }

  Var<Scalar> push_op(const char* op, Mat value, std::initializer_list<Var<Scalar>> inputs, Backward backward) {
    bool needs = false;
    for (auto in : inputs) needs = needs || requires_grad(in);
    return push(op, {}, std::move(value), nullptr, needs && record_, std::move(backward));
  }

  std::string describe(int id) const {
    const Node& n = nodes_.at(static_cast<std::size_t>(id));
    std::string s = n.op + "#" + std::to_string(id);
    if (!n.name.empty()) s += " '" + n.name + "'";
    return s;
  }

  /// Index the next pushed node will receive.
  int next_id() const { return static_cast<int>(nodes_.size()); }

 private:
  struct Node {
    std::string op;
    std::string name;
    Mat value;
    const Mat* external = nullptr;
    Mat grad;
    bool has_grad = false;
    bool requires_grad = false;
    Backward backward;
  };

  Var<Scalar> push(const char* op, std::string name, Mat value, const Mat* external, bool tracked,
                   Backward backward) {
    Node n;
    n.op = op;
    n.name = std::move(name);
    n.value = std::move(value);
    n.external = external;
    n.requires_grad = tracked;
    if (tracked) n.backward = std::move(backward);
    const bool finite = (external ? *external : n.value).allFinite();
    nodes_.push_back(std::move(n));
    const int id = static_cast<int>(nodes_.size()) - 1;
    if (!finite) throw NonFiniteError("non-finite value produced by " + describe(id));
    return Var<Scalar>(this, id);
  }

  bool record_;
  std::vector<Node> nodes_;
  std::map<std::string, int> params_;
};

namespace detail {

template <typename Scalar>
[[noreturn]] void shape_fail(const Graph<Scalar>& g, const char* op, const std::string& what) {
  throw ShapeError(std::string(op) + "#" + std::to_string(g.next_id()) + ": " + what);
}

inline std::string dims(Index r, Index c) { return std::to_string(r) + "x" + std::to_string(c); }

}  // namespace detail

// --- primitives ------------------------------------------------------------

/// a (m x k) * b (k x n)
template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  auto& g = a.graph();
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.cols() != B.rows())
    detail::shape_fail(g, "matmul", detail::dims(A.rows(), A.cols()) + " * " + detail::dims(B.rows(), B.cols()));
  Matrix<Scalar> out = A * B;
  return g.push_op("matmul", std::move(out), {a, b}, [a, b](Graph<Scalar>& gr, const Matrix<Scalar>& dc, const Matrix<Scalar>&) {
    if (gr.requires_grad(a)) gr.accumulate(a.id(), dc * b.value().transpose());
    if (gr.requires_grad(b)) gr.accumulate(b.id(), a.value().transpose() * dc);
  });
}

/// a (m x k) * b^T with b stored (n x k)
template <typename Scalar>
Var<Scalar> matmul_nt(Var<Scalar> a, Var<Scalar> b) {
  auto& g = a.graph();
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.cols() != B.cols())
    detail::shape_fail(g, "matmul_nt",
                       detail::dims(A.rows(), A.cols()) + " * T(" + detail::dims(B.rows(), B.cols()) + ")");
  Matrix<Scalar> out = A * B.transpose();
  return g.push_op("matmul_nt", std::move(out), {a, b}, [a, b](Graph<Scalar>& gr, const Matrix<Scalar>& dc, const Matrix<Scalar>&) {
    if (gr.requires_grad(a)) gr.accumulate(a.id(), dc * b.value());
    if (gr.requires_grad(b)) gr.accumulate(b.id(), dc.transpose() * a.value());
  });
}

/// Elementwise sum. `b` may also be a single row, broadcast over the rows of `a`.
template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  auto& g = a.graph();
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.rows() == B.rows() && A.cols() == B.cols()) {
    Matrix<Scalar> out = A + B;
    return g.push_op("add", std::move(out), {a, b}, [a, b](Graph<Scalar>& gr, const Matrix<Scalar>& dc, const Matrix<Scalar>&) {
      gr.accumulate(a.id(), dc);
      gr.accumulate(b.id(), dc);
    });
  }
  if (B.rows() == 1 && B.cols() == A.cols()) {
    Matrix<Scalar> out = A.rowwise() + B.row(0);
    return g.push_op("add_row", std::move(out), {a, b}, [a, b](Graph<Scalar>& gr, const Matrix<Scalar>& dc, const Matrix<Scalar>&) {
      gr.accumulate(a.id(), dc);
      if (gr.requires_grad(b)) gr.accumulate(b.id(), dc.colwise().sum());
    });
  }
  detail::shape_fail(g, "add", detail::dims(A.rows(), A.cols()) + " + " + detail::dims(B.rows(), B.cols()));
}

template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b) {
  auto& g = a.graph();
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.rows() != B.rows() || A.cols() != B.cols())
    detail::shape_fail(g, "sub", detail::dims(A.rows(), A.cols()) + " - " + detail::dims(B.rows(), B.cols()));
  Matrix<Scalar> out = A - B;
  return g.push_op("sub", std::move(out), {a, b}, [a, b](Graph<Scalar>& gr, const Matrix<Scalar>& dc, const Matrix<Scalar>&) {
    gr.accumulate(a.id(), dc);
    if (gr.requires_grad(b)) gr.accumulate(b.id(), -dc);
  });
}

/// Elementwise product.
template <typename Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b) {
  auto& g = a.graph();
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.rows() != B.rows() || A.cols() != B.cols())
    detail::shape_fail(g, "mul", detail::dims(A.rows(), A.cols()) + " .* " + detail::dims(B.rows(), B.cols()));
  Matrix<Scalar> out = A.cwiseProduct(B);
  return g.push_op("mul", std::move(out), {a, b}, [a, b](Graph<Scalar>& gr, const Matrix<Scalar>& dc, const Matrix<Scalar>&) {
    if (gr.requires_grad(a)) gr.accumulate(a.id(), dc.cwiseProduct(b.value()));
    if (gr.requires_grad(b)) gr.accumulate(b.id(), dc.cwiseProduct(a.value()));
  });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s) {
  Matrix<Scalar> out = a.value() * s;
  return a.graph().push_op("scale", std::move(out), {a}, [a, s](Graph<Scalar>& gr, const Matrix<Scalar>& dc, const Matrix<Scalar>&) {
    gr.accumulate(a.id(), dc * s);
  });
}

template <typename Scalar>
Var<Scalar> operator+(Var<Scalar> a, Var<Scalar> b) {
  return add(a, b);
}
template <typename Scalar>
Var<Scalar> operator-(Var<Scalar> a, Var<Scalar> b) {
  return sub(a, b);
}

/// Softmax along each row.
template <typename Scalar>
Matrix<Scalar> softmax_rows_value(const Matrix<Scalar>& a) {
  Matrix<Scalar> out(a.rows(), a.cols());
  for (Index r = 0; r < a.rows(); ++r) {
    const Scalar m = a.row(r).maxCoeff();
    out.row(r) = (a.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

template <typename Scalar>
Var<Scalar> softmax_rows(Var<Scalar> a) {
  return a.graph().push_op("softmax", softmax_rows_value(a.value()), {a},
                           [a](Graph<Scalar>& gr, const Matrix<Scalar>& dy, const Matrix<Scalar>& y) {
                             Vector<Scalar> dot = dy.cwiseProduct(y).rowwise().sum();
                             Matrix<Scalar> dx = y.cwiseProduct(dy.colwise() - dot);
                             gr.accumulate(a.id(), dx);
                           });
}

/// Row-wise layer normalization with affine gamma/beta (both 1 x cols).
template <typename Scalar>
Var<Scalar> layer_norm(Var<Scalar> x, Var<Scalar> gamma, Var<Scalar> beta, Scalar eps) {
  auto& g = x.graph();
  const auto& X = x.value();
  const Index n = X.cols();
  if (gamma.rows() != 1 || gamma.cols() != n || beta.rows() != 1 || beta.cols() != n)
    detail::shape_fail(g, "layer_norm", "affine parameters must be 1x" + std::to_string(n));
  Matrix<Scalar> xhat(X.rows(), n);
  Vector<Scalar> inv_std(X.rows());
  for (Index r = 0; r < X.rows(); ++r) {
    const Scalar mean = X.row(r).mean();
    const Scalar var = (X.row(r).array() - mean).square().mean();
    inv_std(r) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = (X.row(r).array() - mean).matrix() * inv_std(r);
  }
  Matrix<Scalar> out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  return g.push_op("layer_norm", std::move(out), {x, gamma, beta},
                   [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                       Graph<Scalar>& gr, const Matrix<Scalar>& dy, const Matrix<Scalar>&) {
                     if (gr.requires_grad(gamma)) gr.accumulate(gamma.id(), dy.cwiseProduct(xhat).colwise().sum());
                     if (gr.requires_grad(beta)) gr.accumulate(beta.id(), dy.colwise().sum());
                     if (!gr.requires_grad(x)) return;
                     Matrix<Scalar> dxhat = dy.array().rowwise() * gamma.value().row(0).array();
                     Vector<Scalar> mean_d = dxhat.rowwise().mean();
                     Vector<Scalar> mean_dx = dxhat.cwiseProduct(xhat).rowwise().mean();
                     Matrix<Scalar> dx = dxhat.colwise() - mean_d;
                     dx -= (xhat.array().colwise() * mean_dx.array()).matrix();
                     dx = (dx.array().colwise() * inv_std.array()).matrix();
                     gr.accumulate(x.id(), dx);
                   });
}

template <typename Scalar>
Var<Scalar> activation(Var<Scalar> x, Activation kind) {
  const auto& X = x.value();
  if (kind == Activation::Relu) {
    Matrix<Scalar> out = X.cwiseMax(Scalar(0));
    return x.graph().push_op("relu", std::move(out), {x}, [x](Graph<Scalar>& gr, const Matrix<Scalar>& dy, const Matrix<Scalar>&) {
      gr.accumulate(x.id(), dy.cwiseProduct((x.value().array() > Scalar(0)).template cast<Scalar>().matrix()));
    });
  }
  const Scalar inv_sqrt2 = Scalar(0.70710678118654752440);
  Matrix<Scalar> out = X.unaryExpr([inv_sqrt2](Scalar v) { return Scalar(0.5) * v * (Scalar(1) + std::erf(v * inv_sqrt2)); });
  return x.graph().push_op("gelu", std::move(out), {x}, [x, inv_sqrt2](Graph<Scalar>& gr, const Matrix<Scalar>& dy, const Matrix<Scalar>&) {
    const Scalar inv_sqrt_2pi = Scalar(0.39894228040143267794);
    Matrix<Scalar> d = x.value().unaryExpr([&](Scalar v) {
      return Scalar(0.5) * (Scalar(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(Scalar(-0.5) * v * v);
    });
    gr.accumulate(x.id(), dy.cwiseProduct(d));
  });
}

/// Embedding lookup: out.row(i) = table.row(ids[i]).
template <typename Scalar>
Var<Scalar> gather_rows(Var<Scalar> table, std::vector<int> ids) {
  auto& g = table.graph();
  const auto& T = table.value();
  Matrix<Scalar> out(static_cast<Index>(ids.size()), T.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= T.rows())
      detail::shape_fail(g, "gather_rows", "index " + std::to_string(ids[i]) + " outside [0, " + std::to_string(T.rows()) + ")");
    out.row(static_cast<Index>(i)) = T.row(ids[i]);
  }
  return g.push_op("gather_rows", std::move(out), {table},
                   [table, ids = std::move(ids)](Graph<Scalar>& gr, const Matrix<Scalar>& dy, const Matrix<Scalar>&) {
                     gr.accumulate_rows(table.id(), std::span<const int>(ids), dy);
                   });
}

/// Replaces the listed rows with coef[i] * x.row + noise.row(i); other rows pass through untouched.
template <typename Scalar>
Var<Scalar> blend_rows(Var<Scalar> x, std::vector<int> rows, std::vector<Scalar> coef, Matrix<Scalar> noise) {
  auto& g = x.graph();
  const auto& X = x.value();
  if (rows.size() != coef.size() || static_cast<Index>(rows.size()) != noise.rows() || noise.cols() != X.cols())
    detail::shape_fail(g, "blend_rows", "rows/coef/noise disagree");
  Matrix<Scalar> out = X;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= X.rows()) detail::shape_fail(g, "blend_rows", "row index out of range");
    out.row(rows[i]) = coef[i] * X.row(rows[i]) + noise.row(static_cast<Index>(i));
  }
  return g.push_op("blend_rows", std::move(out), {x},
                   [x, rows = std::move(rows), coef = std::move(coef)](Graph<Scalar>& gr, const Matrix<Scalar>& dy, const Matrix<Scalar>&) {
                     Matrix<Scalar> dx = dy;
                     for (std::size_t i = 0; i < rows.size(); ++i) dx.row(rows[i]) *= coef[i];
                     gr.accumulate(x.id(), dx);
                   });
}

/// Multiplies elementwise by a pre-drawn mask (entries 0 or 1/(1-rate)).
template <typename Scalar>
Var<Scalar> apply_mask(Var<Scalar> x, Matrix<Scalar> mask) {
  auto& g = x.graph();
  if (mask.rows() != x.rows() || mask.cols() != x.cols()) detail::shape_fail(g, "dropout", "mask shape mismatch");
  Matrix<Scalar> out = x.value().cwiseProduct(mask);
  return g.push_op("dropout", std::move(out), {x},
                   [x, mask = std::move(mask)](Graph<Scalar>& gr, const Matrix<Scalar>& dy, const Matrix<Scalar>&) {
                     gr.accumulate(x.id(), dy.cwiseProduct(mask));
                   });
}

template <typename Scalar>
Matrix<Scalar> draw_dropout_mask(Index rows, Index cols, double rate, RandomStream& stream) {
  Matrix<Scalar> mask(rows, cols);
  const Scalar keep = static_cast<Scalar>(1.0 / (1.0 - rate));
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = stream.uniform() < rate ? Scalar(0) : keep;
  return mask;
}

/// Inverted dropout. Identity (no node) when `stream` is null or the rate is zero.
template <typename Scalar>
Var<Scalar> dropout(Var<Scalar> x, double rate, RandomStream* stream) {
  if (stream == nullptr || rate <= 0.0) return x;
  return apply_mask(x, draw_dropout_mask<Scalar>(x.rows(), x.cols(), rate, *stream));
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a) {
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  return a.graph().push_op("sum", std::move(out), {a}, [a](Graph<Scalar>& gr, const Matrix<Scalar>& dy, const Matrix<Scalar>&) {
    gr.accumulate(a.id(), Matrix<Scalar>::Constant(a.rows(), a.cols(), dy(0, 0)));
  });
}

/// Mean of squared differences over all elements.
template <typename Scalar>
Var<Scalar> mse(Var<Scalar> a, Var<Scalar> b) {
  auto& g = a.graph();
  if (a.rows() != b.rows() || a.cols() != b.cols())
    detail::shape_fail(g, "mse", detail::dims(a.rows(), a.cols()) + " vs " + detail::dims(b.rows(), b.cols()));
  const Scalar count = static_cast<Scalar>(a.value().size());
  Matrix<Scalar> out(1, 1);
  out(0, 0) = (a.value() - b.value()).squaredNorm() / count;
  return g.push_op("mse", std::move(out), {a, b}, [a, b, count](Graph<Scalar>& gr, const Matrix<Scalar>& dy, const Matrix<Scalar>&) {
    Matrix<Scalar> d = (a.value() - b.value()) * (Scalar(2) * dy(0, 0) / count);
    if (gr.requires_grad(a)) gr.accumulate(a.id(), d);
    if (gr.requires_grad(b)) gr.accumulate(b.id(), -d);
  });
}

/// Per-row squared Euclidean distance, shape (rows x 1).
template <typename Scalar>
Var<Scalar> row_sq_dist(Var<Scalar> a, Var<Scalar> b) {
  auto& g = a.graph();
  if (a.rows() != b.rows() || a.cols() != b.cols())
    detail::shape_fail(g, "row_sq_dist", detail::dims(a.rows(), a.cols()) + " vs " + detail::dims(b.rows(), b.cols()));
  Matrix<Scalar> out = (a.value() - b.value()).rowwise().squaredNorm();
  return g.push_op("row_sq_dist", std::move(out), {a, b}, [a, b](Graph<Scalar>& gr, const Matrix<Scalar>& dy, const Matrix<Scalar>&) {
    Matrix<Scalar> d = (a.value() - b.value()).array().colwise() * (Scalar(2) * dy.col(0).array());
    if (gr.requires_grad(a)) gr.accumulate(a.id(), d);
    if (gr.requires_grad(b)) gr.accumulate(b.id(), -d);
  });
}

/// Per-row cross-entropy of softmax(logits) against integer targets, shape (rows x 1).
template <typename Scalar>
Var<Scalar> cross_entropy_rows(Var<Scalar> logits, std::vector<int> targets) {
  auto& g = logits.graph();
  const auto& L = logits.value();
  if (static_cast<Index>(targets.size()) != L.rows()) detail::shape_fail(g, "cross_entropy", "one target per row required");
  Matrix<Scalar> out(L.rows(), 1);
  for (Index r = 0; r < L.rows(); ++r) {
    const int t = targets[static_cast<std::size_t>(r)];
    if (t < 0 || t >= L.cols()) detail::shape_fail(g, "cross_entropy", "target " + std::to_string(t) + " out of range");
    const Scalar m = L.row(r).maxCoeff();
    const Scalar lse = m + std::log((L.row(r).array() - m).exp().sum());
    out(r, 0) = lse - L(r, t);
  }
  return g.push_op("cross_entropy", std::move(out), {logits},
                   [logits, targets = std::move(targets)](Graph<Scalar>& gr, const Matrix<Scalar>& dy, const Matrix<Scalar>&) {
                     Matrix<Scalar> d = softmax_rows_value(logits.value());
                     for (Index r = 0; r < d.rows(); ++r) {
                       d(r, targets[static_cast<std::size_t>(r)]) -= Scalar(1);
                       d.row(r) *= dy(r, 0);
                     }
                     gr.accumulate(logits.id(), d);
                   });
}

/// sum_i w_i * v_i over all entries of v, with constant weights.
template <typename Scalar>
Var<Scalar> weighted_sum(Var<Scalar> v, Matrix<Scalar> weights) {
  auto& g = v.graph();
  if (weights.rows() != v.rows() || weights.cols() != v.cols()) detail::shape_fail(g, "weighted_sum", "weights shape mismatch");
  Matrix<Scalar> out(1, 1);
  out(0, 0) = v.value().cwiseProduct(weights).sum();
  return g.push_op("weighted_sum", std::move(out), {v},
                   [v, weights = std::move(weights)](Graph<Scalar>& gr, const Matrix<Scalar>& dy, const Matrix<Scalar>&) {
                     gr.accumulate(v.id(), weights * dy(0, 0));
                   });
}

/// Query rows [q_begin, q_begin+q_len) attend over key/value rows [kv_begin, kv_begin+kv_len).
/// Queries are aligned to the last q_len key positions (relevant for causal masking).
struct AttentionSegment {
  Index q_begin = 0;
  Index q_len = 0;
  Index kv_begin = 0;
  Index kv_len = 0;
};

/// Multi-head scaled dot-product attention over independent packed segments.
/// Rows outside every segment are never read; padding is expressed by leaving it out.
template <typename Scalar>
Var<Scalar> attention(Var<Scalar> q, Var<Scalar> k, Var<Scalar> v, std::vector<AttentionSegment> segments, int heads,
                      bool causal, double dropout_rate = 0.0, RandomStream* stream = nullptr) {
  auto& g = q.graph();
  const auto& Q = q.value();
  const auto& K = k.value();
  const auto& V = v.value();
  const Index d = Q.cols();
  if (K.cols() != d || V.cols() != d || K.rows() != V.rows()) detail::shape_fail(g, "attention", "q/k/v widths disagree");
  if (heads <= 0 || d % heads != 0) detail::shape_fail(g, "attention", "width not divisible by head count");
  const Index dh = d / heads;
  const Scalar inv_scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  const bool drop = stream != nullptr && dropout_rate > 0.0;

  struct Saved {
    Matrix<Scalar> probs;
    Matrix<Scalar> mask;
  };
  std::vector<Saved> saved;
  saved.reserve(segments.size() * static_cast<std::size_t>(heads));
  Matrix<Scalar> out = Matrix<Scalar>::Zero(Q.rows(), d);
  for (const auto& s : segments) {
    if (s.q_begin < 0 || s.q_begin + s.q_len > Q.rows() || s.kv_begin < 0 || s.kv_begin + s.kv_len > K.rows() ||
        s.q_len > s.kv_len || s.kv_len == 0)
      detail::shape_fail(g, "attention", "segment out of range");
    for (int h = 0; h < heads; ++h) {
      auto qs = Q.block(s.q_begin, h * dh, s.q_len, dh);
      auto ks = K.block(s.kv_begin, h * dh, s.kv_len, dh);
      auto vs = V.block(s.kv_begin, h * dh, s.kv_len, dh);
      Matrix<Scalar> scores = (qs * ks.transpose()) * inv_scale;
      if (causal) {
        const Index offset = s.kv_len - s.q_len;
        for (Index i = 0; i < s.q_len; ++i)
          for (Index j = offset + i + 1; j < s.kv_len; ++j) scores(i, j) = -std::numeric_limits<Scalar>::infinity();
      }
      Saved sv;
      sv.probs = softmax_rows_value(scores);
      if (drop) {
        sv.mask = draw_dropout_mask<Scalar>(s.q_len, s.kv_len, dropout_rate, *stream);
        out.block(s.q_begin, h * dh, s.q_len, dh) = sv.probs.cwiseProduct(sv.mask) * vs;
      } else {
        out.block(s.q_begin, h * dh, s.q_len, dh) = sv.probs * vs;
      }
      saved.push_back(std::move(sv));
    }
  }
  return g.push_op("attention", std::move(out), {q, k, v},
                   [q, k, v, segments = std::move(segments), heads, dh, inv_scale, saved = std::move(saved)](
                       Graph<Scalar>& gr, const Matrix<Scalar>& dout, const Matrix<Scalar>&) {
                     const auto& Q = q.value();
                     const auto& K = k.value();
                     const auto& V = v.value();
                     Matrix<Scalar> dq = Matrix<Scalar>::Zero(Q.rows(), Q.cols());
                     Matrix<Scalar> dk = Matrix<Scalar>::Zero(K.rows(), K.cols());
                     Matrix<Scalar> dv = Matrix<Scalar>::Zero(V.rows(), V.cols());
                     std::size_t idx = 0;
                     for (const auto& s : segments) {
                       for (int h = 0; h < heads; ++h, ++idx) {
                         const Saved& sv = saved[idx];
                         auto qs = Q.block(s.q_begin, h * dh, s.q_len, dh);
                         auto ks = K.block(s.kv_begin, h * dh, s.kv_len, dh);
                         auto vs = V.block(s.kv_begin, h * dh, s.kv_len, dh);
                         auto go = dout.block(s.q_begin, h * dh, s.q_len, dh);
                         const bool masked = sv.mask.size() != 0;
                         Matrix<Scalar> pd = masked ? Matrix<Scalar>(sv.probs.cwiseProduct(sv.mask)) : sv.probs;
                         dv.block(s.kv_begin, h * dh, s.kv_len, dh) += pd.transpose() * go;
                         Matrix<Scalar> dp = go * vs.transpose();
                         if (masked) dp = dp.cwiseProduct(sv.mask);
                         Vector<Scalar> dot = dp.cwiseProduct(sv.probs).rowwise().sum();
                         Matrix<Scalar> ds = sv.probs.cwiseProduct(dp.colwise() - dot) * inv_scale;
                         dq.block(s.q_begin, h * dh, s.q_len, dh) += ds * ks;
                         dk.block(s.kv_begin, h * dh, s.kv_len, dh) += ds.transpose() * qs;
                       }
                     }
                     gr.accumulate(q.id(), dq);
                     gr.accumulate(k.id(), dk);
                     gr.accumulate(v.id(), dv);
                   });
}

}  // namespace seqdiff
