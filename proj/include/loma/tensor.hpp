#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "loma/errors.hpp"
#include "loma/rng.hpp"

namespace loma {

using Index = Eigen::Index;

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// 1 = attention allowed, 0 = blocked. Row = query, col = key.
using MaskMat = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr double kRmsNormEps = 1e-5;

// ---------------------------------------------------------------------------
// Row kernels shared by the autodiff ops and the cache-based inference path.
// Keeping one implementation makes train-mode and generate-mode forwards agree
// to the last bit, which the train/infer equivalence checks rely on.
// ---------------------------------------------------------------------------

// Rowwise masked softmax. Disallowed entries come out exactly 0: the row max is
// taken over allowed entries only, so a blocked key cannot influence the row at
// all (the limit of the additive large-negative-offset scheme).
template <class S>
Mat<S> masked_softmax_rows(const Mat<S>& scores, const MaskMat& mask) {
  if (scores.rows() != mask.rows() || scores.cols() != mask.cols()) {
    throw ShapeError("masked_softmax: mask shape " + std::to_string(mask.rows()) + "x" +
                     std::to_string(mask.cols()) + " != scores shape " +
                     std::to_string(scores.rows()) + "x" + std::to_string(scores.cols()));
  }
  Mat<S> probs(scores.rows(), scores.cols());
  for (Index i = 0; i < scores.rows(); ++i) {
    S row_max = std::numeric_limits<S>::lowest();
    Index allowed = 0;
    for (Index j = 0; j < scores.cols(); ++j) {
      if (mask(i, j)) {
        ++allowed;
        row_max = std::max(row_max, scores(i, j));
      }
    }
    if (allowed == 0) {
      throw NumericError("masked_softmax: fully-masked row " + std::to_string(i));
    }
    S sum = S(0);
    for (Index j = 0; j < scores.cols(); ++j) {
      const S e = mask(i, j) ? std::exp(scores(i, j) - row_max) : S(0);
      probs(i, j) = e;
      sum += e;
    }
    probs.row(i) /= sum;
  }
  return probs;
}

// Rotary rotation applied in place, one position id per row. Pairs are
// (x[j], x[j+d/2]); direction -1 rotates backwards (used for gradients).
template <class S>
void rope_rows_inplace(Eigen::Ref<Mat<S>> x, std::span<const int> positions, double base,
                       int direction = 1) {
  const Index half = x.cols() / 2;
  if (x.cols() % 2 != 0) throw ShapeError("rope: head dim must be even");
  if (static_cast<Index>(positions.size()) != x.rows()) {
    throw ShapeError("rope: positions length != rows");
  }
  for (Index i = 0; i < x.rows(); ++i) {
    for (Index j = 0; j < half; ++j) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(x.cols()));
      const double angle = direction * static_cast<double>(positions[static_cast<size_t>(i)]) * freq;
      const S c = static_cast<S>(std::cos(angle));
      const S s = static_cast<S>(std::sin(angle));
      const S a = x(i, j);
      const S b = x(i, j + half);
      x(i, j) = a * c - b * s;
      x(i, j + half) = a * s + b * c;
    }
  }
}

// y = x * gain / rms(x) per row, rms over the row with kRmsNormEps.
template <class S>
Mat<S> rms_norm_rows(const Mat<S>& x, const Mat<S>& gain) {
  if (gain.rows() != 1 || gain.cols() != x.cols()) throw ShapeError("rms_norm: gain shape");
  Mat<S> y(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const S ms = x.row(i).squaredNorm() / static_cast<S>(x.cols());
    const S r = std::sqrt(ms + static_cast<S>(kRmsNormEps));
    y.row(i) = x.row(i).cwiseProduct(gain.row(0)) / r;
  }
  return y;
}

// -log softmax(logits)[target] for one logit row.
template <class S>
S cross_entropy_row(const Eigen::Ref<const Eigen::Matrix<S, 1, Eigen::Dynamic, Eigen::RowMajor>>& logits,
                    int target) {
  if (target < 0 || target >= logits.cols()) {
    throw ShapeError("cross_entropy: target " + std::to_string(target) + " outside vocabulary of " +
                     std::to_string(logits.cols()));
  }
  const S m = logits.maxCoeff();
  S sum = S(0);
  for (Index j = 0; j < logits.cols(); ++j) sum += std::exp(logits(0, j) - m);
  return m + std::log(sum) - logits(0, target);
}

// ---------------------------------------------------------------------------
// Autodiff graph
// ---------------------------------------------------------------------------

// One node: dense values plus an optional same-shape gradient buffer.
// Rank-1 tensors are stored as 1xN rows; `shape` keeps the logical extents.
template <class S>
struct Tensor {
  Mat<S> value;
  Mat<S> grad;  // empty until backward touches this node
  std::vector<Index> shape;
  bool requires_grad = false;
  std::uint64_t graph_id = 0;  // 0 = leaf
  std::function<void()> backprop;

  Index rows() const { return value.rows(); }
  Index cols() const { return value.cols(); }

  bool has_grad() const { return grad.size() == value.size() && value.size() > 0; }
  void ensure_grad() {
    if (!has_grad()) grad = Mat<S>::Zero(value.rows(), value.cols());
  }
  void zero_grad() { grad = Mat<S>::Zero(value.rows(), value.cols()); }
  bool wants_grad() const { return requires_grad || graph_id != 0; }
};

template <class S>
using TensorPtr = std::shared_ptr<Tensor<S>>;

// Trainable leaf; gradient buffer allocated up front so "unreachable parameter
// has zero gradient" can be read off directly.
template <class S>
TensorPtr<S> make_param(Mat<S> m) {
  auto t = std::make_shared<Tensor<S>>();
  t->shape = {m.rows(), m.cols()};
  t->value = std::move(m);
  t->requires_grad = true;
  t->zero_grad();
  return t;
}

template <class S>
TensorPtr<S> make_param_row(std::vector<S> v) {
  Mat<S> m(1, static_cast<Index>(v.size()));
  for (Index j = 0; j < m.cols(); ++j) m(0, j) = v[static_cast<size_t>(j)];
  auto t = make_param<S>(std::move(m));
  t->shape = {t->value.cols()};
  return t;
}

template <class S>
TensorPtr<S> make_const(Mat<S> m) {
  auto t = std::make_shared<Tensor<S>>();
  t->shape = {m.rows(), m.cols()};
  t->value = std::move(m);
  return t;
}

// Ordered op records; creation order is a valid topological order, so the
// reverse sweep visits every node after all of its consumers.
template <class S>
class Graph {
 public:
  Graph() : id_(next_id()) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  TensorPtr<S> track(Mat<S> value, std::vector<Index> shape) {
    auto t = std::make_shared<Tensor<S>>();
    t->shape = std::move(shape);
    t->value = std::move(value);
    t->graph_id = id_;
    nodes_.push_back(t);
    return t;
  }

  TensorPtr<S> track(Mat<S> value) {
    std::vector<Index> shape{value.rows(), value.cols()};
    return track(std::move(value), std::move(shape));
  }

  // Seeds d(loss)/d(loss) = seed and propagates back through the tape.
  void backward(const TensorPtr<S>& loss, S seed = S(1)) {
    if (consumed_) throw StateError("backward: graph already consumed");
    if (!loss || loss->graph_id != id_) throw StateError("backward: loss is not an output of this graph");
    if (loss->value.size() != 1) throw ShapeError("backward: loss must be scalar");
    consumed_ = true;
    loss->ensure_grad();
    loss->grad(0, 0) += seed;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      auto& node = *it;
      if (node->has_grad() && node->backprop) node->backprop();
    }
  }

  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  static std::uint64_t next_id() {
    static std::uint64_t counter = 0;
    return ++counter;
  }

  std::uint64_t id_;
  std::vector<TensorPtr<S>> nodes_;
  bool consumed_ = false;
};

namespace detail {

template <class S>
inline void check_same_shape(const TensorPtr<S>& a, const TensorPtr<S>& b, const char* op) {
  if (a->rows() != b->rows() || a->cols() != b->cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a->rows()) + "x" +
                     std::to_string(a->cols()) + " vs " + std::to_string(b->rows()) + "x" +
                     std::to_string(b->cols()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops. Each registers its gradient rule on the output node.
// ---------------------------------------------------------------------------

template <class S>
TensorPtr<S> add(Graph<S>& g, const TensorPtr<S>& a, const TensorPtr<S>& b) {
  detail::check_same_shape(a, b, "add");
  auto out = g.track(a->value + b->value, a->shape);
  Tensor<S>* o = out.get();
  out->backprop = [o, a, b] {
    if (a->wants_grad()) {
      a->ensure_grad();
      a->grad += o->grad;
    }
    if (b->wants_grad()) {
      b->ensure_grad();
      b->grad += o->grad;
    }
  };
  return out;
}

template <class S>
TensorPtr<S> mul(Graph<S>& g, const TensorPtr<S>& a, const TensorPtr<S>& b) {
  detail::check_same_shape(a, b, "mul");
  auto out = g.track(a->value.cwiseProduct(b->value), a->shape);
  Tensor<S>* o = out.get();
  out->backprop = [o, a, b] {
    if (a->wants_grad()) {
      a->ensure_grad();
      a->grad += o->grad.cwiseProduct(b->value);
    }
    if (b->wants_grad()) {
      b->ensure_grad();
      b->grad += o->grad.cwiseProduct(a->value);
    }
  };
  return out;
}

template <class S>
TensorPtr<S> scale(Graph<S>& g, const TensorPtr<S>& a, S factor) {
  auto out = g.track(a->value * factor, a->shape);
  Tensor<S>* o = out.get();
  out->backprop = [o, a, factor] {
    if (a->wants_grad()) {
      a->ensure_grad();
      a->grad += o->grad * factor;
    }
  };
  return out;
}

template <class S>
TensorPtr<S> matmul(Graph<S>& g, const TensorPtr<S>& a, const TensorPtr<S>& b) {
  if (a->cols() != b->rows()) {
    throw ShapeError("matmul: inner extents " + std::to_string(a->cols()) + " vs " +
                     std::to_string(b->rows()));
  }
  auto out = g.track(a->value * b->value);
  Tensor<S>* o = out.get();
  out->backprop = [o, a, b] {
    if (a->wants_grad()) {
      a->ensure_grad();
      a->grad.noalias() += o->grad * b->value.transpose();
    }
    if (b->wants_grad()) {
      b->ensure_grad();
      b->grad.noalias() += a->value.transpose() * o->grad;
    }
  };
  return out;
}

// a * b^T, used for attention scores.
template <class S>
TensorPtr<S> matmul_nt(Graph<S>& g, const TensorPtr<S>& a, const TensorPtr<S>& b) {
  if (a->cols() != b->cols()) {
    throw ShapeError("matmul_nt: inner extents " + std::to_string(a->cols()) + " vs " +
                     std::to_string(b->cols()));
  }
  auto out = g.track(a->value * b->value.transpose());
  Tensor<S>* o = out.get();
  out->backprop = [o, a, b] {
    if (a->wants_grad()) {
      a->ensure_grad();
      a->grad.noalias() += o->grad * b->value;
    }
    if (b->wants_grad()) {
      b->ensure_grad();
      b->grad.noalias() += o->grad.transpose() * a->value;
    }
  };
  return out;
}

template <class S>
TensorPtr<S> sum(Graph<S>& g, const TensorPtr<S>& a) {
  Mat<S> v(1, 1);
  v(0, 0) = a->value.sum();
  auto out = g.track(std::move(v), {1});
  Tensor<S>* o = out.get();
  out->backprop = [o, a] {
    if (a->wants_grad()) {
      a->ensure_grad();
      a->grad.array() += o->grad(0, 0);
    }
  };
  return out;
}

template <class S>
TensorPtr<S> silu(Graph<S>& g, const TensorPtr<S>& a) {
  Mat<S> sig = (S(1) / (S(1) + (-a->value.array()).exp())).matrix();
  auto out = g.track(a->value.cwiseProduct(sig), a->shape);
  Tensor<S>* o = out.get();
  out->backprop = [o, a, sig = std::move(sig)] {
    if (!a->wants_grad()) return;
    a->ensure_grad();
    // d/dx x*sig(x) = sig(x) * (1 + x * (1 - sig(x)))
    a->grad.array() +=
        o->grad.array() * sig.array() * (S(1) + a->value.array() * (S(1) - sig.array()));
  };
  return out;
}

// Rows [start, start+len) of x; gradient scatters back into that block.
template <class S>
TensorPtr<S> slice_rows(Graph<S>& g, const TensorPtr<S>& x, Index start, Index len) {
  if (start < 0 || len < 0 || start + len > x->rows()) {
    throw ShapeError("slice_rows: range [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") outside " + std::to_string(x->rows()) +
                     " rows");
  }
  auto out = g.track(x->value.middleRows(start, len));
  Tensor<S>* o = out.get();
  out->backprop = [o, x, start, len] {
    if (!x->wants_grad()) return;
    x->ensure_grad();
    x->grad.middleRows(start, len) += o->grad;
  };
  return out;
}

// Gather one table row per id; gradient accumulates row-wise into the table.
template <class S>
TensorPtr<S> embedding_rows(Graph<S>& g, const TensorPtr<S>& table, std::vector<int> ids) {
  Mat<S> v(static_cast<Index>(ids.size()), table->cols());
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table->rows()) {
      throw ShapeError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                       std::to_string(table->rows()) + " rows");
    }
    v.row(static_cast<Index>(i)) = table->value.row(ids[i]);
  }
  auto out = g.track(std::move(v));
  Tensor<S>* o = out.get();
  out->backprop = [o, table, ids = std::move(ids)] {
    if (!table->wants_grad()) return;
    table->ensure_grad();
    for (size_t i = 0; i < ids.size(); ++i) {
      table->grad.row(ids[i]) += o->grad.row(static_cast<Index>(i));
    }
  };
  return out;
}

template <class S>
TensorPtr<S> rope(Graph<S>& g, const TensorPtr<S>& x, std::vector<int> positions, double base) {
  Mat<S> v = x->value;
  rope_rows_inplace<S>(v, positions, base, 1);
  auto out = g.track(std::move(v), x->shape);
  Tensor<S>* o = out.get();
  out->backprop = [o, x, positions = std::move(positions), base] {
    if (!x->wants_grad()) return;
    x->ensure_grad();
    Mat<S> gi = o->grad;
    rope_rows_inplace<S>(gi, positions, base, -1);  // rotation is orthogonal
    x->grad += gi;
  };
  return out;
}

template <class S>
TensorPtr<S> rms_norm(Graph<S>& g, const TensorPtr<S>& x, const TensorPtr<S>& gain) {
  auto out = g.track(rms_norm_rows(x->value, gain->value), x->shape);
  Tensor<S>* o = out.get();
  out->backprop = [o, x, gain] {
    const Index d = x->cols();
    for (Index i = 0; i < x->rows(); ++i) {
      const S ms = x->value.row(i).squaredNorm() / static_cast<S>(d);
      const S r = std::sqrt(ms + static_cast<S>(kRmsNormEps));
      auto gr = o->grad.row(i);
      if (gain->wants_grad()) {
        gain->ensure_grad();
        gain->grad.row(0) += gr.cwiseProduct(x->value.row(i)) / r;
      }
      if (x->wants_grad()) {
        x->ensure_grad();
        const S inner = gr.cwiseProduct(gain->value.row(0)).dot(x->value.row(i));
        x->grad.row(i) += gr.cwiseProduct(gain->value.row(0)) / r -
                          x->value.row(i) * (inner / (static_cast<S>(d) * r * r * r));
      }
    }
  };
  return out;
}

template <class S>
TensorPtr<S> masked_softmax(Graph<S>& g, const TensorPtr<S>& scores, const MaskMat& mask) {
  auto out = g.track(masked_softmax_rows(scores->value, mask), scores->shape);
  Tensor<S>* o = out.get();
  out->backprop = [o, scores] {
    if (!scores->wants_grad()) return;
    scores->ensure_grad();
    for (Index i = 0; i < o->value.rows(); ++i) {
      const S dot = o->grad.row(i).dot(o->value.row(i));
      // p == 0 on masked entries, so they receive exactly zero gradient.
      scores->grad.row(i) +=
          o->value.row(i).cwiseProduct(o->grad.row(i)) - o->value.row(i) * dot;
    }
  };
  return out;
}

// Rank-1 cross entropy against one target id.
template <class S>
TensorPtr<S> cross_entropy(Graph<S>& g, const TensorPtr<S>& logits, int target) {
  if (logits->rows() != 1) throw ShapeError("cross_entropy: logits must be rank-1");
  Mat<S> v(1, 1);
  v(0, 0) = cross_entropy_row<S>(logits->value.row(0), target);
  auto out = g.track(std::move(v), {1});
  Tensor<S>* o = out.get();
  out->backprop = [o, logits, target] {
    if (!logits->wants_grad()) return;
    logits->ensure_grad();
    const S m = logits->value.row(0).maxCoeff();
    Mat<S> p = (logits->value.row(0).array() - m).exp().matrix();
    p /= p.sum();
    p(0, target) -= S(1);
    logits->grad.row(0) += p * o->grad(0, 0);
  };
  return out;
}

// Sum of per-row cross entropies; rows with label < 0 contribute nothing and
// receive exactly zero gradient.
template <class S>
TensorPtr<S> cross_entropy_rows(Graph<S>& g, const TensorPtr<S>& logits, std::vector<int> labels) {
  if (static_cast<Index>(labels.size()) != logits->rows()) {
    throw ShapeError("cross_entropy_rows: labels length != logit rows");
  }
  S total = S(0);
  for (Index i = 0; i < logits->rows(); ++i) {
    const int y = labels[static_cast<size_t>(i)];
    if (y < 0) continue;
    total += cross_entropy_row<S>(logits->value.row(i), y);
  }
  Mat<S> v(1, 1);
  v(0, 0) = total;
  auto out = g.track(std::move(v), {1});
  Tensor<S>* o = out.get();
  out->backprop = [o, logits, labels = std::move(labels)] {
    if (!logits->wants_grad()) return;
    logits->ensure_grad();
    for (Index i = 0; i < logits->rows(); ++i) {
      const int y = labels[static_cast<size_t>(i)];
      if (y < 0) continue;
      const S m = logits->value.row(i).maxCoeff();
      Mat<S> p = (logits->value.row(i).array() - m).exp().matrix();
      p /= p.sum();
      p(0, y) -= S(1);
      logits->grad.row(i) += p * o->grad(0, 0);
    }
  };
  return out;
}

// Seeded N(mean, stddev) matrix, drawn row-major.
template <class S>
Mat<S> random_normal(Index rows, Index cols, NormalRng& rng, double mean = 0.0,
                     double stddev = 1.0) {
  Mat<S> m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) {
      m(i, j) = static_cast<S>(rng.normal(mean, stddev));
    }
  }
  return m;
}

}  // namespace loma
