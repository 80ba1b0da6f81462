// Reverse-mode automatic differentiation over dense Eigen matrices.
//
// A Tape records every operation applied to Var handles together with a
// backward closure. Calling backward() on a scalar output walks the tape in
// reverse and accumulates gradients, including into Parameter leaves.
// A tape constructed with record = false only evaluates values.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace srcomm::ad {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <typename T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
struct Parameter {
  std::string name;
  Mat<T> value;
  Mat<T> grad;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Mat<T>& value() const { return tape->value(id); }
  const Mat<T>& grad() const { return tape->grad(id); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool valid() const { return tape != nullptr; }
};

template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, int)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  Var<T> constant(Mat<T> value) { return push(std::move(value), false, {}); }

  /// Leaf bound to a parameter; registered once per tape.
  Var<T> param(Parameter<T>& p) {
    if (auto it = param_ids_.find(&p); it != param_ids_.end()) return {this, it->second};
    Var<T> v;
    if (record_) {
      Parameter<T>* target = &p;
      v = push(p.value, true, [target](Tape& t, int self) {
        const Mat<T>& g = t.grad(self);
        if (target->grad.size() == 0) target->grad = g;
        else target->grad += g;
      });
    } else {
      v = push(p.value, false, {});
    }
    param_ids_.emplace(&p, v.id);
    return v;
  }

  /// New node; when any input requires grad the closure is kept.
  Var<T> push(Mat<T> value, bool requires_grad, Backward backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = record_ && requires_grad;
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  const Mat<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const Mat<T>& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  template <typename Expr>
  void accumulate(int id, const Expr& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) n.grad = g;
    else n.grad += g;
  }

  /// Reverse sweep from a 1x1 output.
  void backward(Var<T> root) {
    if (!record_) throw std::logic_error("backward on a non-recording tape");
    Node& r = nodes_[static_cast<std::size_t>(root.id)];
    if (r.value.size() != 1) throw std::invalid_argument("backward root must be a scalar");
    if (!r.requires_grad) return;
    r.grad = Mat<T>::Ones(1, 1);
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.requires_grad && n.grad.size() != 0 && n.backward) n.backward(*this, i);
    }
  }

 private:
  struct Node {
    Mat<T> value;
    Mat<T> grad;
    bool requires_grad = false;
    Backward backward;
  };
  bool record_;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, int> param_ids_;
};

namespace detail {
template <typename T>
bool any_grad(const Var<T>& a) {
  return a.tape->requires_grad(a.id);
}
template <typename T>
bool any_grad(const Var<T>& a, const Var<T>& b) {
  return a.tape->requires_grad(a.id) || b.tape->requires_grad(b.id);
}
template <typename T>
void check_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()) + ")");
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimensions differ");
  Mat<T> out(a.rows(), b.cols());
  out.noalias() = a.value() * b.value();
  const int ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), detail::any_grad(a, b), [ia, ib](Tape<T>& t, int self) {
    const Mat<T>& g = t.grad(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::check_same_shape(a, b, "add");
  const int ia = a.id, ib = b.id;
  return a.tape->push(a.value() + b.value(), detail::any_grad(a, b), [ia, ib](Tape<T>& t, int self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate(ib, t.grad(self));
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::check_same_shape(a, b, "sub");
  const int ia = a.id, ib = b.id;
  return a.tape->push(a.value() - b.value(), detail::any_grad(a, b), [ia, ib](Tape<T>& t, int self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate(ib, -t.grad(self));
  });
}

/// a (n x m) + row vector b (1 x m) broadcast over rows.
template <typename T>
Var<T> add_rowwise(Var<T> a, Var<T> b) {
  if (b.rows() != 1 || b.cols() != a.cols()) throw std::invalid_argument("add_rowwise: bias shape mismatch");
  Mat<T> out = a.value().rowwise() + b.value().row(0);
  const int ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), detail::any_grad(a, b), [ia, ib](Tape<T>& t, int self) {
    t.accumulate(ia, t.grad(self));
    if (t.requires_grad(ib)) t.accumulate(ib, t.grad(self).colwise().sum());
  });
}

/// a (n x m) + column vector b (n x 1) broadcast over columns.
template <typename T>
Var<T> add_colwise(Var<T> a, Var<T> b) {
  if (b.cols() != 1 || b.rows() != a.rows()) throw std::invalid_argument("add_colwise: shape mismatch");
  Mat<T> out = a.value().colwise() + b.value().col(0);
  const int ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), detail::any_grad(a, b), [ia, ib](Tape<T>& t, int self) {
    t.accumulate(ia, t.grad(self));
    if (t.requires_grad(ib)) t.accumulate(ib, t.grad(self).rowwise().sum());
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::check_same_shape(a, b, "mul");
  const int ia = a.id, ib = b.id;
  return a.tape->push(a.value().cwiseProduct(b.value()), detail::any_grad(a, b), [ia, ib](Tape<T>& t, int self) {
    const Mat<T>& g = t.grad(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  const int ia = a.id;
  return a.tape->push(a.value() * s, detail::any_grad(a), [ia, s](Tape<T>& t, int self) {
    t.accumulate(ia, t.grad(self) * s);
  });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T s) {
  const int ia = a.id;
  return a.tape->push(a.value().array() + s, detail::any_grad(a),
                      [ia](Tape<T>& t, int self) { t.accumulate(ia, t.grad(self)); });
}

/// Elementwise product with a constant matrix.
template <typename T>
Var<T> mul_const(Var<T> a, Mat<T> c) {
  if (c.rows() != a.rows() || c.cols() != a.cols()) throw std::invalid_argument("mul_const: shape mismatch");
  Mat<T> out = a.value().cwiseProduct(c);
  const int ia = a.id;
  return a.tape->push(std::move(out), detail::any_grad(a), [ia, c = std::move(c)](Tape<T>& t, int self) {
    t.accumulate(ia, t.grad(self).cwiseProduct(c));
  });
}

/// Row i scaled by the constant factor[i].
template <typename T>
Var<T> scale_rows(Var<T> a, ColVec<T> factor) {
  if (factor.size() != a.rows()) throw std::invalid_argument("scale_rows: length mismatch");
  Mat<T> out = factor.asDiagonal() * a.value();
  const int ia = a.id;
  return a.tape->push(std::move(out), detail::any_grad(a), [ia, f = std::move(factor)](Tape<T>& t, int self) {
    t.accumulate(ia, f.asDiagonal() * t.grad(self));
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sigmoid(Var<T> a) {
  Mat<T> out = (T(1) + (-a.value().array()).exp()).inverse().matrix();
  const int ia = a.id;
  return a.tape->push(std::move(out), detail::any_grad(a), [ia](Tape<T>& t, int self) {
    const auto y = t.value(self).array();
    t.accumulate(ia, (t.grad(self).array() * y * (T(1) - y)).matrix());
  });
}

template <typename T>
Var<T> tanh(Var<T> a) {
  Mat<T> out = a.value().array().tanh().matrix();
  const int ia = a.id;
  return a.tape->push(std::move(out), detail::any_grad(a), [ia](Tape<T>& t, int self) {
    const auto y = t.value(self).array();
    t.accumulate(ia, (t.grad(self).array() * (T(1) - y * y)).matrix());
  });
}

template <typename T>
Var<T> relu(Var<T> a) {
  Mat<T> out = a.value().cwiseMax(T(0));
  const int ia = a.id;
  return a.tape->push(std::move(out), detail::any_grad(a), [ia](Tape<T>& t, int self) {
    t.accumulate(ia, (t.value(ia).array() > T(0)).select(t.grad(self), T(0)).matrix());
  });
}

template <typename T>
Var<T> exp(Var<T> a) {
  Mat<T> out = a.value().array().exp().matrix();
  const int ia = a.id;
  return a.tape->push(std::move(out), detail::any_grad(a), [ia](Tape<T>& t, int self) {
    t.accumulate(ia, t.grad(self).cwiseProduct(t.value(self)));
  });
}

template <typename T>
Var<T> square(Var<T> a) {
  Mat<T> out = a.value().array().square().matrix();
  const int ia = a.id;
  return a.tape->push(std::move(out), detail::any_grad(a), [ia](Tape<T>& t, int self) {
    t.accumulate(ia, (T(2) * t.grad(self).array() * t.value(ia).array()).matrix());
  });
}

/// Elementwise minimum; ties route the gradient to the first argument.
template <typename T>
Var<T> minimum(Var<T> a, Var<T> b) {
  detail::check_same_shape(a, b, "minimum");
  Mat<T> out = a.value().cwiseMin(b.value());
  const int ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), detail::any_grad(a, b), [ia, ib](Tape<T>& t, int self) {
    const auto take_a = (t.value(ia).array() <= t.value(ib).array());
    const Mat<T>& g = t.grad(self);
    t.accumulate(ia, take_a.select(g, T(0)).matrix());
    t.accumulate(ib, take_a.select(T(0), g).matrix());
  });
}

/// Clamp to [lo, hi]; zero gradient outside the open interval.
template <typename T>
Var<T> clamp(Var<T> a, T lo, T hi) {
  Mat<T> out = a.value().cwiseMax(lo).cwiseMin(hi);
  const int ia = a.id;
  return a.tape->push(std::move(out), detail::any_grad(a), [ia, lo, hi](Tape<T>& t, int self) {
    const auto x = t.value(ia).array();
    t.accumulate(ia, ((x > lo) && (x < hi)).select(t.grad(self), T(0)).matrix());
  });
}

/// Row-wise log-softmax.
template <typename T>
Var<T> log_softmax(Var<T> a) {
  const Mat<T>& x = a.value();
  ColVec<T> mx = x.rowwise().maxCoeff();
  Mat<T> shifted = x.colwise() - mx;
  ColVec<T> lse = shifted.array().exp().rowwise().sum().log().matrix();
  Mat<T> out = shifted.colwise() - lse;
  const int ia = a.id;
  return a.tape->push(std::move(out), detail::any_grad(a), [ia](Tape<T>& t, int self) {
    const Mat<T>& g = t.grad(self);
    Mat<T> p = t.value(self).array().exp().matrix();
    ColVec<T> gs = g.rowwise().sum();
    t.accumulate(ia, g - p.cwiseProduct(gs.replicate(1, p.cols())));
  });
}

/// out[i] = a(i, index[i]).
template <typename T>
Var<T> pick(Var<T> a, std::vector<int> index) {
  if (static_cast<Eigen::Index>(index.size()) != a.rows()) throw std::invalid_argument("pick: length mismatch");
  Mat<T> out(a.rows(), 1);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const int j = index[static_cast<std::size_t>(i)];
    if (j < 0 || j >= a.cols()) throw std::out_of_range("pick: index out of range");
    out(i, 0) = a.value()(i, j);
  }
  const int ia = a.id;
  const Eigen::Index cols = a.cols();
  return a.tape->push(std::move(out), detail::any_grad(a), [ia, cols, idx = std::move(index)](Tape<T>& t, int self) {
    const Mat<T>& g = t.grad(self);
    Mat<T> ga = Mat<T>::Zero(g.rows(), cols);
    for (Eigen::Index i = 0; i < g.rows(); ++i) ga(i, idx[static_cast<std::size_t>(i)]) = g(i, 0);
    t.accumulate(ia, ga);
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Var<T> row_sum(Var<T> a) {
  Mat<T> out = a.value().rowwise().sum();
  const int ia = a.id;
  const Eigen::Index cols = a.cols();
  return a.tape->push(std::move(out), detail::any_grad(a), [ia, cols](Tape<T>& t, int self) {
    t.accumulate(ia, t.grad(self).replicate(1, cols));
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  Mat<T> out(1, 1);
  out(0, 0) = a.value().sum();
  const int ia = a.id;
  const Eigen::Index r = a.rows(), c = a.cols();
  return a.tape->push(std::move(out), detail::any_grad(a), [ia, r, c](Tape<T>& t, int self) {
    t.accumulate(ia, Mat<T>::Constant(r, c, t.grad(self)(0, 0)));
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
    rg = rg || detail::any_grad(p);
  }
  Mat<T> out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    spans.emplace_back(p.id, p.cols());
    at += p.cols();
  }
  return parts[0].tape->push(std::move(out), rg, [spans = std::move(spans)](Tape<T>& t, int self) {
    Eigen::Index off = 0;
    for (const auto& [id, width] : spans) {
      t.accumulate(id, t.grad(self).middleCols(off, width));
      off += width;
    }
  });
}

template <typename T>
Var<T> concat_cols(std::initializer_list<Var<T>> parts) {
  std::vector<Var<T>> v(parts);
  return concat_cols<T>(std::span<const Var<T>>(v));
}

template <typename T>
Var<T> slice_cols(Var<T> a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || start + count > a.cols()) throw std::out_of_range("slice_cols: range out of bounds");
  Mat<T> out = a.value().middleCols(start, count);
  const int ia = a.id;
  const Eigen::Index rows = a.rows(), cols = a.cols();
  return a.tape->push(std::move(out), detail::any_grad(a), [ia, start, count, rows, cols](Tape<T>& t, int self) {
    Mat<T> g = Mat<T>::Zero(rows, cols);
    g.middleCols(start, count) = t.grad(self);
    t.accumulate(ia, g);
  });
}

/// Each row repeated `times` consecutively: (n x m) -> (n*times x m).
template <typename T>
Var<T> repeat_rows(Var<T> a, Eigen::Index times) {
  const Eigen::Index n = a.rows(), m = a.cols();
  Mat<T> out(n * times, m);
  for (Eigen::Index j = 0; j < m; ++j) {
    auto col = Eigen::Map<Mat<T>>(out.col(j).data(), times, n);
    col = a.value().col(j).transpose().replicate(times, 1);
  }
  const int ia = a.id;
  return a.tape->push(std::move(out), detail::any_grad(a), [ia, n, m, times](Tape<T>& t, int self) {
    const Mat<T>& g = t.grad(self);
    Mat<T> ga(n, m);
    for (Eigen::Index j = 0; j < m; ++j)
      ga.col(j) = Eigen::Map<const Mat<T>>(g.col(j).data(), times, n).colwise().sum().transpose();
    t.accumulate(ia, ga);
  });
}

// ---------------------------------------------------------------------------
// Convolution support. Feature maps are stored as (batch * h * w) x channels,
// sample-major then row-major over positions.
// ---------------------------------------------------------------------------

namespace detail {

/// For each 3x3 offset, copies (or, when `scatter`, accumulates back) the
/// shifted feature column, then clears entries whose neighbour falls outside
/// the sample's grid. Works column-wise on contiguous memory.
template <typename T>
void im2col_pass(const Mat<T>& src, Mat<T>& dst, int batch, int h, int w, bool scatter) {
  const Eigen::Index c = scatter ? dst.cols() : src.cols();
  const Eigen::Index n = static_cast<Eigen::Index>(batch) * h * w;
  ColVec<T> tmp(n);
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) {
      const Eigen::Index block = ((dy + 1) * 3 + (dx + 1)) * c;
      const Eigen::Index offset = static_cast<Eigen::Index>(dy) * w + dx;
      const Eigen::Index lo = std::max<Eigen::Index>(0, -offset);
      const Eigen::Index hi = std::min<Eigen::Index>(n, n - offset);
      auto clear_invalid = [&](auto&& col) {
        for (int b = 0; b < batch; ++b)
          for (int y = 0; y < h; ++y) {
            const Eigen::Index row = (static_cast<Eigen::Index>(b) * h + y) * w;
            if (y + dy < 0 || y + dy >= h) {
              col.segment(row, w).setZero();
            } else if (dx < 0) {
              col(row) = T(0);
            } else if (dx > 0) {
              col(row + w - 1) = T(0);
            }
          }
      };
      for (Eigen::Index ch = 0; ch < c; ++ch) {
        if (!scatter) {
          auto out = dst.col(block + ch);
          out.head(lo).setZero();
          out.segment(lo, hi - lo) = src.col(ch).segment(lo + offset, hi - lo);
          out.tail(n - hi).setZero();
          clear_invalid(out);
        } else {
          tmp = src.col(block + ch);
          clear_invalid(tmp);
          dst.col(ch).segment(lo + offset, hi - lo) += tmp.segment(lo, hi - lo);
        }
      }
    }
}

}  // namespace detail

/// 3x3 patches with zero padding: (B*h*w x C) -> (B*h*w x 9C).
/// Column block k = (dy+1)*3 + (dx+1) holds the neighbour at offset (dx, dy).
template <typename T>
Var<T> im2col3x3(Var<T> a, int batch, int h, int w) {
  const Eigen::Index c = a.cols();
  if (a.rows() != static_cast<Eigen::Index>(batch) * h * w) throw std::invalid_argument("im2col3x3: row mismatch");
  Mat<T> out(a.rows(), 9 * c);
  detail::im2col_pass(a.value(), out, batch, h, w, false);
  const int ia = a.id;
  return a.tape->push(std::move(out), detail::any_grad(a), [ia, batch, h, w, c](Tape<T>& t, int self) {
    const Mat<T>& g = t.grad(self);
    Mat<T> ga = Mat<T>::Zero(g.rows(), c);
    detail::im2col_pass(g, ga, batch, h, w, true);
    t.accumulate(ia, ga);
  });
}

/// (B*p x C) -> (B x p*C); output column pos*C + ch.
template <typename T>
Var<T> flatten_positions(Var<T> a, int batch, int positions) {
  const Eigen::Index c = a.cols();
  if (a.rows() != static_cast<Eigen::Index>(batch) * positions)
    throw std::invalid_argument("flatten_positions: row mismatch");
  using Strided = Eigen::Map<const ColVec<T>, 0, Eigen::InnerStride<>>;
  Mat<T> out(batch, positions * c);
  for (int p = 0; p < positions; ++p)
    for (Eigen::Index ch = 0; ch < c; ++ch)
      out.col(p * c + ch) = Strided(a.value().col(ch).data() + p, batch, Eigen::InnerStride<>(positions));
  const int ia = a.id;
  return a.tape->push(std::move(out), detail::any_grad(a), [ia, batch, positions, c](Tape<T>& t, int self) {
    using StridedOut = Eigen::Map<ColVec<T>, 0, Eigen::InnerStride<>>;
    const Mat<T>& g = t.grad(self);
    Mat<T> ga(static_cast<Eigen::Index>(batch) * positions, c);
    for (int p = 0; p < positions; ++p)
      for (Eigen::Index ch = 0; ch < c; ++ch)
        StridedOut(ga.col(ch).data() + p, batch, Eigen::InnerStride<>(positions)) = g.col(p * c + ch);
    t.accumulate(ia, ga);
  });
}

/// Column-wise normalization with batch statistics. Rows with zero weight do
/// not contribute to the statistics. The batch mean and (biased) variance are
/// written to the optional outputs.
template <typename T>
Var<T> batch_norm_train(Var<T> a, const ColVec<T>& row_weight, T eps, RowVec<T>* mean_out = nullptr,
                        RowVec<T>* var_out = nullptr) {
  const Mat<T>& x = a.value();
  if (row_weight.size() != x.rows()) throw std::invalid_argument("batch_norm_train: weight length mismatch");
  const T total = row_weight.sum();
  if (!(total > T(0))) throw std::invalid_argument("batch_norm_train: empty batch");
  RowVec<T> mu = (row_weight.transpose() * x) / total;
  Mat<T> centered = x.rowwise() - mu;
  RowVec<T> var = (row_weight.transpose() * centered.array().square().matrix()) / total;
  RowVec<T> inv_std = (var.array() + eps).rsqrt().matrix();
  Mat<T> out = centered * inv_std.asDiagonal();
  if (mean_out) *mean_out = mu;
  if (var_out) *var_out = var;
  const int ia = a.id;
  return a.tape->push(std::move(out), detail::any_grad(a),
                      [ia, w = row_weight, total, inv_std](Tape<T>& t, int self) {
                        const Mat<T>& g = t.grad(self);
                        const Mat<T>& y = t.value(self);
                        RowVec<T> sum_g = g.colwise().sum() / total;
                        RowVec<T> sum_gy = g.cwiseProduct(y).colwise().sum() / total;
                        Mat<T> ga = g - w * sum_g - (y * sum_gy.asDiagonal()).cwiseProduct(w.replicate(1, g.cols()));
                        t.accumulate(ia, ga * inv_std.asDiagonal());
                      });
}

/// Column-wise normalization with fixed statistics.
template <typename T>
Var<T> batch_norm_eval(Var<T> a, const RowVec<T>& mean, const RowVec<T>& var, T eps) {
  RowVec<T> inv_std = (var.array() + eps).rsqrt().matrix();
  Mat<T> out = (a.value().rowwise() - mean) * inv_std.asDiagonal();
  const int ia = a.id;
  return a.tape->push(std::move(out), detail::any_grad(a), [ia, inv_std](Tape<T>& t, int self) {
    t.accumulate(ia, t.grad(self) * inv_std.asDiagonal());
  });
}

/// Row-wise normalization to zero mean and unit variance, no affine terms.
template <typename T>
Var<T> layer_norm(Var<T> a, T eps) {
  const Mat<T>& x = a.value();
  const auto n = static_cast<T>(x.cols());
  ColVec<T> mu = x.rowwise().sum() / n;
  Mat<T> centered = x.colwise() - mu;
  ColVec<T> inv_std = ((centered.array().square().rowwise().sum() / n) + eps).rsqrt().matrix();
  Mat<T> out = inv_std.asDiagonal() * centered;
  const int ia = a.id;
  return a.tape->push(std::move(out), detail::any_grad(a), [ia, inv_std, n](Tape<T>& t, int self) {
    const Mat<T>& g = t.grad(self);
    const Mat<T>& y = t.value(self);
    ColVec<T> mean_g = g.rowwise().sum() / n;
    ColVec<T> mean_gy = g.cwiseProduct(y).rowwise().sum() / n;
    Mat<T> ga = (g.colwise() - mean_g) - mean_gy.asDiagonal() * y;
    t.accumulate(ia, inv_std.asDiagonal() * ga);
  });
}

}  // namespace srcomm::ad
