// Neural-network building blocks on top of the autodiff tape.
#pragma once

#include "srcomm/autodiff.hpp"

#include <cmath>
#include <deque>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace srcomm::nn {

using ad::ColVec;
using ad::Mat;
using ad::Parameter;
using ad::RowVec;
using ad::Tape;
using ad::Var;

/// Owns parameters and non-trainable buffers with stable addresses.
template <typename T>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;

  Parameter<T>& add(std::string name, Mat<T> init) {
    for (const auto& p : params_)
      if (p.name == name) throw std::logic_error("duplicate parameter name " + name);
    params_.push_back({std::move(name), std::move(init), {}});
    params_.back().zero_grad();
    return params_.back();
  }
  Parameter<T>& add_buffer(std::string name, Mat<T> init) {
    buffers_.push_back({std::move(name), std::move(init), {}});
    return buffers_.back();
  }

  std::deque<Parameter<T>>& params() { return params_; }
  const std::deque<Parameter<T>>& params() const { return params_; }
  std::deque<Parameter<T>>& buffers() { return buffers_; }
  const std::deque<Parameter<T>>& buffers() const { return buffers_; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }
  Parameter<T>* find(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    for (auto& p : buffers_)
      if (p.name == name) return &p;
    return nullptr;
  }

  /// Copies values (parameters and buffers) from a store with identical layout.
  template <typename U>
  void copy_from(const ParamStore<U>& other) {
    if (other.params().size() != params_.size() || other.buffers().size() != buffers_.size())
      throw std::invalid_argument("parameter layouts differ");
    auto copy = [](auto& dst, const auto& src) {
      for (std::size_t i = 0; i < dst.size(); ++i) {
        if (dst[i].name != src[i].name || dst[i].value.rows() != src[i].value.rows() ||
            dst[i].value.cols() != src[i].value.cols())
          throw std::invalid_argument("parameter layouts differ at " + dst[i].name);
        dst[i].value = src[i].value.template cast<T>();
      }
    };
    copy(params_, other.params());
    copy(buffers_, other.buffers());
  }

 private:
  std::deque<Parameter<T>> params_;
  std::deque<Parameter<T>> buffers_;
};

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// (rows x cols) matrix with orthonormal columns (or rows, when wide).
template <typename T>
Mat<T> orthogonal(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double gain = 1.0) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const Eigen::Index n = std::max(rows, cols), m = std::min(rows, cols);
  Eigen::MatrixXd a(n, m);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = normal(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(n, m);
  // Sign correction makes the draw uniform over orthogonal matrices.
  Eigen::MatrixXd r = qr.matrixQR().topRows(m).template triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < m; ++j)
    if (r(j, j) < 0) q.col(j) *= -1.0;
  Eigen::MatrixXd out = rows >= cols ? q : Eigen::MatrixXd(q.transpose());
  return (out * gain).cast<T>();
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <typename T>
struct Linear {
  Parameter<T>* weight = nullptr;  // in x out
  Parameter<T>* bias = nullptr;  // 1 x out

  Linear() = default;
  Linear(ParamStore<T>& store, const std::string& name, int in, int out, std::mt19937_64& rng, double gain = 1.0)
      : weight(&store.add(name + ".weight", orthogonal<T>(in, out, rng, gain))),
        bias(&store.add(name + ".bias", Mat<T>::Zero(1, out))) {}

  int in_features() const { return static_cast<int>(weight->value.rows()); }
  int out_features() const { return static_cast<int>(weight->value.cols()); }

  Var<T> operator()(Tape<T>& tape, Var<T> x) const {
    if (x.cols() != weight->value.rows())
      throw std::invalid_argument(weight->name + ": expected " + std::to_string(weight->value.rows()) +
                                  " input features, got " + std::to_string(x.cols()));
    return ad::add_rowwise(ad::matmul(x, tape.param(*weight)), tape.param(*bias));
  }
};

template <typename T>
struct LstmState {
  Var<T> h;
  Var<T> c;
};

/// LSTM cell with gate order (input, forget, cell, output).
template <typename T>
struct LstmCell {
  Parameter<T>* w_ih = nullptr;
  Parameter<T>* w_hh = nullptr;
  Parameter<T>* bias = nullptr;
  int hidden = 0;

  LstmCell() = default;
  LstmCell(ParamStore<T>& store, const std::string& name, int in, int hidden_size, std::mt19937_64& rng)
      : hidden(hidden_size) {
    w_ih = &store.add(name + ".w_ih", orthogonal<T>(in, 4 * hidden_size, rng));
    w_hh = &store.add(name + ".w_hh", orthogonal<T>(hidden_size, 4 * hidden_size, rng));
    bias = &store.add(name + ".bias", Mat<T>::Zero(1, 4 * hidden_size));
  }

  LstmState<T> operator()(Tape<T>& tape, Var<T> x, LstmState<T> s) const {
    if (x.cols() != w_ih->value.rows()) throw std::invalid_argument(w_ih->name + ": input width mismatch");
    Var<T> gates = ad::add_rowwise(
        ad::add(ad::matmul(x, tape.param(*w_ih)), ad::matmul(s.h, tape.param(*w_hh))), tape.param(*bias));
    Var<T> i = ad::sigmoid(ad::slice_cols(gates, 0, hidden));
    Var<T> f = ad::sigmoid(ad::slice_cols(gates, hidden, hidden));
    Var<T> g = ad::tanh(ad::slice_cols(gates, 2 * hidden, hidden));
    Var<T> o = ad::sigmoid(ad::slice_cols(gates, 3 * hidden, hidden));
    Var<T> c = ad::add(ad::mul(f, s.c), ad::mul(i, g));
    Var<T> h = ad::mul(o, ad::tanh(c));
    return {h, c};
  }
};

/// GRU cell with gate order (reset, update, candidate).
template <typename T>
struct GruCell {
  Parameter<T>* w_ih = nullptr;
  Parameter<T>* w_hh = nullptr;
  Parameter<T>* b_ih = nullptr;
  Parameter<T>* b_hh = nullptr;
  int hidden = 0;

  GruCell() = default;
  GruCell(ParamStore<T>& store, const std::string& name, int in, int hidden_size, std::mt19937_64& rng)
      : hidden(hidden_size) {
    w_ih = &store.add(name + ".w_ih", orthogonal<T>(in, 3 * hidden_size, rng));
    w_hh = &store.add(name + ".w_hh", orthogonal<T>(hidden_size, 3 * hidden_size, rng));
    b_ih = &store.add(name + ".b_ih", Mat<T>::Zero(1, 3 * hidden_size));
    b_hh = &store.add(name + ".b_hh", Mat<T>::Zero(1, 3 * hidden_size));
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x, Var<T> h) const {
    if (x.cols() != w_ih->value.rows()) throw std::invalid_argument(w_ih->name + ": input width mismatch");
    Var<T> gi = ad::add_rowwise(ad::matmul(x, tape.param(*w_ih)), tape.param(*b_ih));
    Var<T> gh = ad::add_rowwise(ad::matmul(h, tape.param(*w_hh)), tape.param(*b_hh));
    Var<T> r = ad::sigmoid(ad::add(ad::slice_cols(gi, 0, hidden), ad::slice_cols(gh, 0, hidden)));
    Var<T> z = ad::sigmoid(ad::add(ad::slice_cols(gi, hidden, hidden), ad::slice_cols(gh, hidden, hidden)));
    Var<T> n = ad::tanh(
        ad::add(ad::slice_cols(gi, 2 * hidden, hidden), ad::mul(r, ad::slice_cols(gh, 2 * hidden, hidden))));
    // h' = n + z * (h - n)
    return ad::add(n, ad::mul(z, ad::sub(h, n)));
  }
};

/// 3x3 convolution with zero padding over (B*h*w x C) feature maps.
template <typename T>
struct Conv3x3 {
  Parameter<T>* weight = nullptr;  // (9 * in) x out, no bias

  Conv3x3() = default;
  Conv3x3(ParamStore<T>& store, const std::string& name, int in_ch, int out_ch, std::mt19937_64& rng)
      : weight(&store.add(name + ".weight", orthogonal<T>(9 * in_ch, out_ch, rng))) {}

  Var<T> operator()(Tape<T>& tape, Var<T> x, int batch, int h, int w) const {
    if (9 * x.cols() != weight->value.rows()) throw std::invalid_argument(weight->name + ": channel mismatch");
    return ad::matmul(ad::im2col3x3(x, batch, h, w), tape.param(*weight));
  }
};

/// Per-channel normalization without affine terms (FiLM supplies them).
template <typename T>
struct BatchNorm {
  Parameter<T>* running_mean = nullptr;
  Parameter<T>* running_var = nullptr;
  T momentum = T(0.1);
  T eps = T(1e-5);

  BatchNorm() = default;
  BatchNorm(ParamStore<T>& store, const std::string& name, int channels)
      : running_mean(&store.add_buffer(name + ".running_mean", Mat<T>::Zero(1, channels))),
        running_var(&store.add_buffer(name + ".running_var", Mat<T>::Ones(1, channels))) {}

  /// Training mode uses batch statistics over weighted rows and updates the
  /// running averages; evaluation mode uses the running averages.
  Var<T> operator()(Var<T> x, bool training, const ColVec<T>* row_weight = nullptr) const {
    if (!training) {
      return ad::batch_norm_eval<T>(x, running_mean->value.row(0), running_var->value.row(0), eps);
    }
    ColVec<T> w = row_weight ? *row_weight : ColVec<T>::Ones(x.rows());
    RowVec<T> mu, var;
    Var<T> y = ad::batch_norm_train<T>(x, w, eps, &mu, &var);
    const T n = w.sum();
    const T unbiased = n > T(1) ? n / (n - T(1)) : T(1);
    running_mean->value = (T(1) - momentum) * running_mean->value + momentum * mu;
    running_var->value = (T(1) - momentum) * running_var->value + momentum * unbiased * var;
    return y;
  }
};

/// Per-channel affine modulation gamma * x + beta with gamma, beta given per
/// sample (B x C) and broadcast over the `positions` rows of each sample.
template <typename T>
Var<T> film_modulate(Var<T> x, Var<T> gamma, Var<T> beta, int positions) {
  return ad::add(ad::mul(x, ad::repeat_rows(gamma, positions)), ad::repeat_rows(beta, positions));
}

/// conv -> batch norm -> FiLM -> ReLU. The FiLM generator maps the
/// conditioning vector to (gamma - 1, beta).
template <typename T>
struct FilmBlock {
  Conv3x3<T> conv;
  BatchNorm<T> norm;
  Linear<T> film;
  int channels = 0;

  FilmBlock() = default;
  FilmBlock(ParamStore<T>& store, const std::string& name, int in_ch, int out_ch, int cond_dim,
            std::mt19937_64& rng)
      : conv(store, name + ".conv", in_ch, out_ch, rng),
        norm(store, name + ".bn", out_ch),
        film(store, name + ".film", cond_dim, 2 * out_ch, rng, 0.1),
        channels(out_ch) {}

  Var<T> operator()(Tape<T>& tape, Var<T> x, Var<T> cond, int batch, int h, int w, bool training,
                    const ColVec<T>* sample_weight = nullptr) const {
    if (cond.rows() != batch) throw std::invalid_argument("film block: conditioning batch mismatch");
    const int positions = h * w;
    ColVec<T> row_weight;
    if (sample_weight) {
      row_weight.resize(static_cast<Eigen::Index>(batch) * positions);
      for (int b = 0; b < batch; ++b) row_weight.segment(b * positions, positions).setConstant((*sample_weight)(b));
    }
    Var<T> y = norm(conv(tape, x, batch, h, w), training, sample_weight ? &row_weight : nullptr);
    Var<T> gb = film(tape, cond);
    Var<T> gamma = ad::add_scalar(ad::slice_cols(gb, 0, channels), T(1));
    Var<T> beta = ad::slice_cols(gb, channels, channels);
    return ad::relu(film_modulate(y, gamma, beta, positions));
  }
};

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

/// Scales all gradients so their global L2 norm is at most max_norm; returns
/// the norm before clipping.
template <typename T>
double clip_grad_norm(ParamStore<T>& store, double max_norm) {
  double sq = 0.0;
  for (const auto& p : store.params()) sq += static_cast<double>(p.grad.squaredNorm());
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T factor = static_cast<T>(max_norm / (norm + 1e-6));
    for (auto& p : store.params()) p.grad *= factor;
  }
  return norm;
}

template <typename T>
class Adam {
 public:
  struct Options {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-5;
  };

  Adam() = default;
  Adam(ParamStore<T>& store, Options opt) : store_(&store), opt_(opt) {
    for (const auto& p : store.params()) {
      m_.push_back(Mat<T>::Zero(p.value.rows(), p.value.cols()));
      v_.push_back(Mat<T>::Zero(p.value.rows(), p.value.cols()));
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    const T step_size = static_cast<T>(opt_.lr / bc1);
    const T b1 = static_cast<T>(opt_.beta1), b2 = static_cast<T>(opt_.beta2);
    const T sqrt_bc2 = static_cast<T>(std::sqrt(bc2));
    const T eps = static_cast<T>(opt_.eps);
    auto& params = store_->params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      m_[i] = b1 * m_[i] + (T(1) - b1) * p.grad;
      v_[i] = b2 * v_[i] + (T(1) - b2) * p.grad.cwiseProduct(p.grad);
      p.value.array() -= step_size * m_[i].array() / (v_[i].array().sqrt() / sqrt_bc2 + eps);
    }
  }

  Options& options() { return opt_; }
  long long steps() const { return t_; }
  std::vector<Mat<T>>& first_moments() { return m_; }
  std::vector<Mat<T>>& second_moments() { return v_; }
  void set_steps(long long t) { t_ = t; }

 private:
  ParamStore<T>* store_ = nullptr;
  Options opt_;
  std::vector<Mat<T>> m_, v_;
  long long t_ = 0;
};

}  // namespace srcomm::nn
