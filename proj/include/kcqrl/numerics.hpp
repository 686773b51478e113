#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "kcqrl/errors.hpp"

namespace kcqrl {

using Rng = std::mt19937_64;
using Vec = std::vector<double>;

// Row-major dense matrix of doubles.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const DenseMatrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline std::string shape_str(const DenseMatrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

inline void fill_uniform(DenseMatrix& m, double limit, Rng& rng) {
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (double& v : m.values()) v = dist(rng);
}

// ---- vector kernels ----

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

// y (+)= A x
inline void matvec(const DenseMatrix& a, std::span<const double> x, std::span<double> y,
                   bool accumulate = false) {
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double s = dot(a.row(r), x);
    y[r] = accumulate ? y[r] + s : s;
  }
}

inline Vec matvec(const DenseMatrix& a, std::span<const double> x) {
  Vec y(a.rows());
  matvec(a, x, y);
  return y;
}

// y += A^T x
inline void matvec_t_acc(const DenseMatrix& a, std::span<const double> x, std::span<double> y) {
  for (std::size_t r = 0; r < a.rows(); ++r) {
    if (x[r] != 0.0) axpy(x[r], a.row(r), y);
  }
}

// A += scale * u v^T
inline void add_outer(DenseMatrix& a, std::span<const double> u, std::span<const double> v,
                      double scale = 1.0) {
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double ur = scale * u[r];
    if (ur != 0.0) axpy(ur, v, a.row(r));
  }
}

inline DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.rows()) {
    throw InputError("matmul shape mismatch: " + shape_str(a) + " * " + shape_str(b));
  }
  DenseMatrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      axpy(aik, b.row(k), c.row(i));
    }
  }
  return c;
}

inline DenseMatrix transpose(const DenseMatrix& a) {
  DenseMatrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

// max(x) + log sum exp(x - max(x)); -inf for empty input.
inline double log_sum_exp(std::span<const double> x) {
  if (x.empty()) return -std::numeric_limits<double>::infinity();
  const double m = *std::max_element(x.begin(), x.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(1 + exp(x)) without overflow.
inline double softplus(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// Binary cross-entropy of a logit against a {0,1} label.
inline double bce_with_logit(double logit, int label) {
  return label ? softplus(-logit) : softplus(logit);
}

// ---- parameters & optimizer ----

// A trainable tensor with its gradient accumulator.
struct Param {
  DenseMatrix value;
  DenseMatrix grad;

  Param() = default;
  Param(std::size_t rows, std::size_t cols) : value(rows, cols), grad(rows, cols) {}

  void zero_grad() { grad.fill(0.0); }
};

struct AdamConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  long step = 0;
  std::vector<DenseMatrix> m;
  std::vector<DenseMatrix> v;

  explicit AdamState(AdamConfig cfg = {}) : config(cfg) {}
};

// One bias-corrected Adam update. Moments are created on first use.
inline void adam_step(AdamState& st, std::span<DenseMatrix* const> params,
                      std::span<const DenseMatrix* const> grads) {
  if (params.size() != grads.size()) throw InputError("adam_step: params/grads count mismatch");
  if (st.m.empty()) {
    for (const DenseMatrix* p : params) {
      st.m.emplace_back(p->rows(), p->cols());
      st.v.emplace_back(p->rows(), p->cols());
    }
  }
  if (st.m.size() != params.size()) throw InputError("adam_step: parameter list changed size");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->same_shape(*grads[i]) || !params[i]->same_shape(st.m[i])) {
      throw InputError("adam_step: shape mismatch at parameter " + std::to_string(i) + " (" +
                       shape_str(*params[i]) + " vs " + shape_str(*grads[i]) + ")");
    }
    if (!grads[i]->all_finite()) {
      throw NumericalError("adam_step: non-finite gradient at parameter " + std::to_string(i));
    }
  }
  ++st.step;
  const auto& c = st.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->values();
    auto g = grads[i]->values();
    auto m = st.m[i].values();
    auto v = st.v[i].values();
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
      v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      p[k] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

inline void adam_step(AdamState& st, std::span<Param* const> params) {
  std::vector<DenseMatrix*> values;
  std::vector<const DenseMatrix*> grads;
  for (Param* p : params) {
    values.push_back(&p->value);
    grads.push_back(&p->grad);
  }
  adam_step(st, values, grads);
}

inline std::size_t parameter_count(std::span<const Param* const> params) {
  std::size_t n = 0;
  for (const Param* p : params) n += p->value.size();
  return n;
}

inline Vec flatten_values(std::span<Param* const> params) {
  Vec out;
  for (const Param* p : params) out.insert(out.end(), p->value.values().begin(), p->value.values().end());
  return out;
}

inline Vec flatten_grads(std::span<Param* const> params) {
  Vec out;
  for (const Param* p : params) out.insert(out.end(), p->grad.values().begin(), p->grad.values().end());
  return out;
}

inline void assign_values(std::span<Param* const> params, std::span<const double> flat) {
  std::size_t off = 0;
  for (Param* p : params) {
    auto v = p->value.values();
    if (off + v.size() > flat.size()) throw InputError("assign_values: flat vector too short");
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), v.size(), v.begin());
    off += v.size();
  }
  if (off != flat.size()) throw InputError("assign_values: flat vector too long");
}

// ---- finite differences ----

struct FdReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

// `loss(x, grad)` returns the loss at x and, when grad is non-null, writes the
// analytic gradient. Central differences on every coordinate, or on
// `max_coords` coordinates sampled with `seed` when max_coords > 0.
template <class LossFn>
FdReport finite_diff_check(LossFn&& loss, Vec x, double eps, std::size_t max_coords = 0,
                           std::uint64_t seed = 0) {
  if (!(eps > 0.0)) throw InputError("finite_diff_check: eps must be > 0");
  Vec analytic(x.size(), 0.0);
  const double f0 = loss(x, &analytic);
  if (!std::isfinite(f0)) throw NumericalError("finite_diff_check: non-finite loss");

  std::vector<std::size_t> coords(x.size());
  std::iota(coords.begin(), coords.end(), 0);
  if (max_coords > 0 && max_coords < coords.size()) {
    Rng rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(max_coords);
    std::sort(coords.begin(), coords.end());
  }

  FdReport rep;
  for (std::size_t idx : coords) {
    const double orig = x[idx];
    x[idx] = orig + eps;
    const double fp = loss(x, nullptr);
    x[idx] = orig - eps;
    const double fm = loss(x, nullptr);
    x[idx] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericalError("finite_diff_check: non-finite loss at coordinate " + std::to_string(idx));
    }
    const double numeric = (fp - fm) / (2.0 * eps);
    const double err =
        std::abs(analytic[idx] - numeric) / std::max(1e-8, std::abs(analytic[idx]) + std::abs(numeric));
    if (err > rep.max_rel_error) {
      rep.max_rel_error = err;
      rep.worst_index = idx;
    }
    ++rep.checked;
  }
  return rep;
}

// ---- PCA ----

// Mean-centred projection onto the top two principal directions, found by
// power iteration with deflation on the covariance matrix.
inline DenseMatrix pca_2d(const DenseMatrix& x, std::uint64_t seed = 0) {
  const std::size_t n = x.rows(), d = x.cols();
  if (n < 2) throw InputError("pca_2d: need at least 2 rows");
  if (!x.all_finite()) throw NumericalError("pca_2d: non-finite input");

  Vec mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) axpy(1.0 / static_cast<double>(n), x.row(i), mean);
  DenseMatrix centred(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) centred(i, j) = x(i, j) - mean[j];

  DenseMatrix cov = matmul(transpose(centred), centred);
  double trace = 0.0;
  for (std::size_t j = 0; j < d; ++j) trace += cov(j, j);
  if (trace <= 1e-24) throw InputError("pca_2d: input has rank 0 (all rows identical)");

  Rng rng(seed);
  std::normal_distribution<double> gauss;
  std::vector<Vec> dirs;
  for (int comp = 0; comp < 2; ++comp) {
    Vec v(d);
    for (double& e : v) e = gauss(rng);
    Vec w(d);
    double lambda_prev = 0.0;
    for (int it = 0; it < 20000; ++it) {
      for (const Vec& u : dirs) axpy(-dot(u, v), u, v);
      const double nv = norm(v);
      if (nv < 1e-300) break;
      for (double& e : v) e /= nv;
      matvec(cov, v, w);
      for (const Vec& u : dirs) axpy(-dot(u, w), u, w);
      const double lambda = dot(v, w);
      v.swap(w);
      if (it > 10 && std::abs(lambda - lambda_prev) <= 1e-15 * std::max(1.0, std::abs(lambda))) break;
      lambda_prev = lambda;
    }
    for (const Vec& u : dirs) axpy(-dot(u, v), u, v);
    const double nv = norm(v);
    if (nv < 1e-300) {
      v.assign(d, 0.0);  // rank-1 data: second axis carries no variance
    } else {
      for (double& e : v) e /= nv;
    }
    // Sign convention: largest-magnitude component positive.
    auto it = std::max_element(v.begin(), v.end(), [](double a, double b) { return std::abs(a) < std::abs(b); });
    if (it != v.end() && *it < 0)
      for (double& e : v) e = -e;
    dirs.push_back(std::move(v));
  }

  DenseMatrix out(n, 2);
  for (std::size_t i = 0; i < n; ++i) {
    out(i, 0) = dot(centred.row(i), dirs[0]);
    out(i, 1) = dot(centred.row(i), dirs[1]);
  }
  return out;
}

}  // namespace kcqrl
