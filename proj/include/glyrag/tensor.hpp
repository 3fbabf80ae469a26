#pragma once
// Dense double-precision matrices with reverse-mode automatic differentiation.
//
// Tensor is a cheap value type: copies share storage (and the gradient buffer)
// through a shared_ptr. Every differentiable operation takes the Tape it
// should record onto; an op whose inputs all have requires_grad == false
// computes values only and records nothing. Because operands always exist
// before their result, the recording order is a topological order, and
// Tape::backward simply replays the closures once, in reverse. Accumulation
// order within one closure is fixed, so a fixed recording order gives
// bit-reproducible gradients.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "glyrag/error.hpp"

namespace glyrag {

namespace detail {
struct TensorData {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> v;  // row-major values
  std::vector<double> g;  // gradient buffer; sized only when requires_grad
  bool requires_grad = false;
};
}  // namespace detail

class Tensor {
 public:
  Tensor() : d_(std::make_shared<detail::TensorData>()) {}
  Tensor(std::size_t rows, std::size_t cols, bool requires_grad = false)
      : d_(std::make_shared<detail::TensorData>()) {
    d_->rows = rows;
    d_->cols = cols;
    d_->v.assign(rows * cols, 0.0);
    d_->requires_grad = requires_grad;
    if (requires_grad) d_->g.assign(rows * cols, 0.0);
  }

  static Tensor row(const std::vector<double>& values, bool requires_grad = false) {
    Tensor t(1, values.size(), requires_grad);
    t.d_->v = values;
    return t;
  }
  static Tensor scalar_tensor(double value) {
    Tensor t(1, 1);
    t.d_->v[0] = value;
    return t;
  }
  static Tensor full(std::size_t rows, std::size_t cols, double value) {
    Tensor t(rows, cols);
    t.d_->v.assign(rows * cols, value);
    return t;
  }
  // Uniform values in [lo, hi) from the supplied generator, row-major order.
  static Tensor uniform(std::size_t rows, std::size_t cols, double lo, double hi,
                        std::mt19937_64& rng, bool requires_grad = false) {
    Tensor t(rows, cols, requires_grad);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& x : t.d_->v) x = dist(rng);
    return t;
  }

  std::size_t rows() const { return d_->rows; }
  std::size_t cols() const { return d_->cols; }
  std::size_t numel() const { return d_->v.size(); }

  double at(std::size_t i, std::size_t j) const { return d_->v[i * d_->cols + j]; }
  double& at(std::size_t i, std::size_t j) { return d_->v[i * d_->cols + j]; }
  const std::vector<double>& values() const { return d_->v; }
  std::vector<double>& values() { return d_->v; }

  double scalar() const {
    if (numel() != 1)
      throw Error(ErrorKind::validation, "scalar() on tensor with numel != 1");
    return d_->v[0];
  }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool on) {
    d_->requires_grad = on;
    if (on)
      d_->g.assign(d_->v.size(), 0.0);
    else
      d_->g.clear();
  }
  const std::vector<double>& grad() const { return d_->g; }
  std::vector<double>& grad() { return d_->g; }
  double grad_at(std::size_t i, std::size_t j) const { return d_->g[i * d_->cols + j]; }
  void zero_grad() {
    if (d_->requires_grad) d_->g.assign(d_->v.size(), 0.0);
  }

  // Identity of the underlying storage; used for parameter bookkeeping.
  const void* id() const { return d_.get(); }

  std::shared_ptr<detail::TensorData> data_handle() const { return d_; }

 private:
  std::shared_ptr<detail::TensorData> d_;
};

// Ordered record of backward closures. Single-threaded by design: one model
// instance owns one tape; independent instances may run in parallel.
class Tape {
 public:
  void record(std::function<void()> backward_fn) {
    ops_.push_back(std::move(backward_fn));
  }
  std::size_t size() const { return ops_.size(); }
  void clear() { ops_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and replays every recorded closure exactly once,
  // newest first. The caller zeroes parameter gradients beforehand.
  void backward(const Tensor& loss) {
    if (loss.numel() != 1)
      throw Error(ErrorKind::validation, "backward: loss must be a scalar");
    if (!loss.requires_grad())
      throw Error(ErrorKind::validation, "backward: loss does not require grad");
    loss.data_handle()->g[0] += 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> ops_;
};

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw Error(ErrorKind::validation,
                std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                    std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                    std::to_string(b.cols()) + ")");
}

inline bool any_grad(std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts)
    if (t->requires_grad()) return true;
  return false;
}

}  // namespace detail

// ── elementwise ──────────────────────────────────────────────────────────────

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  Tensor out(a.rows(), a.cols(), detail::any_grad({&a, &b}));
  for (std::size_t i = 0; i < a.numel(); ++i)
    out.values()[i] = a.values()[i] + b.values()[i];
  if (out.requires_grad()) {
    auto ad = a.data_handle(), bd = b.data_handle(), od = out.data_handle();
    tape.record([ad, bd, od] {
      for (std::size_t i = 0; i < od->g.size(); ++i) {
        if (ad->requires_grad) ad->g[i] += od->g[i];
        if (bd->requires_grad) bd->g[i] += od->g[i];
      }
    });
  }
  return out;
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor out(a.rows(), a.cols(), detail::any_grad({&a, &b}));
  for (std::size_t i = 0; i < a.numel(); ++i)
    out.values()[i] = a.values()[i] - b.values()[i];
  if (out.requires_grad()) {
    auto ad = a.data_handle(), bd = b.data_handle(), od = out.data_handle();
    tape.record([ad, bd, od] {
      for (std::size_t i = 0; i < od->g.size(); ++i) {
        if (ad->requires_grad) ad->g[i] += od->g[i];
        if (bd->requires_grad) bd->g[i] -= od->g[i];
      }
    });
  }
  return out;
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor out(a.rows(), a.cols(), detail::any_grad({&a, &b}));
  for (std::size_t i = 0; i < a.numel(); ++i)
    out.values()[i] = a.values()[i] * b.values()[i];
  if (out.requires_grad()) {
    auto ad = a.data_handle(), bd = b.data_handle(), od = out.data_handle();
    tape.record([ad, bd, od] {
      for (std::size_t i = 0; i < od->g.size(); ++i) {
        if (ad->requires_grad) ad->g[i] += od->g[i] * bd->v[i];
        if (bd->requires_grad) bd->g[i] += od->g[i] * ad->v[i];
      }
    });
  }
  return out;
}

inline Tensor scale(Tape& tape, const Tensor& a, double c) {
  Tensor out(a.rows(), a.cols(), a.requires_grad());
  for (std::size_t i = 0; i < a.numel(); ++i) out.values()[i] = a.values()[i] * c;
  if (out.requires_grad()) {
    auto ad = a.data_handle(), od = out.data_handle();
    tape.record([ad, od, c] {
      for (std::size_t i = 0; i < od->g.size(); ++i) ad->g[i] += od->g[i] * c;
    });
  }
  return out;
}

namespace detail {
// Shared scaffolding for smooth unary maps: y = f(x), dx += dy * dfdx(x, y).
template <typename F, typename DF>
Tensor unary(Tape& tape, const Tensor& a, F f, DF dfdx) {
  Tensor out(a.rows(), a.cols(), a.requires_grad());
  for (std::size_t i = 0; i < a.numel(); ++i) out.values()[i] = f(a.values()[i]);
  if (out.requires_grad()) {
    auto ad = a.data_handle(), od = out.data_handle();
    tape.record([ad, od, dfdx] {
      for (std::size_t i = 0; i < od->g.size(); ++i)
        ad->g[i] += od->g[i] * dfdx(ad->v[i], od->v[i]);
    });
  }
  return out;
}
}  // namespace detail

inline Tensor sigmoid(Tape& tape, const Tensor& a) {
  return detail::unary(
      tape, a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh_op(Tape& tape, const Tensor& a) {
  return detail::unary(
      tape, a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

// Exact (erf-based) GELU; smooth everywhere, which keeps central-difference
// gradient checks tight.
inline Tensor gelu(Tape& tape, const Tensor& a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  return detail::unary(
      tape, a,
      [=](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [=](double x, double) {
        double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        return cdf + x * pdf;
      });
}

// ── structural ops ───────────────────────────────────────────────────────────

inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw Error(ErrorKind::validation,
                "matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                    std::to_string(b.rows()) + ")");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out(m, n, detail::any_grad({&a, &b}));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a.at(i, p);
      for (std::size_t j = 0; j < n; ++j) out.at(i, j) += av * b.at(p, j);
    }
  if (out.requires_grad()) {
    auto ad = a.data_handle(), bd = b.data_handle(), od = out.data_handle();
    tape.record([ad, bd, od, m, k, n] {
      if (ad->requires_grad)  // dA += dC * B^T
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += od->g[i * n + j] * bd->v[p * n + j];
            ad->g[i * k + p] += s;
          }
      if (bd->requires_grad)  // dB += A^T * dC
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < m; ++i) s += ad->v[i * k + p] * od->g[i * n + j];
            bd->g[p * n + j] += s;
          }
    });
  }
  return out;
}

inline Tensor transpose(Tape& tape, const Tensor& a) {
  Tensor out(a.cols(), a.rows(), a.requires_grad());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out.at(j, i) = a.at(i, j);
  if (out.requires_grad()) {
    auto ad = a.data_handle(), od = out.data_handle();
    const std::size_t r = a.rows(), c = a.cols();
    tape.record([ad, od, r, c] {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ad->g[i * c + j] += od->g[j * r + i];
    });
  }
  return out;
}

// Rows [r0, r1) of a.
inline Tensor slice_rows(Tape& tape, const Tensor& a, std::size_t r0, std::size_t r1) {
  if (r0 >= r1 || r1 > a.rows())
    throw Error(ErrorKind::validation, "slice_rows: bad range");
  const std::size_t c = a.cols();
  Tensor out(r1 - r0, c, a.requires_grad());
  for (std::size_t i = r0; i < r1; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(i - r0, j) = a.at(i, j);
  if (out.requires_grad()) {
    auto ad = a.data_handle(), od = out.data_handle();
    tape.record([ad, od, r0, c] {
      for (std::size_t i = 0; i < od->rows; ++i)
        for (std::size_t j = 0; j < c; ++j) ad->g[(r0 + i) * c + j] += od->g[i * c + j];
    });
  }
  return out;
}

inline Tensor concat_rows(Tape& tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw Error(ErrorKind::validation, "concat_rows: no inputs");
  const std::size_t c = parts.front().cols();
  std::size_t total = 0;
  bool grad = false;
  for (const Tensor& p : parts) {
    if (p.cols() != c)
      throw Error(ErrorKind::validation, "concat_rows: column count mismatch");
    total += p.rows();
    grad = grad || p.requires_grad();
  }
  Tensor out(total, c, grad);
  std::size_t r = 0;
  for (const Tensor& p : parts) {
    for (std::size_t i = 0; i < p.rows(); ++i)
      for (std::size_t j = 0; j < c; ++j) out.at(r + i, j) = p.at(i, j);
    r += p.rows();
  }
  if (grad) {
    std::vector<std::shared_ptr<detail::TensorData>> pds;
    pds.reserve(parts.size());
    for (const Tensor& p : parts) pds.push_back(p.data_handle());
    auto od = out.data_handle();
    tape.record([pds, od, c] {
      std::size_t r = 0;
      for (const auto& pd : pds) {
        if (pd->requires_grad)
          for (std::size_t i = 0; i < pd->rows; ++i)
            for (std::size_t j = 0; j < c; ++j)
              pd->g[i * c + j] += od->g[(r + i) * c + j];
        r += pd->rows;
      }
    });
  }
  return out;
}

inline Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw Error(ErrorKind::validation, "concat_cols: no inputs");
  const std::size_t r = parts.front().rows();
  std::size_t total = 0;
  bool grad = false;
  for (const Tensor& p : parts) {
    if (p.rows() != r)
      throw Error(ErrorKind::validation, "concat_cols: row count mismatch");
    total += p.cols();
    grad = grad || p.requires_grad();
  }
  Tensor out(r, total, grad);
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out.at(i, off + j) = p.at(i, j);
    off += p.cols();
  }
  if (grad) {
    std::vector<std::shared_ptr<detail::TensorData>> pds;
    pds.reserve(parts.size());
    for (const Tensor& p : parts) pds.push_back(p.data_handle());
    auto od = out.data_handle();
    tape.record([pds, od, r, total] {
      std::size_t off = 0;
      for (const auto& pd : pds) {
        if (pd->requires_grad)
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < pd->cols; ++j)
              pd->g[i * pd->cols + j] += od->g[i * total + off + j];
        off += pd->cols;
      }
    });
  }
  return out;
}

// ── reductions ───────────────────────────────────────────────────────────────

inline Tensor sum_all(Tape& tape, const Tensor& a) {
  Tensor out(1, 1, a.requires_grad());
  double s = 0.0;
  for (double x : a.values()) s += x;
  out.values()[0] = s;
  if (out.requires_grad()) {
    auto ad = a.data_handle(), od = out.data_handle();
    tape.record([ad, od] {
      for (double& g : ad->g) g += od->g[0];
    });
  }
  return out;
}

inline Tensor mean_all(Tape& tape, const Tensor& a) {
  if (a.numel() == 0) throw Error(ErrorKind::validation, "mean_all: empty tensor");
  Tensor out(1, 1, a.requires_grad());
  double s = 0.0;
  for (double x : a.values()) s += x;
  const double n = static_cast<double>(a.numel());
  out.values()[0] = s / n;
  if (out.requires_grad()) {
    auto ad = a.data_handle(), od = out.data_handle();
    tape.record([ad, od, n] {
      for (double& g : ad->g) g += od->g[0] / n;
    });
  }
  return out;
}

// Column means: [m, n] -> [1, n]. The pooling step over token rows.
inline Tensor mean_rows(Tape& tape, const Tensor& a) {
  if (a.rows() == 0) throw Error(ErrorKind::validation, "mean_rows: empty tensor");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out(1, n, a.requires_grad());
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += a.at(i, j);
    out.at(0, j) = s / static_cast<double>(m);
  }
  if (out.requires_grad()) {
    auto ad = a.data_handle(), od = out.data_handle();
    tape.record([ad, od, m, n] {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
          ad->g[i * n + j] += od->g[j] / static_cast<double>(m);
    });
  }
  return out;
}

// ── softmax ──────────────────────────────────────────────────────────────────

// Row-wise softmax with the standard max-subtraction stabilization; rows sum
// to 1 even for inputs shifted by +-1e3.
inline Tensor softmax_rows(Tape& tape, const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  if (n == 0) throw Error(ErrorKind::validation, "softmax_rows: empty rows");
  Tensor out(m, n, a.requires_grad());
  for (std::size_t i = 0; i < m; ++i) {
    double mx = a.at(i, 0);
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, a.at(i, j));
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double e = std::exp(a.at(i, j) - mx);
      out.at(i, j) = e;
      denom += e;
    }
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) /= denom;
  }
  if (out.requires_grad()) {
    auto ad = a.data_handle(), od = out.data_handle();
    tape.record([ad, od, m, n] {
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += od->g[i * n + j] * od->v[i * n + j];
        for (std::size_t j = 0; j < n; ++j)
          ad->g[i * n + j] += (od->g[i * n + j] - dot) * od->v[i * n + j];
      }
    });
  }
  return out;
}

// ── gradient flow control ────────────────────────────────────────────────────

// Value copy that detaches from the graph (stop-gradient).
inline Tensor stop_gradient(const Tensor& a) {
  Tensor out(a.rows(), a.cols(), false);
  out.values() = a.values();
  return out;
}

// ── finite-difference checking ───────────────────────────────────────────────

// Central-difference check of d(loss)/d(param) for every element of every
// listed parameter. `f` must rebuild the loss deterministically on the tape it
// is given. Returns the worst relative error
//   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
inline double grad_check(const std::function<Tensor(Tape&)>& f,
                         const std::vector<Tensor>& params, double eps = 1e-5) {
  for (const Tensor& p : params)
    if (!p.requires_grad())
      throw Error(ErrorKind::validation, "grad_check: parameter without requires_grad");
  Tape tape;
  for (const Tensor& p : params) const_cast<Tensor&>(p).zero_grad();
  Tensor loss = f(tape);
  tape.backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const Tensor& p : params) analytic.push_back(p.grad());

  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double keep = p.values()[i];
      p.values()[i] = keep + eps;
      Tape t_plus;
      const double f_plus = f(t_plus).scalar();
      p.values()[i] = keep - eps;
      Tape t_minus;
      const double f_minus = f(t_minus).scalar();
      p.values()[i] = keep;
      const double numeric = (f_plus - f_minus) / (2.0 * eps);
      const double a = analytic[pi][i];
      const double rel =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace glyrag
