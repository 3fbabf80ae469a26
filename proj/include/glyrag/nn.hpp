#pragma once
// Neural-network building blocks on top of the tensor/tape core: parameter
// registry, layer primitives (linear, layer norm, dropout, positional
// encoding), multi-head attention, a stacked LSTM, the Huber loss, and Adam.

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "glyrag/error.hpp"
#include "glyrag/tensor.hpp"

namespace glyrag {

// Ordered, named parameter registry. Registration order is the serialization
// and optimizer-iteration order, so it must be deterministic per model.
class ParamStore {
 public:
  Tensor add(const std::string& name, Tensor t) {
    if (index_.count(name))
      throw Error(ErrorKind::validation, "ParamStore: duplicate parameter " + name);
    t.set_requires_grad(true);
    index_[name] = items_.size();
    items_.emplace_back(name, t);
    return t;
  }
  bool has(const std::string& name) const { return index_.count(name) != 0; }
  Tensor get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
      throw Error(ErrorKind::validation, "ParamStore: unknown parameter " + name);
    return items_[it->second].second;
  }
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    out.reserve(items_.size());
    for (const auto& [_, t] : items_) out.push_back(t);
    return out;
  }
  void zero_grad() {
    for (auto& [_, t] : items_) t.zero_grad();
  }
  // Freezing drops the gradient buffers; ops stop recording through them.
  void set_trainable(bool on) {
    for (auto& [_, t] : items_) t.set_requires_grad(on);
  }
  std::size_t size() const { return items_.size(); }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::map<std::string, std::size_t> index_;
};

// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization.
inline Tensor init_weight(std::size_t fan_in, std::size_t rows, std::size_t cols,
                          std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return Tensor::uniform(rows, cols, -bound, bound, rng);
}

// ── layers ───────────────────────────────────────────────────────────────────

// x[m,k] * W[k,n] + b[1,n] broadcast over rows.
inline Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols())
    throw Error(ErrorKind::validation, "linear: shape mismatch");
  const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
  Tensor out(m, n, detail::any_grad({&x, &w, &b}));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = b.at(0, j);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x.at(i, p);
      for (std::size_t j = 0; j < n; ++j) out.at(i, j) += xv * w.at(p, j);
    }
  if (out.requires_grad()) {
    auto xd = x.data_handle(), wd = w.data_handle(), bd = b.data_handle(),
         od = out.data_handle();
    tape.record([xd, wd, bd, od, m, k, n] {
      if (xd->requires_grad)
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += od->g[i * n + j] * wd->v[p * n + j];
            xd->g[i * k + p] += s;
          }
      if (wd->requires_grad)
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < m; ++i) s += xd->v[i * k + p] * od->g[i * n + j];
            wd->g[p * n + j] += s;
          }
      if (bd->requires_grad)
        for (std::size_t j = 0; j < n; ++j) {
          double s = 0.0;
          for (std::size_t i = 0; i < m; ++i) s += od->g[i * n + j];
          bd->g[j] += s;
        }
    });
  }
  return out;
}

// Row-wise layer normalization with affine parameters gamma/beta [1, n].
inline Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gamma,
                         const Tensor& beta, double eps = 1e-5) {
  const std::size_t m = x.rows(), n = x.cols();
  if (gamma.cols() != n || beta.cols() != n || gamma.rows() != 1 || beta.rows() != 1)
    throw Error(ErrorKind::validation, "layer_norm: affine shape mismatch");
  Tensor out(m, n, detail::any_grad({&x, &gamma, &beta}));
  std::vector<double> mu(m), sigma(m);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += x.at(i, j);
    mu[i] = s / static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = x.at(i, j) - mu[i];
      var += d * d;
    }
    sigma[i] = std::sqrt(var / static_cast<double>(n) + eps);
    for (std::size_t j = 0; j < n; ++j)
      out.at(i, j) = gamma.at(0, j) * ((x.at(i, j) - mu[i]) / sigma[i]) + beta.at(0, j);
  }
  if (out.requires_grad()) {
    auto xd = x.data_handle(), gd = gamma.data_handle(), bd = beta.data_handle(),
         od = out.data_handle();
    tape.record([xd, gd, bd, od, mu, sigma, m, n] {
      for (std::size_t i = 0; i < m; ++i) {
        // Recompute xhat for the row; cheaper than storing it.
        std::vector<double> xhat(n), dxhat(n);
        for (std::size_t j = 0; j < n; ++j) {
          xhat[j] = (xd->v[i * n + j] - mu[i]) / sigma[i];
          dxhat[j] = od->g[i * n + j] * gd->v[j];
        }
        if (gd->requires_grad)
          for (std::size_t j = 0; j < n; ++j) gd->g[j] += od->g[i * n + j] * xhat[j];
        if (bd->requires_grad)
          for (std::size_t j = 0; j < n; ++j) bd->g[j] += od->g[i * n + j];
        if (xd->requires_grad) {
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            sum_dxhat += dxhat[j];
            sum_dxhat_xhat += dxhat[j] * xhat[j];
          }
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t j = 0; j < n; ++j)
            xd->g[i * n + j] +=
                (dxhat[j] - inv_n * sum_dxhat - xhat[j] * inv_n * sum_dxhat_xhat) /
                sigma[i];
        }
      }
    });
  }
  return out;
}

// Inverted dropout. Training mode scales kept activations by 1/(1-p); eval
// mode (or p == 0) is the identity. The caller owns the RNG, so a fixed seed
// reproduces masks exactly.
inline Tensor dropout(Tape& tape, const Tensor& x, double p, std::mt19937_64& rng,
                      bool training) {
  if (p < 0.0 || p >= 1.0)
    throw Error(ErrorKind::validation, "dropout: p must be in [0, 1)");
  if (!training || p == 0.0) return x;
  Tensor out(x.rows(), x.cols(), x.requires_grad());
  std::vector<double> mask(x.numel());
  std::bernoulli_distribution keep(1.0 - p);
  const double inv_keep = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    mask[i] = keep(rng) ? inv_keep : 0.0;
    out.values()[i] = x.values()[i] * mask[i];
  }
  if (out.requires_grad()) {
    auto xd = x.data_handle(), od = out.data_handle();
    tape.record([xd, od, mask] {
      for (std::size_t i = 0; i < od->g.size(); ++i) xd->g[i] += od->g[i] * mask[i];
    });
  }
  return out;
}

// Classic sinusoidal positional encoding, PE[pos, 2i] = sin(pos * w_i),
// PE[pos, 2i+1] = cos(pos * w_i), w_i = 10000^(-2i/d). Constant (no grad).
inline Tensor sinusoidal_pe(std::size_t n_positions, std::size_t d_model) {
  Tensor pe(n_positions, d_model);
  for (std::size_t pos = 0; pos < n_positions; ++pos)
    for (std::size_t j = 0; j < d_model; ++j) {
      const double exponent =
          static_cast<double>(2 * (j / 2)) / static_cast<double>(d_model);
      const double w = std::pow(10000.0, -exponent);
      const double angle = static_cast<double>(pos) * w;
      pe.at(pos, j) = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  return pe;
}

// ── multi-head attention ─────────────────────────────────────────────────────

// Per-head projections to d/H dims, concatenated and passed through an output
// projection. Scores are scaled by 1/sqrt(d/H).
struct MhaParams {
  std::vector<Tensor> w_q, w_k, w_v;  // each [d, d/H]
  Tensor w_o;                         // [d, d]

  static MhaParams init(ParamStore& store, const std::string& prefix, std::size_t d,
                        std::size_t n_heads, std::mt19937_64& rng) {
    if (n_heads == 0 || d % n_heads != 0)
      throw Error(ErrorKind::validation, "MhaParams: d_model not divisible by heads");
    MhaParams p;
    const std::size_t dh = d / n_heads;
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::string hs = std::to_string(h);
      p.w_q.push_back(store.add(prefix + ".q" + hs, init_weight(d, d, dh, rng)));
      p.w_k.push_back(store.add(prefix + ".k" + hs, init_weight(d, d, dh, rng)));
      p.w_v.push_back(store.add(prefix + ".v" + hs, init_weight(d, d, dh, rng)));
    }
    p.w_o = store.add(prefix + ".o", init_weight(d, d, d, rng));
    return p;
  }
};

inline Tensor multi_head_attention(Tape& tape, const Tensor& q_in, const Tensor& k_in,
                                   const Tensor& v_in, const MhaParams& params) {
  if (params.w_q.empty()) throw Error(ErrorKind::validation, "mha: no heads");
  const std::size_t dh = params.w_q.front().cols();
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> heads;
  heads.reserve(params.w_q.size());
  for (std::size_t h = 0; h < params.w_q.size(); ++h) {
    Tensor q = matmul(tape, q_in, params.w_q[h]);
    Tensor k = matmul(tape, k_in, params.w_k[h]);
    Tensor v = matmul(tape, v_in, params.w_v[h]);
    Tensor scores = scale(tape, matmul(tape, q, transpose(tape, k)), inv_scale);
    Tensor attn = softmax_rows(tape, scores);
    heads.push_back(matmul(tape, attn, v));
  }
  return matmul(tape, concat_cols(tape, heads), params.w_o);
}

// ── LSTM ─────────────────────────────────────────────────────────────────────

// Stacked LSTM with per-gate weight matrices. Gate order in parameter names:
// i (input), f (forget), g (cell candidate), o (output). Forget-gate biases
// start at 1 so early training does not flush cell state.
struct LstmParams {
  struct Layer {
    Tensor wi, wf, wg, wo;  // [in, H]
    Tensor ui, uf, ug, uo;  // [H, H]
    Tensor bi, bf, bg, bo;  // [1, H]
  };
  std::vector<Layer> layers;
  std::size_t hidden = 0;

  static LstmParams init(ParamStore& store, const std::string& prefix,
                         std::size_t input_dim, std::size_t hidden, std::size_t n_layers,
                         std::mt19937_64& rng) {
    LstmParams p;
    p.hidden = hidden;
    for (std::size_t l = 0; l < n_layers; ++l) {
      const std::size_t in = (l == 0) ? input_dim : hidden;
      const std::string ls = prefix + ".l" + std::to_string(l);
      Layer layer;
      layer.wi = store.add(ls + ".wi", init_weight(in, in, hidden, rng));
      layer.wf = store.add(ls + ".wf", init_weight(in, in, hidden, rng));
      layer.wg = store.add(ls + ".wg", init_weight(in, in, hidden, rng));
      layer.wo = store.add(ls + ".wo", init_weight(in, in, hidden, rng));
      layer.ui = store.add(ls + ".ui", init_weight(hidden, hidden, hidden, rng));
      layer.uf = store.add(ls + ".uf", init_weight(hidden, hidden, hidden, rng));
      layer.ug = store.add(ls + ".ug", init_weight(hidden, hidden, hidden, rng));
      layer.uo = store.add(ls + ".uo", init_weight(hidden, hidden, hidden, rng));
      layer.bi = store.add(ls + ".bi", Tensor(1, hidden));
      layer.bf = store.add(ls + ".bf", Tensor::full(1, hidden, 1.0));
      layer.bg = store.add(ls + ".bg", Tensor(1, hidden));
      layer.bo = store.add(ls + ".bo", Tensor(1, hidden));
      p.layers.push_back(layer);
    }
    return p;
  }
};

struct LstmResult {
  std::vector<Tensor> outputs;  // top-layer hidden state per step, each [1, H]
  Tensor last_hidden;           // [1, H]
};

inline LstmResult lstm_forward(Tape& tape, const Tensor& x_seq, const LstmParams& params) {
  if (params.layers.empty() || x_seq.rows() == 0)
    throw Error(ErrorKind::validation, "lstm_forward: empty input or params");
  const std::size_t T = x_seq.rows();
  std::vector<Tensor> inputs;
  inputs.reserve(T);
  for (std::size_t t = 0; t < T; ++t) inputs.push_back(slice_rows(tape, x_seq, t, t + 1));

  for (const auto& L : params.layers) {
    Tensor h(1, params.hidden), c(1, params.hidden);
    std::vector<Tensor> outs;
    outs.reserve(T);
    for (std::size_t t = 0; t < T; ++t) {
      const Tensor& xt = inputs[t];
      Tensor i = sigmoid(tape, add(tape, linear(tape, xt, L.wi, L.bi), matmul(tape, h, L.ui)));
      Tensor f = sigmoid(tape, add(tape, linear(tape, xt, L.wf, L.bf), matmul(tape, h, L.uf)));
      Tensor g = tanh_op(tape, add(tape, linear(tape, xt, L.wg, L.bg), matmul(tape, h, L.ug)));
      Tensor o = sigmoid(tape, add(tape, linear(tape, xt, L.wo, L.bo), matmul(tape, h, L.uo)));
      c = add(tape, mul(tape, f, c), mul(tape, i, g));
      h = mul(tape, o, tanh_op(tape, c));
      outs.push_back(h);
    }
    inputs = outs;
  }
  LstmResult r;
  r.outputs = inputs;
  r.last_hidden = inputs.back();
  return r;
}

// ── losses ───────────────────────────────────────────────────────────────────

// Mean Huber loss over all elements:
//   0.5 e^2            for |e| <= delta
//   delta (|e| - delta/2)  otherwise
// Gradient per element: clip(e, +-delta) / n.
inline Tensor huber_loss(Tape& tape, const Tensor& pred, const Tensor& target,
                         double delta) {
  detail::check_same_shape(pred, target, "huber_loss");
  if (delta <= 0.0) throw Error(ErrorKind::validation, "huber_loss: delta must be > 0");
  const std::size_t n = pred.numel();
  Tensor out(1, 1, pred.requires_grad() || target.requires_grad());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = pred.values()[i] - target.values()[i];
    const double ae = std::abs(e);
    total += (ae <= delta) ? 0.5 * e * e : delta * (ae - 0.5 * delta);
  }
  out.values()[0] = total / static_cast<double>(n);
  if (out.requires_grad()) {
    auto pd = pred.data_handle(), td = target.data_handle(), od = out.data_handle();
    tape.record([pd, td, od, delta, n] {
      const double gout = od->g[0] / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double e = pd->v[i] - td->v[i];
        const double de = (std::abs(e) <= delta) ? e : (e > 0 ? delta : -delta);
        if (pd->requires_grad) pd->g[i] += gout * de;
        if (td->requires_grad) td->g[i] -= gout * de;
      }
    });
  }
  return out;
}

// ── optimizer ────────────────────────────────────────────────────────────────

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second-moment state persists across steps, keyed by parameter storage
// identity.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(const std::vector<Tensor>& params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const Tensor& p : params) {
      if (!p.requires_grad())
        throw Error(ErrorKind::validation, "Adam: parameter without gradient");
      auto& [m, v] = state_[p.id()];
      if (m.size() != p.numel()) {
        m.assign(p.numel(), 0.0);
        v.assign(p.numel(), 0.0);
      }
      Tensor param = p;
      for (std::size_t i = 0; i < param.numel(); ++i) {
        const double g = param.grad()[i];
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        param.values()[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

  std::size_t steps_taken() const { return t_; }

 private:
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::map<const void*, std::pair<std::vector<double>, std::vector<double>>> state_;
};

// Generic MLP: n_layers linear maps with GELU between them (none after the
// last). layer_dims = {in, h1, ..., out}.
struct MlpParams {
  std::vector<Tensor> w;
  std::vector<Tensor> b;

  static MlpParams init(ParamStore& store, const std::string& prefix,
                        const std::vector<std::size_t>& layer_dims, std::mt19937_64& rng) {
    if (layer_dims.size() < 2)
      throw Error(ErrorKind::validation, "MlpParams: need at least in/out dims");
    MlpParams p;
    for (std::size_t l = 0; l + 1 < layer_dims.size(); ++l) {
      const std::string ls = prefix + ".l" + std::to_string(l);
      p.w.push_back(store.add(ls + ".w",
                              init_weight(layer_dims[l], layer_dims[l], layer_dims[l + 1], rng)));
      p.b.push_back(store.add(ls + ".b", Tensor(1, layer_dims[l + 1])));
    }
    return p;
  }
};

inline Tensor mlp_forward(Tape& tape, const Tensor& x, const MlpParams& params) {
  Tensor h = x;
  for (std::size_t l = 0; l < params.w.size(); ++l) {
    h = linear(tape, h, params.w[l], params.b[l]);
    if (l + 1 < params.w.size()) h = gelu(tape, h);
  }
  return h;
}

}  // namespace glyrag
