#pragma once

// The multimodal encoder: patchify a normalized glucose window, run the patch
// tokens through a pre-norm transformer, pool them, fuse the pooled glucose
// vector with the projected context-text vector, and forecast the next hour
// with an LSTM head. Also computes the bidirectional translation loss that
// pulls the two modality embeddings toward a shared space.
//
// Context handling has three modes (the ablation axes):
//   mhsa          — two-token multi-head self-attention fusion (default)
//   concat_linear — concatenate the two vectors and apply one linear map
//   off           — glucose only; the context branch is never evaluated
//
// Pipeline invariants relied on by tests:
//   * transformer blocks are pre-norm with no trailing LayerNorm, so zeroing
//     every attention/feed-forward output projection makes each block an
//     exact identity;
//   * fusion in mhsa mode is Z + MHSA(Z) with no LayerNorm, so zeroing the
//     fusion output projection gives z = mean(z_bgl, z_ctx) exactly.

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "glyrag/context.hpp"
#include "glyrag/data.hpp"
#include "glyrag/error.hpp"
#include "glyrag/nn.hpp"
#include "glyrag/tensor.hpp"

namespace glyrag::model {

// ── patching ─────────────────────────────────────────────────────────────────

struct PatchConfig {
  std::size_t patch_len = 6;
  std::size_t stride = 3;
};

inline void validate_patching(std::size_t len, const PatchConfig& cfg) {
  if (cfg.stride < 1 || cfg.patch_len < cfg.stride || len < cfg.patch_len)
    throw Error(ErrorKind::validation,
                "patch config requires 1 <= stride <= patch_len <= window "
                "(got window " +
                    std::to_string(len) + ", patch " +
                    std::to_string(cfg.patch_len) + ", stride " +
                    std::to_string(cfg.stride) + ")");
}

// N = ceil((L - L_p) / L_s) + 1
inline std::size_t patch_count(std::size_t len, const PatchConfig& cfg) {
  validate_patching(len, cfg);
  return (len - cfg.patch_len + cfg.stride - 1) / cfg.stride + 1;
}

// Rows are windows of length patch_len starting at multiples of the stride.
// Only the final patch can overrun the end of the input; it is shifted left
// to end exactly at the last sample instead of being padded.
inline Tensor patchify(const std::vector<double>& x, const PatchConfig& cfg) {
  const std::size_t n = patch_count(x.size(), cfg);
  Tensor out(n, cfg.patch_len);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t start = i * cfg.stride;
    if (start + cfg.patch_len > x.size()) start = x.size() - cfg.patch_len;
    for (std::size_t j = 0; j < cfg.patch_len; ++j)
      out.at(i, j) = x[start + j];
  }
  return out;
}

// ── configuration ────────────────────────────────────────────────────────────

enum class ContextMode { mhsa, concat_linear, off };

inline const char* to_string(ContextMode m) {
  switch (m) {
    case ContextMode::mhsa: return "mhsa";
    case ContextMode::concat_linear: return "concat_linear";
    case ContextMode::off: return "off";
  }
  return "?";
}

inline ContextMode context_mode_from_string(const std::string& s) {
  if (s == "mhsa") return ContextMode::mhsa;
  if (s == "concat_linear") return ContextMode::concat_linear;
  if (s == "off") return ContextMode::off;
  throw Error(ErrorKind::config, "unknown context mode: " + s);
}

struct EncoderConfig {
  std::size_t d_model = 512;
  std::size_t n_layers = 3;
  std::size_t n_heads = 4;
  std::size_t d_ff = 2048;
  double dropout = 0.05;
  std::size_t lstm_layers = 2;
  std::size_t lstm_hidden = 256;
  double translation_weight = 0.1;  // weight of the translation loss term
  double huber_delta = 1.0;
  PatchConfig patch;
  ContextMode context_mode = ContextMode::mhsa;
  bool linear_translators = false;  // ablation: single linear map translators

  void validate() const {
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
      throw Error(ErrorKind::config, "d_model must be divisible by n_heads");
    if (n_layers == 0 || d_ff == 0 || lstm_layers == 0 || lstm_hidden == 0)
      throw Error(ErrorKind::config, "encoder dimensions must be positive");
    if (dropout < 0.0 || dropout >= 1.0)
      throw Error(ErrorKind::config, "dropout must lie in [0, 1)");
    if (translation_weight < 0.0)
      throw Error(ErrorKind::config, "translation weight must be >= 0");
    if (huber_delta <= 0.0)
      throw Error(ErrorKind::config, "huber delta must be > 0");
    validate_patching(data::kInputLen, patch);
  }

  nlohmann::json to_json() const {
    return {{"d_model", d_model},
            {"n_layers", n_layers},
            {"n_heads", n_heads},
            {"d_ff", d_ff},
            {"dropout", dropout},
            {"lstm_layers", lstm_layers},
            {"lstm_hidden", lstm_hidden},
            {"translation_weight", translation_weight},
            {"huber_delta", huber_delta},
            {"patch_len", patch.patch_len},
            {"patch_stride", patch.stride},
            {"context_mode", to_string(context_mode)},
            {"linear_translators", linear_translators}};
  }

  static EncoderConfig from_json(const nlohmann::json& j) {
    EncoderConfig c;
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.dropout = j.at("dropout").get<double>();
    c.lstm_layers = j.at("lstm_layers").get<std::size_t>();
    c.lstm_hidden = j.at("lstm_hidden").get<std::size_t>();
    c.translation_weight = j.at("translation_weight").get<double>();
    c.huber_delta = j.at("huber_delta").get<double>();
    c.patch.patch_len = j.at("patch_len").get<std::size_t>();
    c.patch.stride = j.at("patch_stride").get<std::size_t>();
    c.context_mode =
        context_mode_from_string(j.at("context_mode").get<std::string>());
    c.linear_translators = j.at("linear_translators").get<bool>();
    c.validate();
    return c;
  }
};

// ── model ────────────────────────────────────────────────────────────────────

struct ForwardResult {
  Tensor y_hat;         // [1, 12] normalized forecast trajectory
  Tensor z;             // [1, d] fused representation (retrieval key)
  Tensor z_bgl;         // [1, d] pooled glucose embedding
  Tensor z_ctx;         // [1, d] projected context embedding (empty if off)
  Tensor patch_states;  // [N, d] post-encoder patch tokens
  Tensor loss_forecast;  // scalar
  Tensor loss_total;     // scalar
  // Translation loss: attached to the tape only when the config weights it
  // into the total; its numeric value is always reported for logging.
  double loss_trans_value = 0.0;
};

class EncoderModel {
 public:
  EncoderModel(const EncoderConfig& cfg, std::uint64_t seed)
      : cfg_(cfg), dropout_rng_(seed ^ 0x9e3779b97f4a7c15ull) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const std::size_t d = cfg_.d_model;

    w_bgl_ = params_.add("bgl_embed.w",
                         init_weight(cfg_.patch.patch_len,
                                     cfg_.patch.patch_len, d, rng));
    w_text_ = params_.add(
        "text_proj.w", init_weight(context::kTextDim, context::kTextDim, d, rng));

    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      const std::string ls = "layer" + std::to_string(l);
      Block b;
      b.ln1_gamma = params_.add(ls + ".ln1.gamma", Tensor::full(1, d, 1.0));
      b.ln1_beta = params_.add(ls + ".ln1.beta", Tensor(1, d));
      b.attn = MhaParams::init(params_, ls + ".attn", d, cfg_.n_heads, rng);
      b.ln2_gamma = params_.add(ls + ".ln2.gamma", Tensor::full(1, d, 1.0));
      b.ln2_beta = params_.add(ls + ".ln2.beta", Tensor(1, d));
      b.ff_w1 = params_.add(ls + ".ff.w1", init_weight(d, d, cfg_.d_ff, rng));
      b.ff_b1 = params_.add(ls + ".ff.b1", Tensor(1, cfg_.d_ff));
      b.ff_w2 = params_.add(ls + ".ff.w2", init_weight(cfg_.d_ff, cfg_.d_ff, d, rng));
      b.ff_b2 = params_.add(ls + ".ff.b2", Tensor(1, d));
      blocks_.push_back(b);
    }

    if (cfg_.context_mode == ContextMode::mhsa) {
      fusion_attn_ = MhaParams::init(params_, "fusion.attn", d, cfg_.n_heads, rng);
    } else if (cfg_.context_mode == ContextMode::concat_linear) {
      fusion_w_ = params_.add("fusion.concat.w", init_weight(2 * d, 2 * d, d, rng));
      fusion_b_ = params_.add("fusion.concat.b", Tensor(1, d));
    }

    if (cfg_.context_mode != ContextMode::off) {
      const std::vector<std::size_t> dims =
          cfg_.linear_translators
              ? std::vector<std::size_t>{d, d}
              : std::vector<std::size_t>{d, 512, 512, d};
      trans_bc_ = MlpParams::init(params_, "trans_bc", dims, rng);
      trans_cb_ = MlpParams::init(params_, "trans_cb", dims, rng);
    }

    lstm_ = LstmParams::init(params_, "head.lstm", d, cfg_.lstm_hidden,
                             cfg_.lstm_layers, rng);
    head_w_ = params_.add(
        "head.out.w",
        init_weight(cfg_.lstm_hidden + d, cfg_.lstm_hidden + d,
                    data::kHorizonLen, rng));
    head_b_ = params_.add("head.out.b", Tensor(1, data::kHorizonLen));
  }

  const EncoderConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  void set_training(bool on) { training_ = on; }
  bool training() const { return training_; }
  void set_trainable(bool on) { params_.set_trainable(on); }

  // Re-seed the dropout stream (used to make full runs reproducible).
  void seed_dropout(std::uint64_t seed) {
    dropout_rng_.seed(seed ^ 0x9e3779b97f4a7c15ull);
  }

  // Encode only: normalized window + raw text embedding → fused z and
  // friends. No loss terms; usable with frozen parameters.
  ForwardResult encode(Tape& tape, const std::vector<double>& x_norm,
                       const std::array<double, context::kTextDim>& ctx_raw) {
    ForwardResult r;
    Tensor patches = patchify(x_norm, cfg_.patch);
    Tensor tokens = matmul(tape, patches, w_bgl_);
    tokens = add(tape, tokens,
                 sinusoidal_pe(tokens.rows(), cfg_.d_model));
    for (const Block& b : blocks_) tokens = encode_block(tape, tokens, b);
    r.patch_states = tokens;
    r.z_bgl = mean_rows(tape, tokens);

    if (cfg_.context_mode == ContextMode::off) {
      r.z = r.z_bgl;
      return r;
    }

    Tensor raw(1, context::kTextDim);
    for (std::size_t i = 0; i < context::kTextDim; ++i)
      raw.at(0, i) = ctx_raw[i];
    r.z_ctx = matmul(tape, raw, w_text_);

    if (cfg_.context_mode == ContextMode::mhsa) {
      Tensor z2 = concat_rows(tape, {r.z_bgl, r.z_ctx});
      Tensor fused =
          add(tape, z2, multi_head_attention(tape, z2, z2, z2, fusion_attn_));
      r.z = mean_rows(tape, fused);
    } else {
      Tensor cat = concat_cols(tape, {r.z_bgl, r.z_ctx});
      r.z = linear(tape, cat, fusion_w_, fusion_b_);
    }
    return r;
  }

  // Full pretraining pass: encode, forecast, and combine losses.
  // y_norm is the normalized 12-step target trajectory.
  ForwardResult forward_pretrain(
      Tape& tape, const std::vector<double>& x_norm,
      const std::array<double, context::kTextDim>& ctx_raw,
      const std::array<double, data::kHorizonLen>& y_norm) {
    ForwardResult r = encode(tape, x_norm, ctx_raw);
    r.y_hat = forecast(tape, r.patch_states, r.z);

    Tensor target(1, data::kHorizonLen);
    for (std::size_t i = 0; i < data::kHorizonLen; ++i)
      target.at(0, i) = y_norm[i];
    r.loss_forecast = huber_loss(tape, r.y_hat, target, cfg_.huber_delta);

    if (cfg_.context_mode != ContextMode::off &&
        cfg_.translation_weight > 0.0) {
      Tensor l_trans = translation_loss(tape, r.z_bgl, r.z_ctx);
      r.loss_trans_value = l_trans.at(0, 0);
      r.loss_total = add(tape, r.loss_forecast,
                         scale(tape, l_trans, cfg_.translation_weight));
    } else {
      if (cfg_.context_mode != ContextMode::off) {
        // Weight zero: keep the diagnostic value but leave the tape alone.
        Tape scratch;
        Tensor l = translation_loss(scratch, stop_gradient(r.z_bgl),
                                    stop_gradient(r.z_ctx));
        r.loss_trans_value = l.at(0, 0);
      }
      r.loss_total = r.loss_forecast;
    }
    return r;
  }

  // LSTM head over the patch states, conditioned on z.
  Tensor forecast(Tape& tape, const Tensor& patch_states, const Tensor& z) {
    LstmResult lstm = lstm_forward(tape, patch_states, lstm_);
    Tensor joint = concat_cols(tape, {lstm.last_hidden, z});
    return linear(tape, joint, head_w_, head_b_);
  }

  // L = ||T_bc(z_bgl) - sg(z_ctx)||^2 + ||T_cb(z_ctx) - sg(z_bgl)||^2.
  // Targets are detached so the loss aligns the translators (and the source
  // embedding) without collapsing both embeddings toward each other.
  Tensor translation_loss(Tape& tape, const Tensor& z_bgl,
                          const Tensor& z_ctx) {
    Tensor fwd = sub(tape, mlp_forward(tape, z_bgl, trans_bc_),
                     stop_gradient(z_ctx));
    Tensor bwd = sub(tape, mlp_forward(tape, z_ctx, trans_cb_),
                     stop_gradient(z_bgl));
    Tensor loss = add(tape, sum_all(tape, mul(tape, fwd, fwd)),
                      sum_all(tape, mul(tape, bwd, bwd)));
    return loss;
  }

 private:
  struct Block {
    Tensor ln1_gamma, ln1_beta;
    MhaParams attn;
    Tensor ln2_gamma, ln2_beta;
    Tensor ff_w1, ff_b1, ff_w2, ff_b2;
  };

  Tensor encode_block(Tape& tape, const Tensor& x, const Block& b) {
    Tensor h = layer_norm(tape, x, b.ln1_gamma, b.ln1_beta);
    Tensor attn = multi_head_attention(tape, h, h, h, b.attn);
    Tensor x1 = add(tape, x, maybe_dropout(tape, attn));
    Tensor h2 = layer_norm(tape, x1, b.ln2_gamma, b.ln2_beta);
    Tensor ff = linear(tape, gelu(tape, linear(tape, h2, b.ff_w1, b.ff_b1)),
                       b.ff_w2, b.ff_b2);
    return add(tape, x1, maybe_dropout(tape, ff));
  }

  Tensor maybe_dropout(Tape& tape, const Tensor& x) {
    return dropout(tape, x, cfg_.dropout, dropout_rng_, training_);
  }

  EncoderConfig cfg_;
  ParamStore params_;
  std::mt19937_64 dropout_rng_;
  bool training_ = false;

  Tensor w_bgl_, w_text_;
  std::vector<Block> blocks_;
  MhaParams fusion_attn_;
  Tensor fusion_w_, fusion_b_;
  MlpParams trans_bc_, trans_cb_;
  LstmParams lstm_;
  Tensor head_w_, head_b_;
};

}  // namespace glyrag::model
