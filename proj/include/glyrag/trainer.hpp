// Training pipeline: configuration, cohort preparation, encoder pre-training,
// retrieval-database construction, adapter fine-tuning, prediction dumps,
// clinically grounded evaluation, and the run manifest that binds every
// artifact to the configuration and data that produced it.
//
// Stage order is enforced through content hashes: the encoder checkpoint's
// SHA-256 is stamped into the retrieval index and the adapter checkpoint, so
// artifacts from different runs refuse to combine. Given the same seed,
// configuration, and data, every artifact byte is reproducible.
#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "glyrag/checkpoint.hpp"
#include "glyrag/context.hpp"
#include "glyrag/data.hpp"
#include "glyrag/encoder.hpp"
#include "glyrag/error.hpp"
#include "glyrag/metrics.hpp"
#include "glyrag/nn.hpp"
#include "glyrag/retrieval.hpp"
#include "glyrag/tensor.hpp"

namespace glyrag::train {

// ── configuration ────────────────────────────────────────────────────────────
//
// The three ablation switches pick the architecture:
//   use_context_attention  on  → context fused by multi-head self-attention
//                          off → context fused by concat + linear projection
//   use_translation_loss   on  → auxiliary cross-modal loss joins the total
//                          off → weight forced to zero (still logged)
//   all three off              → context path removed entirely (glucose-only)
//
// `translation_weight` and `huber_delta` live at the top level; the nested
// encoder block rejects them (and `context_mode`) as reserved, because those
// values are derived from the switches above. Likewise the adapter block
// rejects `d_model` (copied from the encoder) and `k` (copied from
// `retrieval_k`).

struct TrainConfig {
  std::uint64_t seed = 42;
  double lr = 1e-3;
  std::size_t epochs_pretrain = 100;
  std::size_t epochs_finetune = 50;
  std::size_t batch_size = 32;
  bool use_rag = true;
  bool use_context_attention = true;
  bool use_translation_loss = true;
  double test_fraction = 0.25;
  double val_fraction = 0.15;
  std::size_t retrieval_k = 3;
  double translation_weight = 0.1;
  double huber_delta = 1.0;
  model::EncoderConfig encoder;
  rag::AdapterConfig adapter;

  // The encoder that actually gets built: switches resolved into a mode.
  model::EncoderConfig effective_encoder() const {
    model::EncoderConfig e = encoder;
    if (!use_rag && !use_context_attention && !use_translation_loss)
      e.context_mode = model::ContextMode::off;
    else
      e.context_mode = use_context_attention ? model::ContextMode::mhsa
                                             : model::ContextMode::concat_linear;
    e.translation_weight = use_translation_loss ? translation_weight : 0.0;
    e.huber_delta = huber_delta;
    return e;
  }

  rag::AdapterConfig effective_adapter() const {
    rag::AdapterConfig a = adapter;
    a.d_model = encoder.d_model;
    a.k = retrieval_k;
    return a;
  }

  void validate() const {
    if (lr <= 0.0) throw Error(ErrorKind::config, "lr must be > 0");
    if (batch_size == 0)
      throw Error(ErrorKind::config, "batch_size must be >= 1");
    if (epochs_pretrain == 0 || epochs_finetune == 0)
      throw Error(ErrorKind::config, "epoch counts must be >= 1");
    if (!(test_fraction > 0.0 && test_fraction < 1.0))
      throw Error(ErrorKind::config, "test_fraction must lie in (0, 1)");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0))
      throw Error(ErrorKind::config, "val_fraction must lie in [0, 1)");
    if (retrieval_k == 0)
      throw Error(ErrorKind::config, "retrieval_k must be >= 1");
    if (translation_weight < 0.0)
      throw Error(ErrorKind::config, "translation_weight must be >= 0");
    if (huber_delta <= 0.0)
      throw Error(ErrorKind::config, "huber_delta must be > 0");
    effective_encoder().validate();
    effective_adapter().validate();
  }

  // Canonical shape: derived keys are stripped from the nested blocks so two
  // configs that build the same models hash identically.
  nlohmann::json to_json() const {
    nlohmann::json enc = encoder.to_json();
    enc.erase("context_mode");
    enc.erase("translation_weight");
    enc.erase("huber_delta");
    nlohmann::json ad = adapter.to_json();
    ad.erase("d_model");
    ad.erase("k");
    return {{"seed", seed},
            {"lr", lr},
            {"epochs_pretrain", epochs_pretrain},
            {"epochs_finetune", epochs_finetune},
            {"batch_size", batch_size},
            {"use_rag", use_rag},
            {"use_context_attention", use_context_attention},
            {"use_translation_loss", use_translation_loss},
            {"test_fraction", test_fraction},
            {"val_fraction", val_fraction},
            {"retrieval_k", retrieval_k},
            {"translation_weight", translation_weight},
            {"huber_delta", huber_delta},
            {"encoder", enc},
            {"adapter", ad}};
  }

  // Partial configs are fine: user keys overlay the defaults. Unknown keys —
  // including the reserved derived keys — are configuration errors, so typos
  // fail loudly instead of silently training the default model.
  static TrainConfig from_json(const nlohmann::json& j) {
    if (!j.is_object())
      throw Error(ErrorKind::config, "train config must be a JSON object");
    nlohmann::json merged = TrainConfig{}.to_json();
    for (const auto& [key, value] : j.items()) {
      if (key == "encoder" || key == "adapter") {
        if (!value.is_object())
          throw Error(ErrorKind::config, key + " must be a JSON object");
        for (const auto& [sub, sval] : value.items()) {
          if (!merged[key].contains(sub))
            throw Error(ErrorKind::config,
                        "unknown or reserved config key: " + key + "." + sub);
          merged[key][sub] = sval;
        }
      } else {
        if (!merged.contains(key))
          throw Error(ErrorKind::config, "unknown config key: " + key);
        merged[key] = value;
      }
    }
    TrainConfig c;
    try {
      c.seed = merged.at("seed").get<std::uint64_t>();
      c.lr = merged.at("lr").get<double>();
      c.epochs_pretrain = merged.at("epochs_pretrain").get<std::size_t>();
      c.epochs_finetune = merged.at("epochs_finetune").get<std::size_t>();
      c.batch_size = merged.at("batch_size").get<std::size_t>();
      c.use_rag = merged.at("use_rag").get<bool>();
      c.use_context_attention =
          merged.at("use_context_attention").get<bool>();
      c.use_translation_loss = merged.at("use_translation_loss").get<bool>();
      c.test_fraction = merged.at("test_fraction").get<double>();
      c.val_fraction = merged.at("val_fraction").get<double>();
      c.retrieval_k = merged.at("retrieval_k").get<std::size_t>();
      c.translation_weight = merged.at("translation_weight").get<double>();
      c.huber_delta = merged.at("huber_delta").get<double>();
      // Re-inject the reserved keys with inert defaults; effective_encoder /
      // effective_adapter overwrite them anyway.
      nlohmann::json enc = merged.at("encoder");
      const model::EncoderConfig ebase;
      enc["context_mode"] = model::to_string(ebase.context_mode);
      enc["translation_weight"] = ebase.translation_weight;
      enc["huber_delta"] = ebase.huber_delta;
      c.encoder = model::EncoderConfig::from_json(enc);
      nlohmann::json ad = merged.at("adapter");
      const rag::AdapterConfig abase;
      ad["d_model"] = abase.d_model;
      ad["k"] = abase.k;
      c.adapter = rag::AdapterConfig::from_json(ad);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::config,
                  std::string("train config: ") + e.what());
    }
    c.validate();
    return c;
  }

  std::string config_hash() const { return ckpt::json_sha256(to_json()); }
};

// ── window plumbing ──────────────────────────────────────────────────────────

inline std::array<double, data::kInputLen> x_array(const data::CgmWindow& w) {
  if (w.x.size() != data::kInputLen)
    throw Error(ErrorKind::validation,
                "window " + context::window_ref(w) + " has " +
                    std::to_string(w.x.size()) + " input samples; expected " +
                    std::to_string(data::kInputLen));
  std::array<double, data::kInputLen> out{};
  std::copy(w.x.begin(), w.x.end(), out.begin());
  return out;
}

inline std::array<double, data::kHorizonLen> y_array(
    const std::vector<double>& y) {
  if (y.size() != data::kHorizonLen)
    throw Error(ErrorKind::validation,
                "trajectory has " + std::to_string(y.size()) +
                    " samples; expected " + std::to_string(data::kHorizonLen));
  std::array<double, data::kHorizonLen> out{};
  std::copy(y.begin(), y.end(), out.begin());
  return out;
}

// ── summaries ────────────────────────────────────────────────────────────────
//
// Summaries are produced once by the contextualize step and consumed read-only
// by training and inference. The store addresses them by prompt content, so a
// window whose inputs change gets a fresh summary automatically.

class SummaryStore {
 public:
  explicit SummaryStore(std::filesystem::path dir) : dir_(std::move(dir)) {}

  const std::filesystem::path& dir() const { return dir_; }

  context::ContextSummary get(const data::CgmWindow& w) const {
    const std::string prompt = context::build_prompt(w.features, x_array(w));
    auto s = context::load_summary(dir_, prompt);
    if (!s.has_value())
      throw Error(ErrorKind::missing_artifact,
                  "no summary for window " + context::window_ref(w) + " in " +
                      dir_.string() + "; run the contextualize step first");
    s->window_ref = context::window_ref(w);
    return *s;
  }

  bool has(const data::CgmWindow& w) const {
    return context::load_summary(dir_, context::build_prompt(w.features,
                                                             x_array(w)))
        .has_value();
  }

 private:
  std::filesystem::path dir_;
};

// Pluggable summary producer so the batch step works identically whether the
// text comes from the local rules or a remote language model.
using Summarizer = std::function<context::ContextSummary(
    const data::WindowSummaryFeatures&,
    const std::array<double, data::kInputLen>&, const std::string&)>;

inline Summarizer rule_based_summarizer() {
  return [](const data::WindowSummaryFeatures& f,
            const std::array<double, data::kInputLen>& x,
            const std::string& ref) {
    context::ContextSummary s = context::summarize_rule_based(f, x);
    s.window_ref = ref;
    return s;
  };
}

// Fills the store for every window that lacks a summary. Idempotent: cached
// windows are skipped, so reruns are cheap and byte-stable. Returns how many
// summaries were freshly generated.
inline std::size_t contextualize(const std::vector<data::CgmWindow>& windows,
                                 const std::filesystem::path& dir,
                                 const Summarizer& summarize,
                                 int parallelism = 1) {
  std::atomic<std::size_t> fresh{0};
  context::for_each_bounded(windows.size(), parallelism, [&](std::size_t i) {
    const data::CgmWindow& w = windows[i];
    const auto x = x_array(w);
    const std::string prompt = context::build_prompt(w.features, x);
    if (context::load_summary(dir, prompt).has_value()) return;
    context::ContextSummary s =
        summarize(w.features, x, context::window_ref(w));
    context::save_summary(dir, prompt, s);
    fresh.fetch_add(1);
  });
  return fresh.load();
}

// ── context embedding ────────────────────────────────────────────────────────

using EmbedFn = std::function<std::array<double, context::kTextDim>(
    const data::CgmWindow&)>;

// Embeds the stored summary text. Holds a reference: the store must outlive
// the returned function.
inline EmbedFn store_embedder(const SummaryStore& store) {
  return [&store](const data::CgmWindow& w) {
    return context::embed_text(store.get(w).text);
  };
}

// Glucose-only runs never read a summary; the context input is all zeros and
// the store is never touched, so missing or deleted summaries cannot matter.
inline EmbedFn zero_embedder() {
  return [](const data::CgmWindow&) {
    return std::array<double, context::kTextDim>{};
  };
}

inline EmbedFn embedder_for(const TrainConfig& cfg, const SummaryStore& store) {
  if (cfg.effective_encoder().context_mode == model::ContextMode::off)
    return zero_embedder();
  return store_embedder(store);
}

// ── cohort preparation ───────────────────────────────────────────────────────

struct CohortData {
  std::vector<data::PatientSeries> train_series;
  std::vector<data::PatientSeries> test_series;
  std::map<std::string, data::NormStats> norms;
  std::vector<data::CgmWindow> train_windows;
  std::vector<data::CgmWindow> test_windows;
  // Indices into train_windows. The fit set drives the optimizer; the val set
  // is each patient's chronological tail, held out for model selection. Both
  // still belong to the training split, so the retrieval database may cover
  // all of train_windows.
  std::vector<std::size_t> fit_indices;
  std::vector<std::size_t> val_indices;
};

inline CohortData prepare(const std::vector<data::PatientSeries>& raw,
                          const TrainConfig& cfg) {
  if (raw.empty()) throw Error(ErrorKind::validation, "prepare: empty cohort");
  CohortData c;
  for (const data::PatientSeries& series : raw) {
    if (c.norms.count(series.patient_id))
      throw Error(ErrorKind::validation,
                  "prepare: duplicate patient " + series.patient_id);
    auto [train_raw, test_raw] = data::split_series(series, cfg.test_fraction);
    data::PatientSeries train = data::impute_gaps(train_raw);
    data::PatientSeries test = data::impute_gaps(test_raw);
    c.norms.emplace(series.patient_id, data::fit_norm(train));

    const std::size_t before = c.train_windows.size();
    for (data::CgmWindow& w : data::make_windows(train))
      c.train_windows.push_back(std::move(w));
    const std::size_t n = c.train_windows.size() - before;
    const auto n_val =
        static_cast<std::size_t>(std::floor(cfg.val_fraction * double(n)));
    for (std::size_t i = 0; i < n; ++i)
      (i < n - n_val ? c.fit_indices : c.val_indices).push_back(before + i);

    for (data::CgmWindow& w : data::make_windows(test))
      c.test_windows.push_back(std::move(w));
    c.train_series.push_back(std::move(train));
    c.test_series.push_back(std::move(test));
  }
  if (c.train_windows.empty())
    throw Error(ErrorKind::validation,
                "prepare: the training split yields no windows (need 48 "
                "consecutive samples per window)");
  if (c.fit_indices.empty())
    throw Error(ErrorKind::validation,
                "prepare: val_fraction leaves nothing to optimize");
  return c;
}

// ── loss logging ─────────────────────────────────────────────────────────────

struct LossRow {
  std::size_t epoch = 0;  // 1-based
  double total = 0.0;
  double forecast = 0.0;
  double trans = 0.0;
};

namespace detail {

inline std::string fmt_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_text_atomic(const std::filesystem::path& path,
                              const std::string& text) {
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = context::detail::temp_sibling(path);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::io, "cannot open " + tmp.string());
    out << text;
    out.close();
    if (!out) throw Error(ErrorKind::io, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw Error(ErrorKind::io,
                "cannot move " + tmp.string() + " to " + path.string());
  }
}

// Fisher–Yates with a pinned generator: std::shuffle's draw pattern is
// implementation-defined, and reproducibility across toolchains matters more
// than the negligible modulo bias.
inline void seeded_shuffle(std::vector<std::size_t>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i)
    std::swap(v[i - 1], v[rng() % i]);
}

}  // namespace detail

inline void write_loss_csv(const std::filesystem::path& path,
                           const std::vector<LossRow>& rows) {
  std::string text = "epoch,loss_total,loss_forecast,loss_trans\n";
  for (const LossRow& r : rows) {
    text += std::to_string(r.epoch);
    text += ',';
    text += detail::fmt_g17(r.total);
    text += ',';
    text += detail::fmt_g17(r.forecast);
    text += ',';
    text += detail::fmt_g17(r.trans);
    text += '\n';
  }
  detail::write_text_atomic(path, text);
}

// ── encoder pre-training ─────────────────────────────────────────────────────

inline std::vector<LossRow> pretrain(model::EncoderModel& enc,
                                     const CohortData& cohort,
                                     const EmbedFn& embed,
                                     const TrainConfig& cfg) {
  if (cohort.fit_indices.empty())
    throw Error(ErrorKind::validation, "pretrain: nothing to optimize");
  // Embed everything up front: a missing summary aborts before the first
  // gradient step, and each window's context is computed exactly once.
  std::vector<std::array<double, context::kTextDim>> ctx(
      cohort.train_windows.size());
  for (std::size_t i : cohort.fit_indices)
    ctx[i] = embed(cohort.train_windows[i]);

  enc.set_training(true);
  enc.seed_dropout(cfg.seed);
  Adam opt(AdamConfig{.lr = cfg.lr});
  const std::vector<Tensor> tensors = enc.params().tensors();
  std::mt19937_64 shuffle_rng(cfg.seed ^ 0xd1b54a32d192ed03ull);
  std::vector<std::size_t> order = cohort.fit_indices;
  std::vector<LossRow> log;
  log.reserve(cfg.epochs_pretrain);

  for (std::size_t epoch = 0; epoch < cfg.epochs_pretrain; ++epoch) {
    detail::seeded_shuffle(order, shuffle_rng);
    double sum_total = 0.0, sum_fore = 0.0, sum_trans = 0.0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      Tape tape;
      Tensor batch_loss;
      for (std::size_t ii = b; ii < e; ++ii) {
        const data::CgmWindow& w = cohort.train_windows[order[ii]];
        const data::NormStats& norm = cohort.norms.at(w.patient_id);
        model::ForwardResult r = enc.forward_pretrain(
            tape, data::normalize(w.x, norm), ctx[order[ii]],
            y_array(data::normalize(w.trajectory, norm)));
        sum_total += r.loss_total.at(0, 0);
        sum_fore += r.loss_forecast.at(0, 0);
        sum_trans += r.loss_trans_value;
        batch_loss =
            (ii == b) ? r.loss_total : add(tape, batch_loss, r.loss_total);
      }
      batch_loss = scale(tape, batch_loss, 1.0 / double(e - b));
      enc.params().zero_grad();
      tape.backward(batch_loss);
      opt.step(tensors);
    }
    const double n = double(order.size());
    log.push_back(
        {epoch + 1, sum_total / n, sum_fore / n, sum_trans / n});
  }
  enc.set_training(false);
  return log;
}

// ── encoder persistence ──────────────────────────────────────────────────────

inline constexpr const char* kEncoderKind = "glyrag-encoder";
inline constexpr const char* kAdapterKind = "glyrag-adapter";

inline void save_encoder(const std::filesystem::path& path,
                         const model::EncoderModel& enc,
                         const TrainConfig& cfg) {
  const nlohmann::json meta{{"kind", kEncoderKind},
                            {"config_hash", cfg.config_hash()},
                            {"seed", cfg.seed},
                            {"encoder_config", enc.config().to_json()}};
  ckpt::save_checkpoint(path, enc.params(), meta);
}

inline model::EncoderModel load_encoder(const std::filesystem::path& path,
                                        const TrainConfig& cfg) {
  const ckpt::Checkpoint ck = ckpt::load_checkpoint(path);
  if (!ck.meta.is_object() || ck.meta.value("kind", "") != kEncoderKind)
    throw Error(ErrorKind::parse,
                path.string() + " is not an encoder checkpoint");
  if (ck.meta.value("config_hash", "") != cfg.config_hash())
    throw Error(ErrorKind::hash_mismatch,
                "encoder checkpoint " + path.string() +
                    " was produced under a different configuration");
  model::EncoderModel enc(cfg.effective_encoder(), cfg.seed);
  ckpt::restore_into(ck, enc.params());
  enc.set_training(false);
  return enc;
}

// ── retrieval database ───────────────────────────────────────────────────────

// Freezes the encoder and embeds every training window (fit and val alike —
// both belong to the training split) into the retrieval database. The
// encoder's checkpoint hash rides along so later stages can refuse a
// mismatched pairing.
inline rag::RetrievalIndex freeze_and_index(model::EncoderModel& enc,
                                            const std::string& encoder_sha,
                                            const CohortData& cohort,
                                            const EmbedFn& embed) {
  return rag::build_index(enc, encoder_sha, cohort.norms,
                          cohort.train_windows, embed);
}

// ── adapter fine-tuning ──────────────────────────────────────────────────────

// Trains the retrieval adapter against the frozen encoder. During training
// each query excludes its own window from the database (the answer must come
// from genuine analogues, not the window itself). The encoder is left frozen
// on return.
inline std::vector<LossRow> finetune_adapter(
    rag::AdapterModel& adapter, model::EncoderModel& enc,
    const std::string& encoder_sha, const rag::RetrievalIndex& index,
    const CohortData& cohort, const EmbedFn& embed, const TrainConfig& cfg) {
  index.require_encoder(encoder_sha);
  if (cohort.fit_indices.empty())
    throw Error(ErrorKind::validation, "finetune: nothing to optimize");
  enc.set_training(false);
  enc.set_trainable(false);

  // The encoder and index are frozen, so each window's query embedding,
  // neighbor set, and target are loop invariants: compute them once and feed
  // the adapter constants. The adapter's gradients are identical to encoding
  // inside the loop — only the dead encoder work disappears.
  struct Example {
    Tensor z;                              // [1, d] constant query
    rag::NeighborSet neighbors;            // fixed analogue rows
    std::array<double, data::kHorizonLen> target{};
  };
  std::vector<Example> examples(cohort.train_windows.size());
  for (std::size_t i : cohort.fit_indices) {
    const data::CgmWindow& w = cohort.train_windows[i];
    const data::NormStats& norm = cohort.norms.at(w.patient_id);
    Tape scratch;
    const model::ForwardResult r =
        enc.encode(scratch, data::normalize(w.x, norm), embed(w));
    Example& ex = examples[i];
    const std::vector<double> z_vals = r.z.values();
    ex.z = Tensor(1, z_vals.size());
    for (std::size_t c = 0; c < z_vals.size(); ++c) ex.z.at(0, c) = z_vals[c];
    ex.neighbors = index.query_top_k(z_vals, cfg.retrieval_k,
                                     {.exclude_ref = context::window_ref(w)});
    ex.target = y_array(data::normalize(w.trajectory, norm));
  }

  Adam opt(AdamConfig{.lr = cfg.lr});
  const std::vector<Tensor> tensors = adapter.params().tensors();
  std::mt19937_64 shuffle_rng(cfg.seed ^ 0xa0761d6478bd642full);
  std::vector<std::size_t> order = cohort.fit_indices;
  std::vector<LossRow> log;
  log.reserve(cfg.epochs_finetune);

  for (std::size_t epoch = 0; epoch < cfg.epochs_finetune; ++epoch) {
    detail::seeded_shuffle(order, shuffle_rng);
    double sum_loss = 0.0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      Tape tape;
      Tensor batch_loss;
      for (std::size_t ii = b; ii < e; ++ii) {
        const Example& ex = examples[order[ii]];
        const Tensor pred = adapter.forecast(
            tape, ex.z, rag::neighbor_tensors(index, ex.neighbors));
        Tensor target(1, data::kHorizonLen);
        for (std::size_t i = 0; i < data::kHorizonLen; ++i)
          target.at(0, i) = ex.target[i];
        const Tensor loss = huber_loss(tape, pred, target, cfg.huber_delta);
        sum_loss += loss.at(0, 0);
        batch_loss = (ii == b) ? loss : add(tape, batch_loss, loss);
      }
      batch_loss = scale(tape, batch_loss, 1.0 / double(e - b));
      adapter.params().zero_grad();
      tape.backward(batch_loss);
      opt.step(tensors);
    }
    const double n = double(order.size());
    log.push_back({epoch + 1, sum_loss / n, sum_loss / n, 0.0});
  }
  return log;
}

// ── adapter persistence ──────────────────────────────────────────────────────

inline void save_adapter(const std::filesystem::path& path,
                         const rag::AdapterModel& adapter,
                         const TrainConfig& cfg,
                         const std::string& encoder_sha) {
  const nlohmann::json meta{{"kind", kAdapterKind},
                            {"config_hash", cfg.config_hash()},
                            {"seed", cfg.seed + 1},
                            {"encoder_checkpoint_sha256", encoder_sha},
                            {"adapter_config", adapter.config().to_json()}};
  ckpt::save_checkpoint(path, adapter.params(), meta);
}

inline rag::AdapterModel load_adapter(const std::filesystem::path& path,
                                      const TrainConfig& cfg,
                                      const std::string& encoder_sha) {
  const ckpt::Checkpoint ck = ckpt::load_checkpoint(path);
  if (!ck.meta.is_object() || ck.meta.value("kind", "") != kAdapterKind)
    throw Error(ErrorKind::parse,
                path.string() + " is not an adapter checkpoint");
  if (ck.meta.value("config_hash", "") != cfg.config_hash())
    throw Error(ErrorKind::hash_mismatch,
                "adapter checkpoint " + path.string() +
                    " was produced under a different configuration");
  if (ck.meta.value("encoder_checkpoint_sha256", "") != encoder_sha)
    throw Error(ErrorKind::hash_mismatch,
                "adapter checkpoint " + path.string() +
                    " was fine-tuned against a different encoder");
  rag::AdapterModel adapter(cfg.effective_adapter(), cfg.seed + 1);
  ckpt::restore_into(ck, adapter.params());
  return adapter;
}

// ── prediction ───────────────────────────────────────────────────────────────

struct WindowPrediction {
  std::string window_ref;
  std::string patient_id;
  std::int64_t start_time = 0;
  std::array<double, data::kHorizonLen> ref{};   // ground truth, mg/dL
  std::array<double, data::kHorizonLen> pred{};  // raw model output, mg/dL
};

// Runs inference over the given windows. Pass the adapter and index together
// for retrieval-augmented forecasts, or both null for the encoder's own head.
// At inference the query keeps every database entry: excluding the query
// window only makes sense during training, where the window is its own label.
// Predictions are reported raw (denormalized, unclamped).
inline std::vector<WindowPrediction> predict(
    model::EncoderModel& enc, const rag::AdapterModel* adapter,
    const rag::RetrievalIndex* index,
    const std::vector<data::CgmWindow>& windows,
    const std::map<std::string, data::NormStats>& norms, const EmbedFn& embed,
    const TrainConfig& cfg) {
  if ((adapter == nullptr) != (index == nullptr))
    throw Error(ErrorKind::validation,
                "predict: retrieval needs both an adapter and an index");
  enc.set_training(false);
  std::vector<WindowPrediction> out;
  out.reserve(windows.size());
  for (const data::CgmWindow& w : windows) {
    const auto it = norms.find(w.patient_id);
    if (it == norms.end())
      throw Error(ErrorKind::validation,
                  "no normalization statistics for patient " + w.patient_id);
    const data::NormStats& norm = it->second;
    Tape tape;
    model::ForwardResult r =
        enc.encode(tape, data::normalize(w.x, norm), embed(w));
    Tensor y;
    if (adapter != nullptr) {
      const rag::NeighborSet ns =
          index->query_top_k(r.z.values(), cfg.retrieval_k, {});
      y = adapter->forecast(tape, r.z, rag::neighbor_tensors(*index, ns));
    } else {
      y = enc.forecast(tape, r.patch_states, r.z);
    }
    WindowPrediction p;
    p.window_ref = context::window_ref(w);
    p.patient_id = w.patient_id;
    p.start_time = w.start_time;
    std::copy(w.trajectory.begin(), w.trajectory.end(), p.ref.begin());
    const std::vector<double> denorm = data::denormalize(y.values(), norm);
    std::copy(denorm.begin(), denorm.end(), p.pred.begin());
    out.push_back(std::move(p));
  }
  return out;
}

// ── prediction dumps ─────────────────────────────────────────────────────────
//
// Long format, one row per forecast step, so pooled metrics can be recomputed
// from the file with nothing but the file.

inline constexpr const char* kPredictionsHeader =
    "window_ref,patient_id,start_time,step,minutes,ref_mg_dl,pred_mg_dl";

inline void write_predictions_csv(const std::filesystem::path& path,
                                  const std::vector<WindowPrediction>& preds) {
  std::string text = kPredictionsHeader;
  text += '\n';
  for (const WindowPrediction& p : preds) {
    const std::string stamp = data::format_timestamp(p.start_time);
    for (std::size_t s = 1; s <= data::kHorizonLen; ++s) {
      text += p.window_ref;
      text += ',';
      text += p.patient_id;
      text += ',';
      text += stamp;
      text += ',';
      text += std::to_string(s);
      text += ',';
      text += std::to_string(5 * s);
      text += ',';
      text += detail::fmt_g17(p.ref[s - 1]);
      text += ',';
      text += detail::fmt_g17(p.pred[s - 1]);
      text += '\n';
    }
  }
  detail::write_text_atomic(path, text);
}

inline std::vector<WindowPrediction> read_predictions_csv(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in)
    throw Error(ErrorKind::missing_artifact,
                "predictions file not found: " + path.string());
  std::string line;
  if (!std::getline(in, line))
    throw Error(ErrorKind::parse, path.string() + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kPredictionsHeader)
    throw Error(ErrorKind::parse, path.string() + ": unexpected header");
  std::vector<WindowPrediction> out;
  WindowPrediction cur;
  std::size_t expect = 1;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto where = path.string() + ":" + std::to_string(lineno);
    const std::vector<std::string> cells = data::detail::split_csv_line(line);
    if (cells.size() != 7)
      throw Error(ErrorKind::parse, where + ": expected 7 cells, got " +
                                        std::to_string(cells.size()));
    const auto step_v = data::detail::parse_number(cells[3]);
    const auto minutes_v = data::detail::parse_number(cells[4]);
    const auto ref_v = data::detail::parse_number(cells[5]);
    const auto pred_v = data::detail::parse_number(cells[6]);
    if (!step_v || !minutes_v || !ref_v || !pred_v)
      throw Error(ErrorKind::parse, where + ": empty numeric cell");
    const auto step = static_cast<std::size_t>(*step_v);
    if (double(step) != *step_v || step != expect)
      throw Error(ErrorKind::parse,
                  where + ": expected step " + std::to_string(expect));
    if (*minutes_v != double(5 * step))
      throw Error(ErrorKind::parse,
                  where + ": minutes must be 5 times the step");
    if (expect == 1) {
      cur = WindowPrediction{};
      cur.window_ref = cells[0];
      cur.patient_id = cells[1];
      cur.start_time = data::parse_timestamp(cells[2]);
    } else if (cells[0] != cur.window_ref || cells[1] != cur.patient_id) {
      throw Error(ErrorKind::parse,
                  where + ": window changed before its trajectory finished");
    }
    cur.ref[step - 1] = *ref_v;
    cur.pred[step - 1] = *pred_v;
    if (expect == data::kHorizonLen) {
      out.push_back(cur);
      expect = 1;
    } else {
      ++expect;
    }
  }
  if (expect != 1)
    throw Error(ErrorKind::parse,
                path.string() + ": file ends mid-trajectory");
  return out;
}

// ── evaluation ───────────────────────────────────────────────────────────────
//
// Error metrics (RMSE, MAE, correlation) use the raw predictions. Clinical
// grids, time-in-range, and event sensitivity clamp both reference and
// prediction to the sensor's reportable range [40, 400] mg/dL first: the
// grids require positive finite glucose, and a forecast of 6000 mg/dL is
// clinically indistinguishable from one pegged at the sensor ceiling.

inline constexpr std::array<std::size_t, 3> kHorizonSteps{0, 5, 11};
inline constexpr std::array<std::size_t, 3> kHorizonMinutes{5, 30, 60};
inline constexpr double kClampLo = 40.0;
inline constexpr double kClampHi = 400.0;

struct HorizonMetrics {
  std::size_t minutes = 0;
  std::size_t n = 0;  // windows contributing
  double rmse = 0.0;
  double mae = 0.0;
  metrics::PearsonResult pearson;
  metrics::ClarkeReport clarke;
  double tir_ref = 0.0;
  double tir_pred = 0.0;
  double tir_deviation = 0.0;
  metrics::Sensitivity hypo_sens;
  metrics::Sensitivity hyper_sens;
  metrics::CgEgaReport cg;

  nlohmann::json to_json() const {
    const auto sens_json = [](const metrics::Sensitivity& s) {
      return nlohmann::json{{"percent", s.percent},
                            {"positives", s.positives},
                            {"defined", s.defined}};
    };
    return {{"minutes", minutes},
            {"n", n},
            {"rmse", rmse},
            {"mae", mae},
            {"pearson_r", pearson.r},
            {"pearson_defined", pearson.defined},
            {"clarke", clarke.to_json()},
            {"tir_ref", tir_ref},
            {"tir_pred", tir_pred},
            {"tir_deviation", tir_deviation},
            {"hypo_sensitivity", sens_json(hypo_sens)},
            {"hyper_sensitivity", sens_json(hyper_sens)},
            {"cg_ega", cg.to_json()}};
  }
};

struct EvaluationReport {
  std::string config_hash;
  std::size_t n_windows = 0;
  std::array<HorizonMetrics, 3> pooled;
  std::map<std::string, std::array<HorizonMetrics, 3>> per_patient;

  nlohmann::json to_json() const {
    nlohmann::json horizons = nlohmann::json::array();
    for (int h = 0; h < 3; ++h) {
      nlohmann::json pats = nlohmann::json::object();
      for (const auto& [pid, arr] : per_patient)
        pats[pid] = arr[std::size_t(h)].to_json();
      horizons.push_back({{"minutes", kHorizonMinutes[std::size_t(h)]},
                          {"pooled", pooled[std::size_t(h)].to_json()},
                          {"per_patient", pats}});
    }
    return {{"config_hash", config_hash},
            {"n_windows", n_windows},
            {"horizons", horizons}};
  }
};

namespace detail {

inline metrics::PairedSeries horizon_series(
    const std::vector<const WindowPrediction*>& preds, std::size_t step,
    bool clamped) {
  metrics::PairedSeries s;
  s.ref.reserve(preds.size());
  s.pred.reserve(preds.size());
  for (const WindowPrediction* p : preds) {
    double r = p->ref[step], q = p->pred[step];
    if (clamped) {
      r = std::clamp(r, kClampLo, kClampHi);
      q = std::clamp(q, kClampLo, kClampHi);
    }
    s.ref.push_back(r);
    s.pred.push_back(q);
  }
  return s;
}

// One patient's windows, ordered in time and split wherever consecutive
// windows are not exactly one sample apart. Runs shorter than two points
// cannot carry a rate and are dropped.
inline std::vector<metrics::PairedSeries> cg_segments(
    std::vector<const WindowPrediction*> preds, std::size_t step) {
  std::sort(preds.begin(), preds.end(),
            [](const WindowPrediction* a, const WindowPrediction* b) {
              return a->start_time < b->start_time;
            });
  std::vector<metrics::PairedSeries> out;
  metrics::PairedSeries cur;
  std::int64_t prev = 0;
  for (const WindowPrediction* p : preds) {
    if (!cur.ref.empty() && p->start_time - prev != data::kSampleSeconds) {
      if (cur.ref.size() >= 2) out.push_back(std::move(cur));
      cur = metrics::PairedSeries{};
    }
    cur.ref.push_back(std::clamp(p->ref[step], kClampLo, kClampHi));
    cur.pred.push_back(std::clamp(p->pred[step], kClampLo, kClampHi));
    prev = p->start_time;
  }
  if (cur.ref.size() >= 2) out.push_back(std::move(cur));
  return out;
}

inline HorizonMetrics compute_horizon(
    const std::vector<const WindowPrediction*>& preds,
    const std::vector<metrics::PairedSeries>& segments, int h) {
  HorizonMetrics m;
  m.minutes = kHorizonMinutes[std::size_t(h)];
  m.n = preds.size();
  const std::size_t step = kHorizonSteps[std::size_t(h)];
  const metrics::PairedSeries raw = horizon_series(preds, step, false);
  m.rmse = metrics::rmse(raw);
  m.mae = metrics::mae(raw);
  m.pearson = metrics::pearson(raw);
  const metrics::PairedSeries clamped = horizon_series(preds, step, true);
  m.clarke = metrics::clarke(clamped);
  m.tir_ref = metrics::tir(clamped.ref);
  m.tir_pred = metrics::tir(clamped.pred);
  m.tir_deviation = metrics::tir_deviation(clamped);
  m.hypo_sens = metrics::event_sensitivity(clamped, metrics::Band::hypo);
  m.hyper_sens = metrics::event_sensitivity(clamped, metrics::Band::hyper);
  if (!segments.empty()) m.cg = metrics::cg_ega(segments);
  return m;
}

}  // namespace detail

inline EvaluationReport evaluate(const std::vector<WindowPrediction>& preds,
                                 const std::string& config_hash) {
  if (preds.empty())
    throw Error(ErrorKind::validation, "evaluate: no predictions");
  EvaluationReport rep;
  rep.config_hash = config_hash;
  rep.n_windows = preds.size();
  std::vector<const WindowPrediction*> all;
  all.reserve(preds.size());
  std::map<std::string, std::vector<const WindowPrediction*>> by_patient;
  for (const WindowPrediction& p : preds) {
    all.push_back(&p);
    by_patient[p.patient_id].push_back(&p);
  }
  for (int h = 0; h < 3; ++h) {
    std::vector<metrics::PairedSeries> pooled_segments;
    for (const auto& [pid, ps] : by_patient) {
      std::vector<metrics::PairedSeries> segs =
          detail::cg_segments(ps, kHorizonSteps[std::size_t(h)]);
      rep.per_patient[pid][std::size_t(h)] =
          detail::compute_horizon(ps, segs, h);
      for (metrics::PairedSeries& s : segs)
        pooled_segments.push_back(std::move(s));
    }
    rep.pooled[std::size_t(h)] =
        detail::compute_horizon(all, pooled_segments, h);
  }
  return rep;
}

inline void write_evaluation_csv(const std::filesystem::path& path,
                                 const EvaluationReport& rep) {
  std::string text =
      "scope,patient_id,minutes,n,rmse,mae,pearson_r,pearson_defined,"
      "clarke_a,clarke_b,clarke_c,clarke_d,clarke_e,"
      "tir_ref,tir_pred,tir_deviation,hypo_sensitivity,hyper_sensitivity,"
      "cg_hypo_ap,cg_hypo_be,cg_hypo_ep,cg_eu_ap,cg_eu_be,cg_eu_ep,"
      "cg_hyper_ap,cg_hyper_be,cg_hyper_ep\n";
  const auto row = [&text](const std::string& scope, const std::string& pid,
                           const HorizonMetrics& m) {
    text += scope;
    text += ',';
    text += pid;
    text += ',';
    text += std::to_string(m.minutes);
    text += ',';
    text += std::to_string(m.n);
    text += ',';
    text += detail::fmt_g17(m.rmse);
    text += ',';
    text += detail::fmt_g17(m.mae);
    text += ',';
    if (m.pearson.defined) text += detail::fmt_g17(m.pearson.r);
    text += ',';
    text += m.pearson.defined ? '1' : '0';
    for (int z = 0; z < 5; ++z) {
      text += ',';
      text += detail::fmt_g17(
          m.clarke.zone_percent(static_cast<metrics::ClarkeZone>(z)));
    }
    text += ',';
    text += detail::fmt_g17(m.tir_ref);
    text += ',';
    text += detail::fmt_g17(m.tir_pred);
    text += ',';
    text += detail::fmt_g17(m.tir_deviation);
    text += ',';
    if (m.hypo_sens.defined) text += detail::fmt_g17(m.hypo_sens.percent);
    text += ',';
    if (m.hyper_sens.defined) text += detail::fmt_g17(m.hyper_sens.percent);
    for (metrics::Band b :
         {metrics::Band::hypo, metrics::Band::eu, metrics::Band::hyper}) {
      const auto& br = m.cg.band(b);
      for (int f = 0; f < 3; ++f) {
        text += ',';
        if (br.has_value())
          text += detail::fmt_g17(f == 0 ? br->ap : (f == 1 ? br->be
                                                            : br->ep));
      }
    }
    text += '\n';
  };
  for (int h = 0; h < 3; ++h)
    row("pooled", "", rep.pooled[std::size_t(h)]);
  for (const auto& [pid, arr] : rep.per_patient)
    for (int h = 0; h < 3; ++h) row("patient", pid, arr[std::size_t(h)]);
  detail::write_text_atomic(path, text);
}

// ── run manifest ─────────────────────────────────────────────────────────────
//
// The manifest records what a run produced and how far it got. It is written
// after every completed stage; a stage name is appended only once that
// stage's artifacts are on disk, so a crash leaves a manifest that honestly
// describes the last finished stage. No timestamps, no absolute paths: the
// directory is relocatable and reruns are byte-identical.

inline constexpr const char* kStagePrepare = "prepare";
inline constexpr const char* kStagePretrain = "pretrain";
inline constexpr const char* kStageIndex = "index";
inline constexpr const char* kStageFinetune = "finetune";

struct RunManifest {
  std::string config_hash;
  nlohmann::json config;                        // canonical TrainConfig JSON
  std::map<std::string, std::string> artifacts;  // logical name → relative path
  std::map<std::string, std::string> checksums;  // relative path → sha256
  std::vector<std::string> stages;               // completed, in order

  bool has_stage(const std::string& name) const {
    return std::find(stages.begin(), stages.end(), name) != stages.end();
  }

  nlohmann::json to_json() const {
    return {{"config_hash", config_hash},
            {"config", config},
            {"artifacts", artifacts},
            {"checksums", checksums},
            {"stages", stages}};
  }

  static RunManifest from_json(const nlohmann::json& j) {
    RunManifest m;
    try {
      m.config_hash = j.at("config_hash").get<std::string>();
      m.config = j.at("config");
      m.artifacts =
          j.at("artifacts").get<std::map<std::string, std::string>>();
      m.checksums =
          j.at("checksums").get<std::map<std::string, std::string>>();
      m.stages = j.at("stages").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::parse,
                  std::string("manifest: ") + e.what());
    }
    return m;
  }
};

inline void save_manifest(const std::filesystem::path& dir,
                          const RunManifest& m) {
  detail::write_text_atomic(dir / "manifest.json", m.to_json().dump(2) + "\n");
}

inline RunManifest load_manifest(const std::filesystem::path& dir) {
  const std::filesystem::path path = dir / "manifest.json";
  std::ifstream in(path);
  if (!in)
    throw Error(ErrorKind::missing_artifact,
                "no manifest in " + dir.string() + "; run the train step first");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::parse,
                path.string() + ": " + e.what());
  }
  return RunManifest::from_json(j);
}

// ── normalization statistics persistence ─────────────────────────────────────

inline void save_norms(const std::filesystem::path& path,
                       const std::map<std::string, data::NormStats>& norms,
                       const std::string& config_hash) {
  nlohmann::json patients = nlohmann::json::object();
  for (const auto& [pid, st] : norms)
    patients[pid] = {{"mean", st.mean}, {"stddev", st.stddev}};
  const nlohmann::json j{{"config_hash", config_hash},
                         {"patients", patients}};
  detail::write_text_atomic(path, j.dump(2) + "\n");
}

inline std::map<std::string, data::NormStats> load_norms(
    const std::filesystem::path& path, const std::string& expect_hash) {
  std::ifstream in(path);
  if (!in)
    throw Error(ErrorKind::missing_artifact,
                "normalization statistics not found: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::parse, path.string() + ": " + e.what());
  }
  std::map<std::string, data::NormStats> norms;
  try {
    if (j.at("config_hash").get<std::string>() != expect_hash)
      throw Error(ErrorKind::hash_mismatch,
                  path.string() +
                      " belongs to a different run configuration");
    for (const auto& [pid, st] : j.at("patients").items()) {
      data::NormStats n;
      n.patient_id = pid;
      n.mean = st.at("mean").get<double>();
      n.stddev = st.at("stddev").get<double>();
      n.fitted_on = data::Split::train;
      norms.emplace(pid, n);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::parse, path.string() + ": " + e.what());
  }
  return norms;
}

// ── the full training run ────────────────────────────────────────────────────

inline RunManifest run_training(const TrainConfig& cfg,
                                const std::vector<data::PatientSeries>& raw,
                                const std::filesystem::path& out_dir,
                                const SummaryStore& store) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  RunManifest man;
  man.config_hash = cfg.config_hash();
  man.config = cfg.to_json();

  const CohortData cohort = prepare(raw, cfg);
  const EmbedFn embed = embedder_for(cfg, store);

  const auto record = [&man, &out_dir](const std::string& name,
                                       const std::string& rel) {
    man.artifacts[name] = rel;
    man.checksums[rel] = ckpt::sha256_file(out_dir / rel);
  };

  save_norms(out_dir / "norms.json", cohort.norms, man.config_hash);
  record("norms", "norms.json");
  man.stages.push_back(kStagePrepare);
  save_manifest(out_dir, man);

  model::EncoderModel enc(cfg.effective_encoder(), cfg.seed);
  const std::vector<LossRow> pre_log = pretrain(enc, cohort, embed, cfg);
  write_loss_csv(out_dir / "loss_pretrain.csv", pre_log);
  save_encoder(out_dir / "encoder.ckpt", enc, cfg);
  record("loss_pretrain", "loss_pretrain.csv");
  record("encoder", "encoder.ckpt");
  record("encoder_meta", "encoder.ckpt.json");
  man.stages.push_back(kStagePretrain);
  save_manifest(out_dir, man);

  const std::string enc_sha = man.checksums.at("encoder.ckpt");

  const rag::RetrievalIndex index =
      freeze_and_index(enc, enc_sha, cohort, embed);
  rag::save_index(index, out_dir / "index.bin",
                  {{"config_hash", man.config_hash}});
  record("index", "index.bin");
  record("index_meta", "index.bin.json");
  man.stages.push_back(kStageIndex);
  save_manifest(out_dir, man);

  if (cfg.use_rag) {
    rag::AdapterModel adapter(cfg.effective_adapter(), cfg.seed + 1);
    const std::vector<LossRow> ft_log =
        finetune_adapter(adapter, enc, enc_sha, index, cohort, embed, cfg);
    write_loss_csv(out_dir / "loss_finetune.csv", ft_log);
    save_adapter(out_dir / "adapter.ckpt", adapter, cfg, enc_sha);
    if (ckpt::sha256_file(out_dir / "encoder.ckpt") != enc_sha)
      throw Error(ErrorKind::hash_mismatch,
                  "encoder checkpoint changed during adapter fine-tuning");
    record("loss_finetune", "loss_finetune.csv");
    record("adapter", "adapter.ckpt");
    record("adapter_meta", "adapter.ckpt.json");
    man.stages.push_back(kStageFinetune);
    save_manifest(out_dir, man);
  }
  return man;
}

// ── loading a finished run ───────────────────────────────────────────────────

struct LoadedRun {
  TrainConfig cfg;
  model::EncoderModel encoder;
  std::optional<rag::AdapterModel> adapter;
  std::optional<rag::RetrievalIndex> index;
  std::map<std::string, data::NormStats> norms;
  std::string encoder_sha;
};

inline LoadedRun load_run(const std::filesystem::path& dir) {
  const RunManifest man = load_manifest(dir);
  TrainConfig cfg = TrainConfig::from_json(man.config);
  if (cfg.config_hash() != man.config_hash)
    throw Error(ErrorKind::hash_mismatch,
                "manifest hash does not match its embedded configuration");
  if (!man.has_stage(kStagePretrain))
    throw Error(ErrorKind::missing_artifact,
                "run in " + dir.string() + " has no trained encoder yet");

  model::EncoderModel enc = load_encoder(dir / "encoder.ckpt", cfg);
  const std::string enc_sha = ckpt::sha256_file(dir / "encoder.ckpt");
  const auto recorded = man.checksums.find("encoder.ckpt");
  if (recorded != man.checksums.end() && recorded->second != enc_sha)
    throw Error(ErrorKind::hash_mismatch,
                "encoder checkpoint bytes differ from the manifest record");

  std::map<std::string, data::NormStats> norms =
      load_norms(dir / "norms.json", man.config_hash);

  std::optional<rag::RetrievalIndex> index;
  std::optional<rag::AdapterModel> adapter;
  if (cfg.use_rag) {
    if (!man.has_stage(kStageFinetune))
      throw Error(ErrorKind::missing_artifact,
                  "run in " + dir.string() +
                      " has no fine-tuned adapter yet");
    index.emplace(rag::load_index(dir / "index.bin"));
    index->require_encoder(enc_sha);
    {
      std::ifstream side(dir / "index.bin.json");
      nlohmann::json sj;
      if (side) {
        try {
          side >> sj;
        } catch (const nlohmann::json::exception&) {
          sj = nlohmann::json::object();
        }
      }
      if (sj.value("config_hash", "") != man.config_hash)
        throw Error(ErrorKind::hash_mismatch,
                    "retrieval index belongs to a different run configuration");
    }
    adapter.emplace(load_adapter(dir / "adapter.ckpt", cfg, enc_sha));
  }
  return LoadedRun{std::move(cfg),  std::move(enc),
                   std::move(adapter), std::move(index),
                   std::move(norms), enc_sha};
}

// ── ablation suite ───────────────────────────────────────────────────────────

struct AblationRow {
  std::string label;
  bool use_rag = false;
  bool use_context_attention = false;
  bool use_translation_loss = false;
  std::array<double, 3> rmse{};  // 5 / 30 / 60 min
  std::array<double, 3> mae{};
};

// The five canonical configurations. Each one retrains from scratch in its
// own subdirectory — components interact, so nothing is reused across rows.
inline std::vector<AblationRow> run_ablation_suite(
    const TrainConfig& base, const std::vector<data::PatientSeries>& raw,
    const std::filesystem::path& work_dir, const SummaryStore& store) {
  struct Setting {
    const char* label;
    bool rag, ca, ctl;
  };
  constexpr Setting kSettings[5] = {{"full", true, true, true},
                                    {"rag_ca", true, true, false},
                                    {"rag_ctl", true, false, true},
                                    {"ca_ctl", false, true, true},
                                    {"bgl_only", false, false, false}};
  std::vector<AblationRow> rows;
  rows.reserve(5);
  for (const Setting& s : kSettings) {
    TrainConfig cfg = base;
    cfg.use_rag = s.rag;
    cfg.use_context_attention = s.ca;
    cfg.use_translation_loss = s.ctl;
    const std::filesystem::path dir = work_dir / s.label;
    run_training(cfg, raw, dir, store);
    LoadedRun run = load_run(dir);
    const CohortData cohort = prepare(raw, cfg);
    const EmbedFn embed = embedder_for(cfg, store);
    const std::vector<WindowPrediction> preds =
        predict(run.encoder, run.adapter ? &*run.adapter : nullptr,
                run.index ? &*run.index : nullptr, cohort.test_windows,
                run.norms, embed, cfg);
    const EvaluationReport rep = evaluate(preds, cfg.config_hash());
    AblationRow row;
    row.label = s.label;
    row.use_rag = s.rag;
    row.use_context_attention = s.ca;
    row.use_translation_loss = s.ctl;
    for (std::size_t h = 0; h < 3; ++h) {
      row.rmse[h] = rep.pooled[h].rmse;
      row.mae[h] = rep.pooled[h].mae;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline void write_ablation_csv(const std::filesystem::path& path,
                               const std::vector<AblationRow>& rows) {
  std::string text =
      "label,use_rag,use_context_attention,use_translation_loss,"
      "rmse_5min,mae_5min,rmse_30min,mae_30min,rmse_60min,mae_60min\n";
  for (const AblationRow& r : rows) {
    text += r.label;
    text += ',';
    text += r.use_rag ? '1' : '0';
    text += ',';
    text += r.use_context_attention ? '1' : '0';
    text += ',';
    text += r.use_translation_loss ? '1' : '0';
    for (std::size_t h = 0; h < 3; ++h) {
      text += ',';
      text += detail::fmt_g17(r.rmse[h]);
      text += ',';
      text += detail::fmt_g17(r.mae[h]);
    }
    text += '\n';
  }
  detail::write_text_atomic(path, text);
}

}  // namespace glyrag::train
