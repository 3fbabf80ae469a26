#pragma once

// Retrieval-augmented forecasting: an embedding database built from training
// windows by a frozen encoder, exact cosine top-K lookup, per-neighbor
// cross-attention branches, branch aggregation, and the adapter head that
// maps [z_query ; z_rag] to the 12-step forecast.
//
// Design points relied on elsewhere:
//  * retrieval is an exact linear scan — no approximation — so a full-sort
//    oracle must agree with it on every instance;
//  * ties in similarity break toward the lower insertion index;
//  * each branch attends to exactly one neighbor, so the softmax over the
//    single key is exactly 1 and the query/key projections carry no gradient
//    (the structure still matches the stated attention equations and the
//    general-purpose attention in the tensor library at one head);
//  * neighbor embeddings enter the graph as constants: gradients reach only
//    adapter parameters, never the index or the frozen encoder.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "glyrag/checkpoint.hpp"
#include "glyrag/context.hpp"
#include "glyrag/data.hpp"
#include "glyrag/encoder.hpp"
#include "glyrag/error.hpp"
#include "glyrag/nn.hpp"
#include "glyrag/tensor.hpp"

namespace glyrag::rag {

// ── index ────────────────────────────────────────────────────────────────────

struct IndexEntry {
  std::vector<double> z;                         // [dim] embedding
  std::array<double, data::kHorizonLen> y{};     // normalized future trajectory
  std::string window_ref;                        // "<patient>@<start time>"
  std::string patient_id;
};

struct NeighborSet {
  std::vector<std::size_t> indices;      // into the index, best first
  std::vector<double> similarities;      // non-increasing, ties by index
};

class RetrievalIndex {
 public:
  RetrievalIndex() = default;
  RetrievalIndex(std::size_t dim, std::string encoder_sha)
      : dim_(dim), encoder_sha_(std::move(encoder_sha)) {}

  void add(IndexEntry entry) {
    if (entry.z.size() != dim_)
      throw Error(ErrorKind::validation,
                  "index entry dimension mismatch: got " +
                      std::to_string(entry.z.size()) + ", index is " +
                      std::to_string(dim_));
    double norm_sq = 0.0;
    for (double v : entry.z) {
      if (!std::isfinite(v))
        throw Error(ErrorKind::validation,
                    "index entry contains a non-finite value: " +
                        entry.window_ref);
      norm_sq += v * v;
    }
    if (norm_sq == 0.0)
      throw Error(ErrorKind::validation,
                  "zero embedding cannot be indexed (cosine undefined): " +
                      entry.window_ref);
    norms_.push_back(std::sqrt(norm_sq));
    entries_.push_back(std::move(entry));
  }

  std::size_t size() const { return entries_.size(); }
  std::size_t dim() const { return dim_; }
  const std::string& encoder_sha() const { return encoder_sha_; }
  const IndexEntry& entry(std::size_t i) const { return entries_.at(i); }
  const std::vector<IndexEntry>& entries() const { return entries_; }

  // Refuse queries against an index built by a different encoder.
  void require_encoder(const std::string& sha) const {
    if (sha != encoder_sha_)
      throw Error(ErrorKind::hash_mismatch,
                  "index was built by encoder " + encoder_sha_ +
                      " but the loaded encoder is " + sha);
  }

  struct QueryOptions {
    std::string exclude_ref;         // drop entries with this window_ref
    std::string exclude_patient;     // drop entries from this patient
  };

  // Exact scan. Results sorted by descending cosine similarity; equal
  // similarities keep the lower insertion index first.
  NeighborSet query_top_k(const std::vector<double>& z_query, std::size_t k,
                          const QueryOptions& opt = {}) const {
    if (entries_.empty())
      throw Error(ErrorKind::validation, "cannot query an empty index");
    if (z_query.size() != dim_)
      throw Error(ErrorKind::validation, "query dimension mismatch");
    double qn_sq = 0.0;
    for (double v : z_query) qn_sq += v * v;
    if (qn_sq == 0.0)
      throw Error(ErrorKind::validation,
                  "zero query vector (cosine undefined)");
    const double qn = std::sqrt(qn_sq);

    std::vector<std::pair<double, std::size_t>> scored;
    scored.reserve(entries_.size());
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const IndexEntry& e = entries_[i];
      if (!opt.exclude_ref.empty() && e.window_ref == opt.exclude_ref)
        continue;
      if (!opt.exclude_patient.empty() && e.patient_id == opt.exclude_patient)
        continue;
      const double dot = std::inner_product(e.z.begin(), e.z.end(),
                                            z_query.begin(), 0.0);
      scored.emplace_back(dot / (norms_[i] * qn), i);
    }
    const std::size_t take = std::min(k, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + take, scored.end(),
                      [](const auto& a, const auto& b) {
                        if (a.first != b.first) return a.first > b.first;
                        return a.second < b.second;
                      });
    NeighborSet out;
    out.indices.reserve(take);
    out.similarities.reserve(take);
    for (std::size_t i = 0; i < take; ++i) {
      out.similarities.push_back(scored[i].first);
      out.indices.push_back(scored[i].second);
    }
    return out;
  }

 private:
  std::size_t dim_ = 0;
  std::string encoder_sha_;
  std::vector<IndexEntry> entries_;
  std::vector<double> norms_;

  friend void save_index(const RetrievalIndex&, const std::filesystem::path&,
                         const nlohmann::json&);
  friend RetrievalIndex load_index(const std::filesystem::path&);
};

// Builds one entry per training window, in window order, using the frozen
// encoder in eval mode. Each window is normalized by its own patient's
// statistics; `embed_summary` maps a window to its 768-wide raw text
// embedding (the caller owns the summary store).
inline RetrievalIndex build_index(
    model::EncoderModel& encoder, const std::string& encoder_sha,
    const std::map<std::string, data::NormStats>& norms,
    const std::vector<data::CgmWindow>& windows,
    const std::function<std::array<double, context::kTextDim>(
        const data::CgmWindow&)>& embed_summary) {
  encoder.set_training(false);
  RetrievalIndex index(encoder.config().d_model, encoder_sha);
  for (const data::CgmWindow& w : windows) {
    if (w.split != data::Split::train)
      throw Error(ErrorKind::validation,
                  "retrieval database must be built from training windows "
                  "only; got a non-train window " +
                      context::window_ref(w));
    const auto norm_it = norms.find(w.patient_id);
    if (norm_it == norms.end())
      throw Error(ErrorKind::validation,
                  "no normalization statistics for patient " + w.patient_id);
    const data::NormStats& norm = norm_it->second;
    Tape tape;
    model::ForwardResult r =
        encoder.encode(tape, data::normalize(w.x, norm), embed_summary(w));
    IndexEntry e;
    e.z = r.z.values();
    const std::vector<double> y_norm = data::normalize(w.trajectory, norm);
    std::copy(y_norm.begin(), y_norm.end(), e.y.begin());
    e.window_ref = context::window_ref(w);
    e.patient_id = w.patient_id;
    index.add(std::move(e));
  }
  return index;
}

// ── persistence ──────────────────────────────────────────────────────────────
//
// Binary: magic "GLYINDX1", count, dim, horizon, count*dim embedding doubles,
// count*horizon target doubles. Sidecar "<path>.json": window refs, patient
// ids, and the encoder checkpoint hash.

inline constexpr char kIndexMagic[8] = {'G', 'L', 'Y', 'I', 'N', 'D', 'X', '1'};

inline void save_index(const RetrievalIndex& index,
                       const std::filesystem::path& path,
                       const nlohmann::json& extra_meta) {
  ckpt::detail::assert_little_endian();
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot open " + path.string());
  out.write(kIndexMagic, sizeof(kIndexMagic));
  ckpt::detail::write_u64(out, index.entries_.size());
  ckpt::detail::write_u64(out, index.dim_);
  ckpt::detail::write_u64(out, data::kHorizonLen);
  for (const IndexEntry& e : index.entries_) ckpt::detail::write_f64s(out, e.z);
  for (const IndexEntry& e : index.entries_) {
    std::vector<double> y(e.y.begin(), e.y.end());
    ckpt::detail::write_f64s(out, y);
  }
  out.close();
  if (!out) throw Error(ErrorKind::io, "write failed for " + path.string());

  nlohmann::json side = extra_meta.is_object() ? extra_meta
                                               : nlohmann::json::object();
  side["encoder_checkpoint_sha256"] = index.encoder_sha_;
  side["count"] = index.entries_.size();
  side["dim"] = index.dim_;
  auto& refs = side["window_refs"] = nlohmann::json::array();
  auto& pats = side["patient_ids"] = nlohmann::json::array();
  for (const IndexEntry& e : index.entries_) {
    refs.push_back(e.window_ref);
    pats.push_back(e.patient_id);
  }
  std::ofstream js(ckpt::sidecar_path(path), std::ios::binary | std::ios::trunc);
  js << side.dump(2) << "\n";
  js.close();
  if (!js)
    throw Error(ErrorKind::io,
                "write failed for " + ckpt::sidecar_path(path).string());
}

inline void save_index(const RetrievalIndex& index,
                       const std::filesystem::path& path) {
  save_index(index, path, nlohmann::json::object());
}

inline RetrievalIndex load_index(const std::filesystem::path& path) {
  ckpt::detail::assert_little_endian();
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw Error(ErrorKind::missing_artifact,
                "index not found: " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kIndexMagic, sizeof(kIndexMagic)) != 0)
    throw Error(ErrorKind::parse, "not an index file: " + path.string());
  const std::uint64_t count = ckpt::detail::read_u64(in);
  const std::uint64_t dim = ckpt::detail::read_u64(in);
  const std::uint64_t horizon = ckpt::detail::read_u64(in);
  if (horizon != data::kHorizonLen)
    throw Error(ErrorKind::parse,
                "index horizon " + std::to_string(horizon) +
                    " does not match the pipeline horizon " +
                    std::to_string(data::kHorizonLen));

  nlohmann::json side;
  {
    std::ifstream js(ckpt::sidecar_path(path), std::ios::binary);
    if (!js)
      throw Error(ErrorKind::missing_artifact,
                  "index sidecar missing: " + ckpt::sidecar_path(path).string());
    try {
      js >> side;
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::parse, "corrupt index sidecar: " +
                                        std::string(e.what()));
    }
  }
  const auto& refs = side.at("window_refs");
  const auto& pats = side.at("patient_ids");
  if (refs.size() != count || pats.size() != count)
    throw Error(ErrorKind::parse,
                "index sidecar row count does not match the binary file");

  RetrievalIndex index(dim,
                       side.at("encoder_checkpoint_sha256").get<std::string>());
  std::vector<std::vector<double>> zs(count, std::vector<double>(dim));
  for (auto& z : zs) ckpt::detail::read_f64s(in, z);
  std::vector<std::vector<double>> ys(count,
                                      std::vector<double>(data::kHorizonLen));
  for (auto& y : ys) ckpt::detail::read_f64s(in, y);
  for (std::uint64_t i = 0; i < count; ++i) {
    IndexEntry e;
    e.z = std::move(zs[i]);
    std::copy(ys[i].begin(), ys[i].end(), e.y.begin());
    e.window_ref = refs[i].get<std::string>();
    e.patient_id = pats[i].get<std::string>();
    index.add(std::move(e));
  }
  return index;
}

// ── adapter ──────────────────────────────────────────────────────────────────

enum class Aggregation { mean, softmax_weights, lstm };

inline const char* to_string(Aggregation a) {
  switch (a) {
    case Aggregation::mean: return "mean";
    case Aggregation::softmax_weights: return "softmax_weights";
    case Aggregation::lstm: return "lstm";
  }
  return "?";
}

inline Aggregation aggregation_from_string(const std::string& s) {
  if (s == "mean") return Aggregation::mean;
  if (s == "softmax_weights") return Aggregation::softmax_weights;
  if (s == "lstm") return Aggregation::lstm;
  throw Error(ErrorKind::config, "unknown aggregation mode: " + s);
}

struct AdapterConfig {
  std::size_t d_model = 512;
  std::size_t k = 3;        // retrieval depth = branch count
  std::size_t heads = 4;    // attention heads per branch
  Aggregation aggregation = Aggregation::mean;
  std::size_t lstm_hidden = 256;  // lstm aggregation only
  std::size_t hidden1 = 512;      // head network
  std::size_t hidden2 = 256;

  void validate() const {
    if (d_model == 0 || k == 0 || heads == 0)
      throw Error(ErrorKind::config, "adapter dimensions must be positive");
    if (hidden1 == 0 || hidden2 == 0 || lstm_hidden == 0)
      throw Error(ErrorKind::config, "adapter head sizes must be positive");
  }

  nlohmann::json to_json() const {
    return {{"d_model", d_model},
            {"k", k},
            {"heads", heads},
            {"aggregation", to_string(aggregation)},
            {"lstm_hidden", lstm_hidden},
            {"hidden1", hidden1},
            {"hidden2", hidden2}};
  }

  static AdapterConfig from_json(const nlohmann::json& j) {
    AdapterConfig c;
    c.d_model = j.at("d_model").get<std::size_t>();
    c.k = j.at("k").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.aggregation = aggregation_from_string(j.at("aggregation").get<std::string>());
    c.lstm_hidden = j.at("lstm_hidden").get<std::size_t>();
    c.hidden1 = j.at("hidden1").get<std::size_t>();
    c.hidden2 = j.at("hidden2").get<std::size_t>();
    c.validate();
    return c;
  }
};

class AdapterModel {
 public:
  AdapterModel(const AdapterConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const std::size_t d = cfg_.d_model;
    for (std::size_t i = 0; i < cfg_.k; ++i) {
      Branch b;
      const std::string bs = "branch" + std::to_string(i);
      for (std::size_t h = 0; h < cfg_.heads; ++h) {
        const std::string hs = std::to_string(h);
        b.w_q.push_back(params_.add(bs + ".q" + hs, init_weight(d, d, d, rng)));
        b.w_k.push_back(params_.add(bs + ".k" + hs, init_weight(d, d, d, rng)));
        b.w_v.push_back(params_.add(bs + ".v" + hs, init_weight(d, d, d, rng)));
      }
      b.w_h = params_.add(bs + ".wh",
                          init_weight(cfg_.heads * d, cfg_.heads * d, d, rng));
      branches_.push_back(b);
    }
    if (cfg_.aggregation == Aggregation::softmax_weights) {
      agg_weights_ = params_.add("agg.weights", Tensor(1, cfg_.k));
    } else if (cfg_.aggregation == Aggregation::lstm) {
      agg_lstm_ = LstmParams::init(params_, "agg.lstm", d, cfg_.lstm_hidden, 1, rng);
      agg_proj_w_ = params_.add("agg.proj.w",
                                init_weight(cfg_.lstm_hidden, cfg_.lstm_hidden, d, rng));
      agg_proj_b_ = params_.add("agg.proj.b", Tensor(1, d));
    }
    head_ = MlpParams::init(
        params_, "head",
        {2 * d, cfg_.hidden1, cfg_.hidden2, data::kHorizonLen}, rng);
  }

  const AdapterConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // One cross-attention branch: the query attends to a single neighbor. With
  // one key the softmax weight is exactly 1, so the output reduces to the
  // concatenated value projections of the neighbor; the computation is still
  // written as attention so it matches the general attention op exactly.
  Tensor cross_attention_branch(Tape& tape, const Tensor& z_query,
                                const Tensor& z_j, std::size_t branch) const {
    const Branch& b = branches_.at(branch);
    const double inv_scale =
        1.0 / std::sqrt(static_cast<double>(cfg_.d_model));
    std::vector<Tensor> heads;
    heads.reserve(cfg_.heads);
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
      Tensor q = matmul(tape, z_query, b.w_q[h]);
      Tensor k = matmul(tape, z_j, b.w_k[h]);
      Tensor v = matmul(tape, z_j, b.w_v[h]);
      Tensor scores = scale(tape, matmul(tape, q, transpose(tape, k)), inv_scale);
      Tensor attn = softmax_rows(tape, scores);  // [1,1] == 1 exactly
      heads.push_back(matmul(tape, attn, v));
    }
    return matmul(tape, concat_cols(tape, heads), b.w_h);
  }

  // Aggregate branch outputs (best neighbor first) into z_rag.
  Tensor aggregate(Tape& tape, const std::vector<Tensor>& branch_outputs) const {
    if (branch_outputs.empty())
      throw Error(ErrorKind::validation, "aggregate: no branches");
    switch (cfg_.aggregation) {
      case Aggregation::mean:
        return mean_rows(tape, concat_rows(tape, branch_outputs));
      case Aggregation::softmax_weights: {
        Tensor w = softmax_rows(tape, agg_weights_);  // [1, K]
        Tensor acc;
        for (std::size_t i = 0; i < branch_outputs.size(); ++i) {
          Tensor wi = slice_cols_scalar(tape, w, i);
          Tensor term = mul_broadcast_scalar(tape, branch_outputs[i], wi);
          acc = (i == 0) ? term : add(tape, acc, term);
        }
        return acc;
      }
      case Aggregation::lstm: {
        Tensor seq = concat_rows(tape, branch_outputs);
        LstmResult r = lstm_forward(tape, seq, agg_lstm_);
        return linear(tape, r.last_hidden, agg_proj_w_, agg_proj_b_);
      }
    }
    throw Error(ErrorKind::validation, "aggregate: unreachable");
  }

  // Full adapter pass given the query embedding and its neighbors.
  Tensor forecast(Tape& tape, const Tensor& z_query,
                  const std::vector<Tensor>& neighbor_zs) const {
    if (neighbor_zs.empty())
      throw Error(ErrorKind::validation, "adapter forecast needs neighbors");
    if (neighbor_zs.size() > branches_.size())
      throw Error(ErrorKind::validation,
                  "more neighbors than adapter branches: " +
                      std::to_string(neighbor_zs.size()) + " > " +
                      std::to_string(branches_.size()));
    std::vector<Tensor> outs;
    outs.reserve(neighbor_zs.size());
    for (std::size_t i = 0; i < neighbor_zs.size(); ++i)
      outs.push_back(cross_attention_branch(tape, z_query, neighbor_zs[i], i));
    Tensor z_rag = aggregate(tape, outs);
    Tensor joint = concat_cols(tape, {z_query, z_rag});
    return mlp_forward(tape, joint, head_);
  }

 private:
  struct Branch {
    std::vector<Tensor> w_q, w_k, w_v;  // heads × [d, d]
    Tensor w_h;                         // [heads*d, d]
  };

  // w[0, i] of a [1, K] tensor as a [1, 1] tensor.
  static Tensor slice_cols_scalar(Tape& tape, const Tensor& w, std::size_t i) {
    return slice_rows(tape, transpose(tape, w), i, i + 1);
  }

  // x * s where s is [1,1]: implemented as matmul(s, x) since s is scalar.
  static Tensor mul_broadcast_scalar(Tape& tape, const Tensor& x,
                                     const Tensor& s) {
    return matmul(tape, s, x);  // [1,1] x [1,d] -> [1,d]
  }

  AdapterConfig cfg_;
  ParamStore params_;
  std::vector<Branch> branches_;
  Tensor agg_weights_;
  LstmParams agg_lstm_;
  Tensor agg_proj_w_, agg_proj_b_;
  MlpParams head_;
};

// Wraps index rows as constant tensors for the adapter.
inline std::vector<Tensor> neighbor_tensors(const RetrievalIndex& index,
                                            const NeighborSet& neighbors) {
  std::vector<Tensor> out;
  out.reserve(neighbors.indices.size());
  for (std::size_t idx : neighbors.indices) {
    const IndexEntry& e = index.entry(idx);
    Tensor t(1, e.z.size());
    t.values() = e.z;
    out.push_back(t);
  }
  return out;
}

}  // namespace glyrag::rag
