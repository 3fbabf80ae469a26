#pragma once

// Context agent: turns a glucose window plus its therapy summary into a short
// qualitative text, and turns text into a fixed-width embedding.
//
// Three layers live here:
//  1. build_prompt      — the exact chat prompt sent to a remote language model
//                         (one deterministic string; see to_chat_messages for
//                         the system/user split used on the wire).
//  2. summarize_rule_based — a deterministic decision-table summarizer used as
//                         the default backend and as the fallback when the
//                         remote service is unavailable. Its output is purely
//                         qualitative: no digits ever appear in the text.
//  3. embed_text        — deterministic hashed bag-of-words embedding into 768
//                         dimensions with unit Euclidean norm (stand-in for a
//                         pretrained sentence encoder; a remote embedding
//                         backend can replace it without touching callers).
//
// Summaries are stored content-addressed by the SHA-256 of the prompt, so any
// window whose features produce the same prompt shares one cached summary and
// reruns are byte-identical.

#include <algorithm>
#include <array>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "glyrag/data.hpp"
#include "glyrag/error.hpp"
#include "glyrag/hash.hpp"

namespace glyrag::context {

using data::CgmWindow;
using data::Trend;
using data::WindowSummaryFeatures;

inline constexpr std::size_t kTextDim = 768;

enum class Backend { rule_based, remote };

inline const char* to_string(Backend b) {
  return b == Backend::rule_based ? "rule_based" : "remote";
}

inline Backend backend_from_string(const std::string& s) {
  if (s == "rule_based") return Backend::rule_based;
  if (s == "remote") return Backend::remote;
  throw Error(ErrorKind::parse, "unknown summary backend: " + s);
}

struct ContextSummary {
  std::string window_ref;  // "<patient>@<iso start time>", filled by callers
  std::string text;
  Backend backend = Backend::rule_based;
  std::size_t sentence_count = 0;
};

inline std::string window_ref(const CgmWindow& w) {
  return w.patient_id + "@" + data::format_timestamp(w.start_time);
}

inline std::size_t count_sentences(const std::string& text) {
  std::size_t n = 0;
  for (char c : text)
    if (c == '.') ++n;
  return n;
}

// ── prompt construction ──────────────────────────────────────────────────────

namespace detail {

inline std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

}  // namespace detail

// Builds the full chat prompt as one deterministic string. Sections are
// separated by blank lines and carry stable labels; to_chat_messages splits
// the first section off as the system message.
inline std::string build_prompt(const WindowSummaryFeatures& f,
                                const std::array<double, data::kInputLen>& x) {
  std::ostringstream out;
  out << "System Role: You are a medical assistant specializing in diabetes "
         "management and glucose monitoring. Your job is to analyze "
         "time-series glucose data along with carbohydrate intake and insulin "
         "delivery information to predict future trends and assist in "
         "managing the patient's blood sugar levels.";
  out << "\n\n";
  out << "User Task: Your task is to analyze glucose level readings recorded "
         "at 5-minute intervals over the last 3 hours, along with associated "
         "carbohydrate intake and insulin administration data.";
  out << "\n\n";
  out << "Data Summary in last 30 minutes: "
      << "Carbohydrate Intake: " << detail::fmt("%.1f", f.carbs_30min) << " g, "
      << "Total Insulin Bolus: " << detail::fmt("%.2f", f.bolus_total_30min)
      << " U, "
      << "Food Bolus: " << detail::fmt("%.2f", f.bolus_food_30min) << " U, "
      << "Correction Bolus: " << detail::fmt("%.2f", f.bolus_correction_30min)
      << " U, "
      << "Other Bolus: " << detail::fmt("%.2f", f.bolus_other_30min) << " U, "
      << "Current BGL: " << detail::fmt("%.1f", f.current_bgl) << " mg/dL, "
      << "Time In Range: " << detail::fmt("%.1f", f.tir_window_pct) << "%, "
      << "Trend: " << data::to_string(f.trend);
  out << "\n\n";
  out << "Historical CGM values: ";
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (i > 0) out << '|';
    out << detail::fmt("%.1f", x[i]);
  }
  out << "\n\n";
  out << "Output Requirements: Based on this comprehensive data including "
         "glucose readings, carbohydrate intake, and insulin delivery "
         "patterns, write a concise medical summary that analyzes the "
         "patient's blood sugar trends and forecasts the likely trend for the "
         "next 60 minutes (twelve readings). Your report should be limited to "
         "five sentences, describing: Past glucose trends, The impact of "
         "recent carbohydrate intake and insulin administration, Predicted "
         "future direction (likely to rise, fall, or stabilize), Potential "
         "health impacts (risk of hypoglycemia or hyperglycemia), Brief "
         "consideration of insulin-on-board and carbohydrate effects. Use "
         "qualitative descriptions rather than exact numerical values in the "
         "summary.";
  return out.str();
}

struct ChatMessages {
  std::string system;
  std::string user;
};

// Splits a build_prompt string into the two-message chat shape used on the
// wire: the "System Role:" paragraph (label stripped) becomes the system
// message, everything after it the user message.
inline ChatMessages to_chat_messages(const std::string& prompt) {
  const std::string label = "System Role: ";
  const auto brk = prompt.find("\n\n");
  if (prompt.rfind(label, 0) != 0 || brk == std::string::npos)
    throw Error(ErrorKind::validation, "prompt lacks a system-role section");
  return {prompt.substr(label.size(), brk - label.size()),
          prompt.substr(brk + 2)};
}

// ── rule-based summarizer ────────────────────────────────────────────────────

namespace detail {

enum class SlopeBand { gradual, moderate, rapid };

// Largest single-step rate of change across the window, mg/dL per minute.
inline SlopeBand slope_band(const std::array<double, data::kInputLen>& x) {
  double max_rate = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i)
    max_rate = std::max(max_rate, std::abs(x[i] - x[i - 1]) / 5.0);
  if (max_rate < 1.0) return SlopeBand::gradual;
  if (max_rate < 2.0) return SlopeBand::moderate;
  return SlopeBand::rapid;
}

}  // namespace detail

// Deterministic five-slot summary. Sentences: past trend; therapy impact
// (omitted when no therapy); predicted direction; risk; insulin-on-board note
// (omitted when no therapy). The text never contains digits, matching the
// qualitative-only requirement the prompt imposes on the remote backend.
inline ContextSummary summarize_rule_based(
    const WindowSummaryFeatures& f,
    const std::array<double, data::kInputLen>& x) {
  const bool has_carbs = f.carbs_30min > 0.0;
  const bool has_bolus = f.bolus_total_30min > 0.0;
  const bool has_therapy = has_carbs || has_bolus;
  const detail::SlopeBand band = detail::slope_band(x);

  std::vector<std::string> sentences;

  {  // 1: past trend, shaded by how steep the steepest move was
    const char* pace = band == detail::SlopeBand::gradual ? "gradually"
                       : band == detail::SlopeBand::moderate
                           ? "at a moderate pace"
                           : "rapidly";
    switch (f.trend) {
      case Trend::rising:
        sentences.push_back(std::string("Glucose has been rising ") + pace +
                            " over the past three hours.");
        break;
      case Trend::falling:
        sentences.push_back(std::string("Glucose has been falling ") + pace +
                            " over the past three hours.");
        break;
      case Trend::stable:
        if (band == detail::SlopeBand::gradual)
          sentences.push_back(
              "Glucose has been stable over the past three hours.");
        else if (band == detail::SlopeBand::moderate)
          sentences.push_back(
              "Glucose has been broadly stable with some fluctuation over the "
              "past three hours.");
        else
          sentences.push_back(
              "Glucose has been volatile around a stable overall level over "
              "the past three hours.");
        break;
    }
  }

  if (has_therapy) {  // 2: therapy impact
    if (has_carbs && has_bolus)
      sentences.push_back(
          "Recent carbohydrate intake and insulin boluses are both active and "
          "will shape the coming hour.");
    else if (has_carbs)
      sentences.push_back(
          "Recent carbohydrate intake is still being absorbed and no insulin "
          "bolus has been given.");
    else
      sentences.push_back(
          "An insulin bolus was delivered recently without accompanying "
          "carbohydrate intake.");
  }

  {  // 3: predicted direction
    switch (f.trend) {
      case Trend::rising:
        if (has_bolus)
          sentences.push_back(
              "Levels are likely to level off and then decline as the insulin "
              "takes effect.");
        else if (has_carbs)
          sentences.push_back(
              "Levels are likely to keep rising while the carbohydrate intake "
              "is absorbed.");
        else
          sentences.push_back(
              "Levels are likely to continue rising in the near term.");
        break;
      case Trend::falling:
        if (has_carbs)
          sentences.push_back(
              "Levels are likely to level off as the carbohydrate intake "
              "counters the decline.");
        else if (has_bolus)
          sentences.push_back(
              "Levels are likely to continue falling while the insulin "
              "remains active.");
        else
          sentences.push_back(
              "Levels are likely to continue falling in the near term.");
        break;
      case Trend::stable:
        if (has_carbs && has_bolus)
          sentences.push_back(
              "Levels are likely to remain steady while the meal and the "
              "bolus offset each other.");
        else if (has_carbs)
          sentences.push_back(
              "Levels are likely to drift upward as the carbohydrate intake "
              "is absorbed.");
        else if (has_bolus)
          sentences.push_back(
              "Levels are likely to drift lower as the insulin acts.");
        else
          sentences.push_back(
              "Levels are likely to remain steady over the next hour.");
        break;
    }
  }

  {  // 4: risk
    if (f.current_bgl < 90.0 && f.trend == Trend::falling)
      sentences.push_back(
          "There is an elevated risk of hypoglycemia if the decline "
          "continues.");
    else if (f.current_bgl > 200.0 && f.trend == Trend::rising)
      sentences.push_back(
          "There is a risk of hyperglycemia if the climb continues.");
    else
      sentences.push_back(
          "The immediate risk of hypoglycemia or hyperglycemia appears low.");
  }

  if (has_therapy)  // 5: insulin-on-board note
    sentences.push_back(
        "Insulin on board and remaining carbohydrate effects should be "
        "weighed before any further dosing.");

  ContextSummary s;
  s.backend = Backend::rule_based;
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    if (i > 0) s.text += ' ';
    s.text += sentences[i];
  }
  s.sentence_count = sentences.size();
  return s;
}

// ── deterministic text embedding ─────────────────────────────────────────────

// Hashed bag-of-words: lowercase, split on non-alphanumerics, FNV-1a each
// token into one of 768 buckets with a sign drawn from an independent second
// hash, accumulate, normalize to unit Euclidean norm.
inline std::array<double, kTextDim> embed_text(const std::string& text) {
  if (text.empty())
    throw Error(ErrorKind::validation, "cannot embed empty text");
  std::array<double, kTextDim> acc{};
  std::string token;
  std::size_t n_tokens = 0;
  auto flush = [&] {
    if (token.empty()) return;
    const std::uint64_t h = hash::fnv1a64(token);
    const std::size_t bucket = static_cast<std::size_t>(h % kTextDim);
    const double sign = (hash::splitmix64(h) & 1ull) ? 1.0 : -1.0;
    acc[bucket] += sign;
    ++n_tokens;
    token.clear();
  };
  for (char c : text) {
    const unsigned char u = static_cast<unsigned char>(c);
    if (std::isalnum(u))
      token.push_back(static_cast<char>(std::tolower(u)));
    else
      flush();
  }
  flush();
  if (n_tokens == 0)
    throw Error(ErrorKind::validation, "text has no alphanumeric tokens");
  double norm_sq = 0.0;
  for (double v : acc) norm_sq += v * v;
  if (norm_sq < 1e-24)
    throw Error(ErrorKind::validation,
                "text embedding degenerate: all buckets cancelled");
  const double inv = 1.0 / std::sqrt(norm_sq);
  for (double& v : acc) v *= inv;
  return acc;
}

// ── content-addressed summary store ──────────────────────────────────────────

// Summaries are cached one file per distinct prompt:
//   <dir>/<first 16 hex of sha256(prompt)>.json
// holding {"prompt_hash": full hash, "backend": ..., "text": ...}. Writes go
// through a temp file and an atomic rename so concurrent writers can race
// safely (identical keys imply identical content).

namespace detail {

// Unique temp path next to the target, so the final rename is atomic and
// same-filesystem. Concurrent writers get distinct temp names.
inline std::filesystem::path temp_sibling(const std::filesystem::path& target) {
  static std::atomic<std::uint64_t> counter{0};
  return target.string() + ".tmp" + std::to_string(counter.fetch_add(1));
}

}  // namespace detail

// Run `work(i)` for i in [0, n) on at most `parallelism` threads. The first
// exception (if any) stops the dispatch and is rethrown after all workers
// finish. With one worker the indices run in order.
inline void for_each_bounded(std::size_t n, int parallelism,
                             const std::function<void(std::size_t)>& work) {
  if (parallelism < 1)
    throw Error(ErrorKind::config, "parallelism must be at least 1");
  if (n == 0) return;
  const std::size_t workers =
      std::min<std::size_t>(static_cast<std::size_t>(parallelism), n);
  std::mutex mu;
  std::size_t next = 0;
  std::exception_ptr first_error;
  auto run = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= n || first_error) return;
        i = next++;
      }
      try {
        work(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run);
  for (std::thread& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

inline std::string prompt_key(const std::string& prompt) {
  return hash::sha256_hex(prompt).substr(0, 16);
}

inline std::filesystem::path summary_path(const std::filesystem::path& dir,
                                          const std::string& prompt) {
  return dir / (prompt_key(prompt) + ".json");
}

inline void save_summary(const std::filesystem::path& dir,
                         const std::string& prompt, const ContextSummary& s) {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["prompt_hash"] = hash::sha256_hex(prompt);
  j["backend"] = to_string(s.backend);
  j["text"] = s.text;
  const auto target = summary_path(dir, prompt);
  const auto tmp = detail::temp_sibling(target);
  std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
  out << j.dump(2) << "\n";
  out.close();
  if (!out) throw Error(ErrorKind::io, "failed to write " + tmp.string());
  std::filesystem::rename(tmp, target);
}

inline std::optional<ContextSummary> load_summary(
    const std::filesystem::path& dir, const std::string& prompt) {
  const auto path = summary_path(dir, prompt);
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::parse,
                "corrupt summary file " + path.string() + ": " + e.what());
  }
  const std::string stored_hash = j.at("prompt_hash").get<std::string>();
  if (stored_hash != hash::sha256_hex(prompt))
    throw Error(ErrorKind::hash_mismatch,
                "summary file " + path.string() +
                    " does not match the prompt that addressed it");
  ContextSummary s;
  s.backend = backend_from_string(j.at("backend").get<std::string>());
  s.text = j.at("text").get<std::string>();
  s.sentence_count = count_sentences(s.text);
  return s;
}

}  // namespace glyrag::context
