#pragma once

// Remote text backends: a chat endpoint that writes the window summary and an
// embedding endpoint that encodes text, both with bounded retries, exponential
// backoff, an on-disk response cache (atomic write-then-rename, keyed by a
// content hash), and a configurable fallback to the deterministic local path.
// The cache makes remote runs reproducible and lets everything replay offline.

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "glyrag/context.hpp"
#include "glyrag/data.hpp"
#include "glyrag/error.hpp"
#include "glyrag/hash.hpp"

namespace glyrag::remote {

struct RemoteConfig {
  std::string chat_url;                      // e.g. http://host:8080/v1/chat
  std::string embed_url;                     // empty disables remote embedding
  std::string model = "glyrag-context";      // model field of the chat body
  std::string auth_env = "GLYRAG_API_TOKEN"; // env var holding a bearer token
  int max_attempts = 3;
  double backoff_base_s = 0.5;               // delay doubles per retry
  bool fail_hard = false;                    // throw instead of falling back
  std::filesystem::path cache_dir = "cache";
  int parallelism = 4;                       // bounded request concurrency
  double timeout_s = 10.0;

  void validate() const {
    if (max_attempts < 1)
      throw Error(ErrorKind::config, "max_attempts must be at least 1");
    if (backoff_base_s < 0.0)
      throw Error(ErrorKind::config, "backoff_base_s must be non-negative");
    if (parallelism < 1)
      throw Error(ErrorKind::config, "parallelism must be at least 1");
  }

  nlohmann::json to_json() const {
    return {{"chat_url", chat_url},       {"embed_url", embed_url},
            {"model", model},             {"auth_env", auth_env},
            {"max_attempts", max_attempts},
            {"backoff_base_s", backoff_base_s},
            {"fail_hard", fail_hard},
            {"cache_dir", cache_dir.string()},
            {"parallelism", parallelism}, {"timeout_s", timeout_s}};
  }
};

namespace detail {

// Split an http URL into the client base and the request path.
inline std::pair<std::string, std::string> split_url(const std::string& url) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos)
    throw Error(ErrorKind::config, "URL needs a scheme: " + url);
  const auto path_start = url.find('/', scheme + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

inline httplib::Headers auth_headers(const RemoteConfig& cfg) {
  httplib::Headers h;
  if (!cfg.auth_env.empty()) {
    if (const char* tok = std::getenv(cfg.auth_env.c_str()); tok && *tok)
      h.emplace("Authorization", std::string("Bearer ") + tok);
  }
  return h;
}

// POST with retries; returns the body on HTTP 200, nullopt when every attempt
// failed (connection error, non-200, or retriable transport fault).
inline std::optional<std::string> post_with_retries(const RemoteConfig& cfg,
                                                    const std::string& url,
                                                    const std::string& body) {
  const auto [base, path] = split_url(url);
  for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    if (attempt > 0) {
      const double delay = cfg.backoff_base_s * double(1 << (attempt - 1));
      std::this_thread::sleep_for(std::chrono::duration<double>(delay));
    }
    httplib::Client client(base);
    client.set_connection_timeout(std::chrono::duration<double>(cfg.timeout_s));
    client.set_read_timeout(std::chrono::duration<double>(cfg.timeout_s));
    client.set_default_headers(auth_headers(cfg));
    httplib::Result res = client.Post(path, body, "application/json");
    if (res && res->status == 200) return res->body;
  }
  return std::nullopt;
}

}  // namespace detail

// ── chat summaries ───────────────────────────────────────────────────────────

// Ask the chat endpoint for a summary of this prompt. Consults the on-disk
// cache first; a fresh answer is cached before returning. Throws an error of
// kind `remote` once every attempt has failed — fallback policy lives in
// summarize_with_fallback.
inline context::ContextSummary summarize_remote(const std::string& prompt,
                                                const RemoteConfig& cfg) {
  cfg.validate();
  if (cfg.chat_url.empty())
    throw Error(ErrorKind::config, "no chat endpoint configured");
  if (auto cached = context::load_summary(cfg.cache_dir, prompt))
    return *cached;

  context::ChatMessages messages = context::to_chat_messages(prompt);
  const nlohmann::json body = {
      {"model", cfg.model},
      {"messages",
       {{{"role", "system"}, {"content", messages.system}},
        {{"role", "user"}, {"content", messages.user}}}}};
  const std::optional<std::string> response =
      detail::post_with_retries(cfg, cfg.chat_url, body.dump());
  if (!response)
    throw Error(ErrorKind::remote,
                "chat endpoint failed after " +
                    std::to_string(cfg.max_attempts) + " attempts: " +
                    cfg.chat_url);
  std::string text;
  try {
    const nlohmann::json j = nlohmann::json::parse(*response);
    text = j.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::remote,
                "malformed chat response: " + std::string(e.what()));
  }
  if (text.empty())
    throw Error(ErrorKind::remote, "chat endpoint returned an empty summary");

  context::ContextSummary summary;
  summary.text = text;
  summary.backend = context::Backend::remote;
  summary.sentence_count = context::count_sentences(text);
  context::save_summary(cfg.cache_dir, prompt, summary);
  return summary;
}

// Full policy: remote when configured, cache-first, and unless fail_hard is
// set a remote failure degrades to the deterministic rule-based summary with
// a warning on stderr.
inline context::ContextSummary summarize_with_fallback(
    const context::WindowSummaryFeatures& features,
    const std::array<double, data::kInputLen>& x, const std::string& window_ref,
    const RemoteConfig& cfg) {
  if (cfg.chat_url.empty()) {
    context::ContextSummary s = context::summarize_rule_based(features, x);
    s.window_ref = window_ref;
    return s;
  }
  const std::string prompt = context::build_prompt(features, x);
  try {
    context::ContextSummary s = summarize_remote(prompt, cfg);
    s.window_ref = window_ref;
    return s;
  } catch (const Error& e) {
    if (cfg.fail_hard || e.kind() != ErrorKind::remote) throw;
    std::fprintf(stderr, "warning: %s; falling back to rule-based summary\n",
                 e.what());
    context::ContextSummary s = context::summarize_rule_based(features, x);
    s.window_ref = window_ref;
    return s;
  }
}

// ── text embeddings ──────────────────────────────────────────────────────────

// Remote embedding with the same cache discipline. The cache entry stores the
// vector under an "embedding" key; the hash domain is prefixed so a text can
// never collide with a chat prompt entry.
inline std::array<double, context::kTextDim> embed_remote(
    const std::string& text, const RemoteConfig& cfg) {
  cfg.validate();
  if (cfg.embed_url.empty())
    throw Error(ErrorKind::config, "no embedding endpoint configured");
  if (text.empty())
    throw Error(ErrorKind::validation, "cannot embed empty text");

  const std::string domain_key = "embed\n" + text;
  const std::filesystem::path path =
      context::summary_path(cfg.cache_dir, domain_key);
  if (std::filesystem::exists(path)) {
    std::ifstream in(path, std::ios::binary);
    nlohmann::json j;
    try {
      in >> j;
      if (j.at("prompt_hash").get<std::string>() !=
          hash::sha256_hex(domain_key))
        throw Error(ErrorKind::hash_mismatch,
                    "embedding cache entry does not match its key: " +
                        path.string());
      const auto vec = j.at("embedding").get<std::vector<double>>();
      if (vec.size() != context::kTextDim)
        throw Error(ErrorKind::parse, "cached embedding has wrong width");
      std::array<double, context::kTextDim> out{};
      std::copy(vec.begin(), vec.end(), out.begin());
      return out;
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::parse,
                  "corrupt embedding cache entry: " + std::string(e.what()));
    }
  }

  const nlohmann::json body = {{"input", text}};
  const std::optional<std::string> response =
      detail::post_with_retries(cfg, cfg.embed_url, body.dump());
  if (!response)
    throw Error(ErrorKind::remote,
                "embedding endpoint failed after " +
                    std::to_string(cfg.max_attempts) + " attempts: " +
                    cfg.embed_url);
  std::vector<double> vec;
  try {
    vec = nlohmann::json::parse(*response)
              .at("embedding")
              .get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::remote,
                "malformed embedding response: " + std::string(e.what()));
  }
  if (vec.size() != context::kTextDim)
    throw Error(ErrorKind::remote,
                "embedding endpoint returned " + std::to_string(vec.size()) +
                    " values, expected " + std::to_string(context::kTextDim));

  std::filesystem::create_directories(cfg.cache_dir);
  nlohmann::json entry = {{"prompt_hash", hash::sha256_hex(domain_key)},
                          {"backend", "remote"},
                          {"embedding", vec}};
  const std::filesystem::path tmp = context::detail::temp_sibling(path);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << entry.dump(2) << "\n";
    if (!out) throw Error(ErrorKind::io, "cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, path);

  std::array<double, context::kTextDim> out{};
  std::copy(vec.begin(), vec.end(), out.begin());
  return out;
}

// Embedding policy mirror of summarize_with_fallback: remote when configured,
// deterministic hashed bag-of-words otherwise or on failure.
inline std::array<double, context::kTextDim> embed_with_fallback(
    const std::string& text, const RemoteConfig& cfg) {
  if (cfg.embed_url.empty()) return context::embed_text(text);
  try {
    return embed_remote(text, cfg);
  } catch (const Error& e) {
    if (cfg.fail_hard || e.kind() != ErrorKind::remote) throw;
    std::fprintf(stderr, "warning: %s; falling back to local embedding\n",
                 e.what());
    return context::embed_text(text);
  }
}

// Bounded-parallel batch driver shared with the rest of the pipeline; remote
// callers reach it under this namespace too.
using context::for_each_bounded;

}  // namespace glyrag::remote
