#include <catch2/catch_amalgamated.hpp>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "glyrag/context.hpp"
#include "glyrag/hash.hpp"
#include "glyrag/remote.hpp"

using namespace glyrag;
using Catch::Matchers::WithinAbs;

namespace {

// Matches a thrown Error by its kind (and therefore its CLI exit code).
struct ErrorKindIs : Catch::Matchers::MatcherGenericBase {
  explicit ErrorKindIs(ErrorKind kind) : kind_(kind) {}
  bool match(const Error& e) const { return e.kind() == kind_; }
  std::string describe() const override {
    return "has error kind " + std::string(to_string(kind_));
  }
  ErrorKind kind_;
};

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("glyrag_remote_" + std::to_string(::getpid()) + "_" +
            std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

// An HTTP server on a loopback ephemeral port, running on its own thread.
// Handlers are registered on `svr` before calling start().
struct MockServer {
  httplib::Server svr;
  std::thread thr;
  int port = 0;

  void start() {
    port = svr.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    thr = std::thread([this] { svr.listen_after_bind(); });
    svr.wait_until_ready();
  }
  std::string url(const std::string& path) const {
    return "http://127.0.0.1:" + std::to_string(port) + path;
  }
  ~MockServer() {
    svr.stop();
    if (thr.joinable()) thr.join();
  }
};

remote::RemoteConfig fast_config(const std::filesystem::path& cache) {
  remote::RemoteConfig cfg;
  cfg.cache_dir = cache;
  cfg.backoff_base_s = 0.01;
  cfg.timeout_s = 5.0;
  cfg.auth_env.clear();  // keep ambient environment out of most tests
  return cfg;
}

// A syntactically valid prompt (system section + body), unique per salt so
// cache keys never collide across sections.
std::string test_prompt(const std::string& salt) {
  return "System Role: You summarize glucose windows.\n\nDescribe window " +
         salt + ".";
}

std::string chat_response(const std::string& text) {
  nlohmann::json j = {
      {"choices", {{{"message", {{"content", text}, {"role", "assistant"}}}}}}};
  return j.dump();
}

context::WindowSummaryFeatures demo_features() {
  context::WindowSummaryFeatures f;
  f.carbs_30min = 30.0;
  f.bolus_total_30min = 2.5;
  f.bolus_food_30min = 2.0;
  f.bolus_correction_30min = 0.5;
  f.current_bgl = 142.0;
  f.tir_window_pct = 80.0;
  f.trend = data::Trend::rising;
  return f;
}

std::array<double, data::kInputLen> demo_window() {
  std::array<double, data::kInputLen> x{};
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = 110.0 + double(i);
  return x;
}

std::size_t files_in(const std::filesystem::path& dir) {
  std::size_t n = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    (void)e;
    ++n;
  }
  return n;
}

}  // namespace

TEST_CASE("chat endpoint round trip honors the wire format", "[remote]") {
  TempDir tmp;
  MockServer mock;
  std::atomic<int> hits{0};
  std::mutex mu;
  std::string seen_body, seen_content_type;
  mock.svr.Post("/v1/chat", [&](const httplib::Request& req,
                                httplib::Response& res) {
    ++hits;
    {
      std::lock_guard<std::mutex> lock(mu);
      seen_body = req.body;
      seen_content_type = req.get_header_value("Content-Type");
    }
    res.set_content(chat_response("TEST SUMMARY."), "application/json");
  });
  mock.start();

  remote::RemoteConfig cfg = fast_config(tmp.path);
  cfg.chat_url = mock.url("/v1/chat");

  const std::string prompt = test_prompt("wire");
  const context::ContextSummary got = remote::summarize_remote(prompt, cfg);

  CHECK(got.text == "TEST SUMMARY.");
  CHECK(got.backend == context::Backend::remote);
  CHECK(got.sentence_count == 1);
  CHECK(hits.load() == 1);

  // The request body is {"model", "messages": [system, user]} with the two
  // messages carrying exactly the split prompt.
  const context::ChatMessages msgs = context::to_chat_messages(prompt);
  nlohmann::json body;
  {
    std::lock_guard<std::mutex> lock(mu);
    CHECK(seen_content_type == "application/json");
    body = nlohmann::json::parse(seen_body);
  }
  CHECK(body.at("model").get<std::string>() == cfg.model);
  REQUIRE(body.at("messages").size() == 2);
  CHECK(body["messages"][0].at("role").get<std::string>() == "system");
  CHECK(body["messages"][0].at("content").get<std::string>() == msgs.system);
  CHECK(body["messages"][1].at("role").get<std::string>() == "user");
  CHECK(body["messages"][1].at("content").get<std::string>() == msgs.user);

  // The summary landed in the cache under the prompt's content hash.
  CHECK(std::filesystem::exists(context::summary_path(tmp.path, prompt)));
}

TEST_CASE("warm cache answers without touching the network", "[remote]") {
  TempDir tmp;
  MockServer mock;
  std::atomic<int> hits{0};
  mock.svr.Post("/v1/chat",
                [&](const httplib::Request&, httplib::Response& res) {
                  ++hits;
                  res.set_content(chat_response("Cached answer."),
                                  "application/json");
                });
  mock.start();

  remote::RemoteConfig cfg = fast_config(tmp.path);
  cfg.chat_url = mock.url("/v1/chat");

  const std::string prompt = test_prompt("cache");
  const context::ContextSummary first = remote::summarize_remote(prompt, cfg);
  REQUIRE(hits.load() == 1);

  const context::ContextSummary second = remote::summarize_remote(prompt, cfg);
  CHECK(hits.load() == 1);  // served from disk, not the server
  CHECK(second.text == first.text);
  CHECK(second.backend == first.backend);
  CHECK(second.sentence_count == first.sentence_count);

  // Offline replay: with the cache warm, even a dead endpoint answers.
  remote::RemoteConfig offline = cfg;
  offline.chat_url = "http://127.0.0.1:1/v1/chat";
  offline.max_attempts = 1;
  const context::ContextSummary replay =
      remote::summarize_remote(prompt, offline);
  CHECK(replay.text == first.text);
  CHECK(hits.load() == 1);
}

TEST_CASE("tampered cache entries are rejected by hash", "[remote]") {
  TempDir tmp;
  auto plant_fake = [&](const std::string& prompt) {
    nlohmann::json fake = {{"prompt_hash", std::string(64, 'a')},
                           {"backend", "remote"},
                           {"text", "Planted answer."}};
    std::ofstream out(context::summary_path(tmp.path, prompt));
    out << fake.dump();
  };
  remote::RemoteConfig cfg = fast_config(tmp.path);
  cfg.chat_url = "http://127.0.0.1:1/v1/chat";  // must never be consulted
  cfg.max_attempts = 1;

  const std::string prompt = test_prompt("tamper");
  plant_fake(prompt);
  CHECK_THROWS_MATCHES(remote::summarize_remote(prompt, cfg), Error,
                       ErrorKindIs(ErrorKind::hash_mismatch));

  // The integrity failure is not a network failure: fallback never masks it.
  const auto features = demo_features();
  const auto x = demo_window();
  plant_fake(context::build_prompt(features, x));
  CHECK_THROWS_MATCHES(
      remote::summarize_with_fallback(features, x, "w@t", cfg), Error,
      ErrorKindIs(ErrorKind::hash_mismatch));
}

TEST_CASE("http failures exhaust retries then fall back to rule-based",
          "[remote]") {
  TempDir tmp;
  MockServer mock;
  std::atomic<int> hits{0};
  mock.svr.Post("/v1/chat",
                [&](const httplib::Request&, httplib::Response& res) {
                  ++hits;
                  res.status = 500;
                  res.set_content("backend down", "text/plain");
                });
  mock.start();

  remote::RemoteConfig cfg = fast_config(tmp.path);
  cfg.chat_url = mock.url("/v1/chat");

  const auto features = demo_features();
  const auto x = demo_window();
  const context::ContextSummary got =
      remote::summarize_with_fallback(features, x, "p1@2026-01-01T00:00:00Z",
                                      cfg);

  CHECK(hits.load() == 3);  // every configured attempt was made
  CHECK(got.backend == context::Backend::rule_based);
  CHECK(got.window_ref == "p1@2026-01-01T00:00:00Z");
  CHECK(got.text == context::summarize_rule_based(features, x).text);

  // Nothing was cached for the failed prompt.
  const std::string prompt = context::build_prompt(features, x);
  CHECK_FALSE(std::filesystem::exists(context::summary_path(tmp.path, prompt)));
}

TEST_CASE("fail-hard mode and non-network errors propagate", "[remote]") {
  TempDir tmp;
  MockServer mock;
  mock.svr.Post("/v1/chat",
                [&](const httplib::Request&, httplib::Response& res) {
                  res.status = 500;
                });
  mock.start();

  remote::RemoteConfig cfg = fast_config(tmp.path);
  cfg.chat_url = mock.url("/v1/chat");

  SECTION("summarize_remote reports the exhausted retries") {
    CHECK_THROWS_MATCHES(remote::summarize_remote(test_prompt("hard"), cfg),
                         Error, ErrorKindIs(ErrorKind::remote));
  }

  SECTION("fail_hard turns the fallback path into a hard error") {
    cfg.fail_hard = true;
    CHECK_THROWS_MATCHES(
        remote::summarize_with_fallback(demo_features(), demo_window(), "w@t",
                                        cfg),
        Error, ErrorKindIs(ErrorKind::remote));
  }

  SECTION("configuration errors are never swallowed by the fallback") {
    cfg.max_attempts = 0;  // invalid: validate() rejects it
    CHECK_THROWS_MATCHES(
        remote::summarize_with_fallback(demo_features(), demo_window(), "w@t",
                                        cfg),
        Error, ErrorKindIs(ErrorKind::config));
  }

  SECTION("an empty endpoint skips the network entirely") {
    cfg.chat_url.clear();
    const auto features = demo_features();
    const auto x = demo_window();
    const context::ContextSummary got =
        remote::summarize_with_fallback(features, x, "w@t", cfg);
    CHECK(got.backend == context::Backend::rule_based);
    CHECK(got.window_ref == "w@t");
    CHECK(got.text == context::summarize_rule_based(features, x).text);
  }
}

TEST_CASE("malformed chat responses surface as remote errors", "[remote]") {
  TempDir tmp;
  MockServer mock;
  std::mutex mu;
  std::string payload;
  mock.svr.Post("/v1/chat",
                [&](const httplib::Request&, httplib::Response& res) {
                  std::lock_guard<std::mutex> lock(mu);
                  res.set_content(payload, "application/json");
                });
  mock.start();

  remote::RemoteConfig cfg = fast_config(tmp.path);
  cfg.chat_url = mock.url("/v1/chat");
  cfg.max_attempts = 1;

  auto expect_remote_error = [&](const std::string& body,
                                 const std::string& salt) {
    {
      std::lock_guard<std::mutex> lock(mu);
      payload = body;
    }
    CHECK_THROWS_MATCHES(remote::summarize_remote(test_prompt(salt), cfg),
                         Error, ErrorKindIs(ErrorKind::remote));
  };

  expect_remote_error("this is not json", "a");
  expect_remote_error(R"({"unexpected": true})", "b");
  expect_remote_error(R"({"choices": []})", "c");
  expect_remote_error(R"({"choices": [{"message": {}}]})", "d");
  expect_remote_error(chat_response(""), "e");  // empty summary text

  // None of the bad responses may poison the cache.
  CHECK(files_in(tmp.path) == 0);
}

TEST_CASE("bearer tokens come from the configured environment variable",
          "[remote]") {
  TempDir tmp;
  MockServer mock;
  std::mutex mu;
  std::vector<std::string> auth_seen;
  mock.svr.Post("/v1/chat",
                [&](const httplib::Request& req, httplib::Response& res) {
                  {
                    std::lock_guard<std::mutex> lock(mu);
                    auth_seen.push_back(req.get_header_value("Authorization"));
                  }
                  res.set_content(chat_response("Authorized."),
                                  "application/json");
                });
  mock.start();

  remote::RemoteConfig cfg = fast_config(tmp.path);
  cfg.chat_url = mock.url("/v1/chat");
  cfg.auth_env = "GLYRAG_TEST_TOKEN";

  ::setenv("GLYRAG_TEST_TOKEN", "sekret-2026", 1);
  remote::summarize_remote(test_prompt("auth1"), cfg);
  ::unsetenv("GLYRAG_TEST_TOKEN");
  remote::summarize_remote(test_prompt("auth2"), cfg);

  std::lock_guard<std::mutex> lock(mu);
  REQUIRE(auth_seen.size() == 2);
  CHECK(auth_seen[0] == "Bearer sekret-2026");
  CHECK(auth_seen[1].empty());  // unset variable sends no header
}

TEST_CASE("embedding endpoint round trip, cache, and width validation",
          "[remote]") {
  TempDir tmp;
  MockServer mock;
  std::atomic<int> hits{0};
  std::mutex mu;
  std::string seen_body;
  std::atomic<bool> truncate{false};
  mock.svr.Post("/v1/embed", [&](const httplib::Request& req,
                                 httplib::Response& res) {
    ++hits;
    {
      std::lock_guard<std::mutex> lock(mu);
      seen_body = req.body;
    }
    const std::string input =
        nlohmann::json::parse(req.body).at("input").get<std::string>();
    const std::size_t width = truncate.load() ? 3 : context::kTextDim;
    std::vector<double> vec(width);
    for (std::size_t i = 0; i < width; ++i)
      vec[i] = 0.001 * double(i) + double(input.size());
    res.set_content(nlohmann::json({{"embedding", vec}}).dump(),
                    "application/json");
  });
  mock.start();

  remote::RemoteConfig cfg = fast_config(tmp.path);
  cfg.embed_url = mock.url("/v1/embed");

  const std::string text = "Glucose is rising after a meal.";
  const auto first = remote::embed_remote(text, cfg);
  REQUIRE(hits.load() == 1);
  {
    std::lock_guard<std::mutex> lock(mu);
    const nlohmann::json body = nlohmann::json::parse(seen_body);
    CHECK(body.size() == 1);  // the wire body is exactly {"input": text}
    CHECK(body.at("input").get<std::string>() == text);
  }
  CHECK_THAT(first[0], WithinAbs(double(text.size()), 1e-12));
  CHECK_THAT(first[767], WithinAbs(0.767 + double(text.size()), 1e-12));

  // Second call is served from the cache, bit-identical.
  const auto second = remote::embed_remote(text, cfg);
  CHECK(hits.load() == 1);
  CHECK(second == first);

  // The cache entry is keyed by a domain-prefixed hash so a chat summary for
  // the same text lives under a different file.
  const std::string domain_key = "embed\n" + text;
  const auto path = context::summary_path(tmp.path, domain_key);
  REQUIRE(std::filesystem::exists(path));
  CHECK(context::prompt_key(domain_key) != context::prompt_key(text));
  {
    std::ifstream in(path);
    nlohmann::json entry;
    in >> entry;
    CHECK(entry.at("prompt_hash").get<std::string>() ==
          hash::sha256_hex(domain_key));
    CHECK(entry.at("backend").get<std::string>() == "remote");
    REQUIRE(entry.at("embedding").size() == context::kTextDim);
  }

  // A response with the wrong width is rejected and never cached.
  truncate = true;
  const std::string other = "A different sentence.";
  CHECK_THROWS_MATCHES(remote::embed_remote(other, cfg), Error,
                       ErrorKindIs(ErrorKind::remote));
  CHECK_FALSE(std::filesystem::exists(
      context::summary_path(tmp.path, "embed\n" + other)));

  // A tampered cache entry is rejected by its hash.
  {
    nlohmann::json entry;
    {
      std::ifstream in(path);
      in >> entry;
    }
    entry["prompt_hash"] = std::string(64, 'b');
    std::ofstream out(path);
    out << entry.dump();
  }
  CHECK_THROWS_MATCHES(remote::embed_remote(text, cfg), Error,
                       ErrorKindIs(ErrorKind::hash_mismatch));
}

TEST_CASE("embedding fallback degrades to the local hashed encoding",
          "[remote]") {
  TempDir tmp;
  MockServer mock;
  mock.svr.Post("/v1/embed",
                [&](const httplib::Request&, httplib::Response& res) {
                  res.status = 500;
                });
  mock.start();

  const std::string text = "Stable overnight glucose.";
  const auto local = context::embed_text(text);

  remote::RemoteConfig cfg = fast_config(tmp.path);

  SECTION("no endpoint configured uses the local encoder directly") {
    CHECK(remote::embed_with_fallback(text, cfg) == local);
  }

  SECTION("a failing endpoint degrades to the local encoder") {
    cfg.embed_url = mock.url("/v1/embed");
    CHECK(remote::embed_with_fallback(text, cfg) == local);
  }

  SECTION("fail_hard propagates the remote error instead") {
    cfg.embed_url = mock.url("/v1/embed");
    cfg.fail_hard = true;
    CHECK_THROWS_MATCHES(remote::embed_with_fallback(text, cfg), Error,
                         ErrorKindIs(ErrorKind::remote));
  }

  SECTION("empty text is invalid whatever the backend") {
    cfg.embed_url = mock.url("/v1/embed");
    CHECK_THROWS_MATCHES(remote::embed_remote("", cfg), Error,
                         ErrorKindIs(ErrorKind::validation));
  }
}

TEST_CASE("retry pacing doubles the delay between attempts", "[remote]") {
  TempDir tmp;
  MockServer mock;
  std::atomic<int> hits{0};
  mock.svr.Post("/v1/chat",
                [&](const httplib::Request&, httplib::Response& res) {
                  ++hits;
                  res.status = 503;
                });
  mock.start();

  remote::RemoteConfig cfg = fast_config(tmp.path);
  cfg.chat_url = mock.url("/v1/chat");
  cfg.backoff_base_s = 0.05;  // waits of 0.05 s then 0.10 s

  const auto t0 = std::chrono::steady_clock::now();
  CHECK_THROWS_MATCHES(remote::summarize_remote(test_prompt("pace"), cfg),
                       Error, ErrorKindIs(ErrorKind::remote));
  const double elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();

  CHECK(hits.load() == 3);
  CHECK(elapsed >= 0.15);  // 0.05 * (2^0 + 2^1) of mandatory sleeping
  CHECK(elapsed < 5.0);
}

TEST_CASE("url splitting and config validation reject bad inputs",
          "[remote]") {
  using remote::detail::split_url;
  CHECK(split_url("http://host:123/v1/chat") ==
        std::pair<std::string, std::string>{"http://host:123", "/v1/chat"});
  CHECK(split_url("http://host:123") ==
        std::pair<std::string, std::string>{"http://host:123", "/"});
  CHECK_THROWS_MATCHES(split_url("host/no/scheme"), Error,
                       ErrorKindIs(ErrorKind::config));

  remote::RemoteConfig cfg;
  CHECK(cfg.max_attempts == 3);
  CHECK(cfg.parallelism == 4);
  CHECK_FALSE(cfg.fail_hard);
  cfg.validate();  // defaults are valid

  remote::RemoteConfig bad = cfg;
  bad.max_attempts = 0;
  CHECK_THROWS_MATCHES(bad.validate(), Error, ErrorKindIs(ErrorKind::config));
  bad = cfg;
  bad.backoff_base_s = -0.1;
  CHECK_THROWS_MATCHES(bad.validate(), Error, ErrorKindIs(ErrorKind::config));
  bad = cfg;
  bad.parallelism = 0;
  CHECK_THROWS_MATCHES(bad.validate(), Error, ErrorKindIs(ErrorKind::config));

  // Unconfigured endpoints are config errors at the call sites.
  TempDir tmp;
  remote::RemoteConfig none = fast_config(tmp.path);
  CHECK_THROWS_MATCHES(remote::summarize_remote(test_prompt("none"), none),
                       Error, ErrorKindIs(ErrorKind::config));
  CHECK_THROWS_MATCHES(remote::embed_remote("text", none), Error,
                       ErrorKindIs(ErrorKind::config));
}

TEST_CASE("bounded parallel loop visits every index exactly once",
          "[remote]") {
  SECTION("all indices run once at several widths") {
    for (int parallelism : {1, 4, 16}) {
      std::vector<int> visits(100, 0);
      std::mutex mu;
      remote::for_each_bounded(visits.size(), parallelism, [&](std::size_t i) {
        std::lock_guard<std::mutex> lock(mu);
        ++visits[i];
      });
      CHECK(std::count(visits.begin(), visits.end(), 1) == 100);
    }
  }

  SECTION("one worker preserves submission order") {
    std::vector<std::size_t> order;
    remote::for_each_bounded(20, 1,
                             [&](std::size_t i) { order.push_back(i); });
    REQUIRE(order.size() == 20);
    for (std::size_t i = 0; i < order.size(); ++i) CHECK(order[i] == i);
  }

  SECTION("zero items is a no-op") {
    remote::for_each_bounded(0, 4, [&](std::size_t) { FAIL("ran work"); });
  }

  SECTION("the first worker exception is rethrown after join") {
    std::atomic<int> completed{0};
    try {
      remote::for_each_bounded(50, 4, [&](std::size_t i) {
        if (i == 5) throw Error(ErrorKind::validation, "boom");
        ++completed;
      });
      FAIL("expected an exception");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::validation);
    }
    CHECK(completed.load() <= 50);
  }

  SECTION("a non-positive width is a config error") {
    CHECK_THROWS_MATCHES(remote::for_each_bounded(3, 0, [](std::size_t) {}),
                         Error, ErrorKindIs(ErrorKind::config));
  }
}

TEST_CASE("concurrent summarize calls share one cache entry", "[remote]") {
  TempDir tmp;
  MockServer mock;
  std::atomic<int> hits{0};
  mock.svr.Post("/v1/chat",
                [&](const httplib::Request&, httplib::Response& res) {
                  ++hits;
                  res.set_content(chat_response("Shared answer."),
                                  "application/json");
                });
  mock.start();

  remote::RemoteConfig cfg = fast_config(tmp.path);
  cfg.chat_url = mock.url("/v1/chat");

  const std::string prompt = test_prompt("shared");
  std::vector<std::string> results(12);
  remote::for_each_bounded(results.size(), 4, [&](std::size_t i) {
    results[i] = remote::summarize_remote(prompt, cfg).text;
  });

  for (const std::string& r : results) CHECK(r == "Shared answer.");
  CHECK(files_in(tmp.path) == 1);  // racers converge on one entry
  const int after_race = hits.load();
  CHECK(after_race >= 1);
  CHECK(after_race <= 12);

  // Once warm, further calls stay off the network.
  remote::summarize_remote(prompt, cfg);
  CHECK(hits.load() == after_race);
}
