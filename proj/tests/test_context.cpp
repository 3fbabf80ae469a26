#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "glyrag/context.hpp"

using namespace glyrag;
using namespace glyrag::context;
using data::Trend;
using data::WindowSummaryFeatures;

namespace {

std::array<double, data::kInputLen> flat_window(double v) {
  std::array<double, data::kInputLen> x;
  x.fill(v);
  return x;
}

WindowSummaryFeatures make_features(Trend t, double bgl, double carbs,
                                    double bolus) {
  WindowSummaryFeatures f;
  f.trend = t;
  f.current_bgl = bgl;
  f.carbs_30min = carbs;
  f.bolus_total_30min = bolus;
  f.bolus_food_30min = bolus;
  f.tir_window_pct = 100.0;
  return f;
}

std::size_t count_occurrences(const std::string& haystack,
                              const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = haystack.find(needle); pos != std::string::npos;
       pos = haystack.find(needle, pos + 1))
    ++n;
  return n;
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("glyrag_ctx_" + std::to_string(::getpid()) + "_" +
            std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("prompt carries the pipe-joined history in order", "[context]") {
  std::array<double, data::kInputLen> x;
  for (std::size_t i = 0; i < x.size(); ++i)
    x[i] = 100.0 + static_cast<double>(i);
  auto f = make_features(Trend::rising, x.back(), 0.0, 0.0);
  const std::string prompt = build_prompt(f, x);

  std::string expected = "100.0";
  for (std::size_t i = 1; i < x.size(); ++i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "|%.1f", x[i]);
    expected += buf;
  }
  CHECK(prompt.find(expected) != std::string::npos);
  CHECK(count_occurrences(prompt, "|") == data::kInputLen - 1);
}

TEST_CASE("prompt is byte-deterministic", "[context]") {
  auto x = flat_window(123.4);
  auto f = make_features(Trend::stable, 123.4, 12.5, 1.25);
  CHECK(build_prompt(f, x) == build_prompt(f, x));
}

TEST_CASE("trend token appears exactly once in the prompt", "[context]") {
  auto x = flat_window(120.0);
  for (Trend t : {Trend::rising, Trend::falling, Trend::stable}) {
    auto f = make_features(t, 120.0, 0.0, 0.0);
    const std::string prompt = build_prompt(f, x);
    CHECK(count_occurrences(prompt, data::to_string(t)) == 1);
    // The other two trend tokens never appear.
    for (Trend other : {Trend::rising, Trend::falling, Trend::stable})
      if (other != t)
        CHECK(count_occurrences(prompt, data::to_string(other)) == 0);
  }
}

TEST_CASE("prompt formats the data summary fields", "[context]") {
  auto x = flat_window(120.0);
  WindowSummaryFeatures f = make_features(Trend::stable, 145.5, 35.0, 0.0);
  f.bolus_total_30min = 1.5;
  f.bolus_food_30min = 0.0;
  f.bolus_correction_30min = 1.5;
  f.tir_window_pct = 97.2;
  const std::string prompt = build_prompt(f, x);
  CHECK(prompt.find("Carbohydrate Intake: 35.0 g") != std::string::npos);
  CHECK(prompt.find("Total Insulin Bolus: 1.50 U") != std::string::npos);
  CHECK(prompt.find("Food Bolus: 0.00 U") != std::string::npos);
  CHECK(prompt.find("Correction Bolus: 1.50 U") != std::string::npos);
  CHECK(prompt.find("Other Bolus: 0.00 U") != std::string::npos);
  CHECK(prompt.find("Current BGL: 145.5 mg/dL") != std::string::npos);
  CHECK(prompt.find("Time In Range: 97.2%") != std::string::npos);
  CHECK(prompt.find("Trend: stable") != std::string::npos);
}

TEST_CASE("prompt splits into system and user chat messages", "[context]") {
  auto x = flat_window(110.0);
  auto f = make_features(Trend::stable, 110.0, 0.0, 0.0);
  const std::string prompt = build_prompt(f, x);
  ChatMessages msgs = to_chat_messages(prompt);
  CHECK(msgs.system.rfind("You are a medical assistant", 0) == 0);
  CHECK(msgs.system.find("blood sugar levels.") != std::string::npos);
  CHECK(msgs.user.rfind("User Task:", 0) == 0);
  CHECK(msgs.user.find("Historical CGM values:") != std::string::npos);
  CHECK(msgs.user.find("Output Requirements:") != std::string::npos);
  // Reassembling the parts recovers the original bytes.
  CHECK("System Role: " + msgs.system + "\n\n" + msgs.user == prompt);

  CHECK_THROWS_AS(to_chat_messages("no sections here"), Error);
}

TEST_CASE("stable window without therapy gives exactly three sentences",
          "[context]") {
  auto x = flat_window(120.0);
  auto f = make_features(Trend::stable, 120.0, 0.0, 0.0);
  ContextSummary s = summarize_rule_based(f, x);
  CHECK(s.sentence_count == 3);
  CHECK(count_sentences(s.text) == 3);
  CHECK(s.text.find("stable") != std::string::npos);
  CHECK(s.backend == Backend::rule_based);
}

TEST_CASE("rule-based summary never contains digits", "[context]") {
  std::vector<std::array<double, data::kInputLen>> windows;
  windows.push_back(flat_window(250.0));
  auto ramp = flat_window(100.0);
  for (std::size_t i = 0; i < ramp.size(); ++i)
    ramp[i] = 60.0 + 8.0 * static_cast<double>(i);  // rapid rise
  windows.push_back(ramp);
  for (const auto& x : windows)
    for (Trend t : {Trend::rising, Trend::falling, Trend::stable})
      for (double carbs : {0.0, 30.0})
        for (double bolus : {0.0, 2.0}) {
          auto f = make_features(t, x.back(), carbs, bolus);
          ContextSummary s = summarize_rule_based(f, x);
          CAPTURE(s.text);
          CHECK(s.text.find_first_of("0123456789") == std::string::npos);
          CHECK(s.sentence_count <= 5);
          CHECK(!s.text.empty());
        }
}

TEST_CASE("falling glucose near range floor names hypoglycemia", "[context]") {
  auto x = flat_window(80.0);
  auto f = make_features(Trend::falling, 80.0, 0.0, 0.0);
  ContextSummary s = summarize_rule_based(f, x);
  CHECK(s.text.find("hypoglycemia") != std::string::npos);
  CHECK(s.text.find("elevated risk") != std::string::npos);

  // Same level but stable: the elevated-risk wording must not fire.
  auto f2 = make_features(Trend::stable, 80.0, 0.0, 0.0);
  ContextSummary s2 = summarize_rule_based(f2, x);
  CHECK(s2.text.find("elevated risk") == std::string::npos);
  CHECK(s2.text.find("appears low") != std::string::npos);
}

TEST_CASE("rising glucose above range ceiling names hyperglycemia",
          "[context]") {
  auto x = flat_window(220.0);
  auto f = make_features(Trend::rising, 220.0, 0.0, 0.0);
  ContextSummary s = summarize_rule_based(f, x);
  CHECK(s.text.find("hyperglycemia") != std::string::npos);
  CHECK(s.text.find("risk of hyperglycemia if the climb") != std::string::npos);
}

TEST_CASE("summary decision table rows are pairwise distinct", "[context]") {
  // Enumerate every reachable (trend, risk, therapy) combination. Risk is a
  // function of (trend, current level): hypo needs falling below the alert
  // level, hyper needs rising above it, anything else is low risk.
  struct Combo {
    Trend trend;
    double bgl;
    double carbs;
    double bolus;
  };
  std::vector<Combo> combos;
  for (Trend t : {Trend::rising, Trend::falling, Trend::stable}) {
    std::vector<double> levels = {120.0};  // low risk for every trend
    if (t == Trend::falling) levels.push_back(80.0);   // hypo risk
    if (t == Trend::rising) levels.push_back(220.0);   // hyper risk
    for (double bgl : levels)
      for (double carbs : {0.0, 30.0})
        for (double bolus : {0.0, 2.0})
          combos.push_back({t, bgl, carbs, bolus});
  }
  REQUIRE(combos.size() == (3 + 2) * 4);

  auto x = flat_window(120.0);
  std::set<std::string> texts;
  for (const Combo& c : combos) {
    auto f = make_features(c.trend, c.bgl, c.carbs, c.bolus);
    texts.insert(summarize_rule_based(f, x).text);
  }
  CHECK(texts.size() == combos.size());
}

TEST_CASE("slope band shades the trend sentence", "[context]") {
  auto gentle = flat_window(100.0);
  for (std::size_t i = 0; i < gentle.size(); ++i)
    gentle[i] = 100.0 + 2.0 * static_cast<double>(i);  // 0.4 mg/dL/min
  auto moderate = gentle;
  for (std::size_t i = 0; i < moderate.size(); ++i)
    moderate[i] = 100.0 + 6.0 * static_cast<double>(i);  // 1.2 mg/dL/min
  auto rapid = gentle;
  for (std::size_t i = 0; i < rapid.size(); ++i)
    rapid[i] = 100.0 + 11.0 * static_cast<double>(i);  // 2.2 mg/dL/min

  auto f = make_features(Trend::rising, 200.0, 0.0, 0.0);
  CHECK(summarize_rule_based(f, gentle).text.find("gradually") !=
        std::string::npos);
  CHECK(summarize_rule_based(f, moderate).text.find("moderate pace") !=
        std::string::npos);
  CHECK(summarize_rule_based(f, rapid).text.find("rapidly") !=
        std::string::npos);
}

TEST_CASE("rule-based summarizer is a pure function", "[context]") {
  auto x = flat_window(150.0);
  x[10] = 180.0;
  auto f = make_features(Trend::rising, 150.0, 25.0, 1.5);
  ContextSummary a = summarize_rule_based(f, x);
  ContextSummary b = summarize_rule_based(f, x);
  CHECK(a.text == b.text);
  CHECK(a.sentence_count == b.sentence_count);
}

TEST_CASE("embed_text is deterministic with unit norm", "[context]") {
  const std::string text = "Glucose has been rising rapidly.";
  auto a = embed_text(text);
  auto b = embed_text(text);
  CHECK(a == b);
  double norm_sq = 0.0;
  for (double v : a) norm_sq += v * v;
  CHECK_THAT(norm_sq, Catch::Matchers::WithinAbs(1.0, 1e-9));
}

TEST_CASE("embed_text distinguishes different texts", "[context]") {
  auto a = embed_text("glucose rising");
  auto b = embed_text("glucose falling");
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  CHECK(dot < 1.0 - 1e-9);
}

TEST_CASE("embed_text normalizes case and punctuation boundaries",
          "[context]") {
  // Tokenization lowercases and splits on non-alphanumerics, so these three
  // spellings produce the same bag of tokens.
  auto a = embed_text("Glucose, RISING!");
  auto b = embed_text("glucose rising");
  auto c = embed_text("glucose;rising");
  CHECK(a == b);
  CHECK(b == c);
}

TEST_CASE("embed_text rejects empty and token-free input", "[context]") {
  CHECK_THROWS_AS(embed_text(""), Error);
  CHECK_THROWS_AS(embed_text("!!! --- ..."), Error);
  try {
    embed_text("");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::validation);
  }
}

TEST_CASE("summary store round-trips by prompt content", "[context]") {
  TempDir dir;
  auto x = flat_window(120.0);
  auto f = make_features(Trend::stable, 120.0, 0.0, 0.0);
  const std::string prompt = build_prompt(f, x);

  CHECK(!load_summary(dir.path, prompt).has_value());

  ContextSummary s = summarize_rule_based(f, x);
  save_summary(dir.path, prompt, s);

  auto loaded = load_summary(dir.path, prompt);
  REQUIRE(loaded.has_value());
  CHECK(loaded->text == s.text);
  CHECK(loaded->backend == Backend::rule_based);
  CHECK(loaded->sentence_count == s.sentence_count);

  // The file sits at the content-addressed path: 16 hex chars + ".json".
  const auto path = summary_path(dir.path, prompt);
  CHECK(std::filesystem::exists(path));
  const std::string stem = path.stem().string();
  CHECK(stem.size() == 16);
  CHECK(stem.find_first_not_of("0123456789abcdef") == std::string::npos);
}

TEST_CASE("summary store detects hash mismatches and corrupt files",
          "[context]") {
  TempDir dir;
  const std::string prompt = "prompt A";
  ContextSummary s;
  s.text = "Some text.";
  s.backend = Backend::remote;
  save_summary(dir.path, prompt, s);

  // Forge a file for a different prompt at this prompt's address.
  const std::string other = "prompt B";
  std::filesystem::copy_file(summary_path(dir.path, prompt),
                             summary_path(dir.path, other));
  CHECK_THROWS_AS(load_summary(dir.path, other), Error);
  try {
    load_summary(dir.path, other);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::hash_mismatch);
  }

  // Truncate the original file: parse error, not silence.
  {
    std::ofstream f2(summary_path(dir.path, prompt),
                     std::ios::binary | std::ios::trunc);
    f2 << "{ not json";
  }
  CHECK_THROWS_AS(load_summary(dir.path, prompt), Error);
}

TEST_CASE("distinct prompts get distinct store addresses", "[context]") {
  CHECK(prompt_key("a") != prompt_key("b"));
  CHECK(prompt_key("a") == prompt_key("a"));
  CHECK(prompt_key("a").size() == 16);
}

TEST_CASE("window_ref combines patient and start time", "[context]") {
  data::CgmWindow w;
  w.patient_id = "P007";
  w.start_time = data::parse_timestamp("2024-01-02T03:04:00Z");
  CHECK(window_ref(w) == "P007@2024-01-02T03:04:00Z");
}
