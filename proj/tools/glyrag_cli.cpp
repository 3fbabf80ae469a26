// glyrag — command-line front end for the glucose-forecasting pipeline.
//
// The pipeline composes through files only: every subcommand reads artifacts
// produced by earlier stages and writes its own deterministically, so
// rerunning a stage with identical inputs restores byte-identical outputs.
//
//   synth          generate a synthetic CGM cohort CSV
//   contextualize  write one narrative summary per window (rule or remote)
//   train          pretrain encoder, build retrieval index, fine-tune adapter
//   forecast       emit per-window 12-step predictions in mg/dL
//   eval           score a predictions file (clinical metrics, JSON/CSV)
//   ablate         train and score the component on/off grid
//   plot           per-window plot-data CSVs and static SVG renders

#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "glyrag/data.hpp"
#include "glyrag/error.hpp"
#include "glyrag/plot.hpp"
#include "glyrag/remote.hpp"
#include "glyrag/trainer.hpp"

namespace {

using namespace glyrag;

constexpr const char* kExitCodeHelp =
    "Exit codes:\n"
    "  0  success\n"
    "  1  command-line usage error\n"
    "  2  io: a file could not be read or written\n"
    "  3  parse: malformed file content (CSV, JSON, checkpoint, index)\n"
    "  4  validation: input violates a pipeline invariant\n"
    "  5  missing_artifact: run the producing stage first\n"
    "  6  hash_mismatch: artifact belongs to a different run or config\n"
    "  7  config: malformed or inconsistent run configuration\n"
    "  8  remote: remote backend failed and fallback was disabled\n"
    "\n"
    "Failures print one machine-readable line to stderr:\n"
    "  error: code=<n> kind=<kind> detail=<message>\n";

train::TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::config, path + ": " + e.what());
  }
  return train::TrainConfig::from_json(j);
}

std::vector<data::CgmWindow> pick_windows(const train::CohortData& cohort,
                                          const std::string& split) {
  if (split == "test") return cohort.test_windows;
  if (split == "train") return cohort.train_windows;
  if (split == "val") {
    std::vector<data::CgmWindow> v;
    v.reserve(cohort.val_indices.size());
    for (std::size_t i : cohort.val_indices)
      v.push_back(cohort.train_windows[i]);
    return v;
  }
  throw Error(ErrorKind::validation, "unknown split: " + split);
}

// ── subcommand wiring ────────────────────────────────────────────────────────

void add_synth(CLI::App& app) {
  auto* cmd = app.add_subcommand(
      "synth", "Generate a synthetic CGM cohort CSV (deterministic per seed)");
  auto patients = std::make_shared<std::size_t>(4);
  auto days = std::make_shared<std::size_t>(10);
  auto seed = std::make_shared<std::uint64_t>(0);
  auto out = std::make_shared<std::string>();
  cmd->add_option("--patients", *patients, "Number of patients")
      ->capture_default_str();
  cmd->add_option("--days", *days, "Days of CGM data per patient")
      ->capture_default_str();
  cmd->add_option("--seed", *seed, "Generator seed")->capture_default_str();
  cmd->add_option("--out", *out, "Output CSV path")->required();
  cmd->callback([=]() {
    data::SynthConfig sc{*patients, *days, *seed};
    const auto cohort = data::generate_synthetic_cohort(sc);
    data::write_cohort_csv(*out, cohort);
    std::size_t records = 0;
    for (const auto& s : cohort) records += s.records.size();
    std::printf("wrote %zu patients, %zu records to %s\n", cohort.size(),
                records, out->c_str());
  });
}

void add_contextualize(CLI::App& app) {
  auto* cmd = app.add_subcommand(
      "contextualize",
      "Write one narrative summary per window into a content-addressed store");
  auto data_path = std::make_shared<std::string>();
  auto config_path = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  auto backend = std::make_shared<std::string>("rule");
  auto splits = std::make_shared<std::string>("all");
  auto parallelism = std::make_shared<int>(1);
  auto chat_url = std::make_shared<std::string>();
  auto auth_env = std::make_shared<std::string>("GLYRAG_API_TOKEN");
  auto cache = std::make_shared<std::string>("remote_cache");
  auto attempts = std::make_shared<int>(3);
  auto timeout_s = std::make_shared<double>(10.0);
  auto fail_hard = std::make_shared<bool>(false);
  cmd->add_option("--data", *data_path, "Cohort CSV")->required();
  cmd->add_option("--config", *config_path,
                  "Run config JSON (provides the train/test split fraction)")
      ->required();
  cmd->add_option("--out", *out, "Summary store directory")->required();
  cmd->add_option("--backend", *backend, "Summary backend")
      ->check(CLI::IsMember({"rule", "remote"}))
      ->capture_default_str();
  cmd->add_option("--splits", *splits, "Which windows to summarize")
      ->check(CLI::IsMember({"train", "test", "all"}))
      ->capture_default_str();
  cmd->add_option("--parallelism", *parallelism,
                  "Bounded worker count for summarization")
      ->capture_default_str();
  cmd->add_option("--chat-url", *chat_url,
                  "Remote chat endpoint (remote backend)")
      ->envname("GLYRAG_CHAT_URL");
  cmd->add_option("--auth-env", *auth_env,
                  "Environment variable holding the bearer token")
      ->capture_default_str();
  cmd->add_option("--cache", *cache, "Remote response cache directory")
      ->capture_default_str();
  cmd->add_option("--max-attempts", *attempts,
                  "Remote attempts before fallback")
      ->capture_default_str();
  cmd->add_option("--timeout", *timeout_s, "Remote request timeout, seconds")
      ->capture_default_str();
  cmd->add_flag("--fail-hard", *fail_hard,
                "Treat remote failure as fatal instead of falling back");
  cmd->callback([=]() {
    const train::TrainConfig cfg = load_config(*config_path);
    const auto raw = data::ingest_csv(*data_path, data::Split::train);
    const train::CohortData cohort = train::prepare(raw, cfg);

    std::vector<data::CgmWindow> windows;
    if (*splits != "test")
      windows.insert(windows.end(), cohort.train_windows.begin(),
                     cohort.train_windows.end());
    if (*splits != "train")
      windows.insert(windows.end(), cohort.test_windows.begin(),
                     cohort.test_windows.end());

    train::Summarizer summarize;
    if (*backend == "rule") {
      summarize = train::rule_based_summarizer();
    } else {
      if (chat_url->empty())
        throw Error(ErrorKind::config,
                    "remote backend needs --chat-url or GLYRAG_CHAT_URL");
      remote::RemoteConfig rc;
      rc.chat_url = *chat_url;
      rc.auth_env = *auth_env;
      rc.cache_dir = *cache;
      rc.max_attempts = *attempts;
      rc.timeout_s = *timeout_s;
      rc.fail_hard = *fail_hard;
      rc.parallelism = *parallelism;
      rc.validate();
      summarize = [rc](const context::WindowSummaryFeatures& features,
                       const std::array<double, data::kInputLen>& x,
                       const std::string& ref) {
        return remote::summarize_with_fallback(features, x, ref, rc);
      };
    }
    const std::size_t fresh =
        train::contextualize(windows, *out, summarize, *parallelism);
    std::printf("summarized %zu windows (%zu fresh, %zu already stored) in %s\n",
                windows.size(), fresh, windows.size() - fresh, out->c_str());
  });
}

void add_train(CLI::App& app) {
  auto* cmd = app.add_subcommand(
      "train",
      "Pretrain the encoder, freeze it into a retrieval index, fine-tune the "
      "adapter; all artifacts land in the run directory");
  auto config_path = std::make_shared<std::string>();
  auto data_path = std::make_shared<std::string>();
  auto summaries = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  cmd->add_option("--config", *config_path, "Run config JSON")->required();
  cmd->add_option("--data", *data_path, "Cohort CSV")->required();
  cmd->add_option("--summaries", *summaries,
                  "Summary store directory (from contextualize)")
      ->required();
  cmd->add_option("--out", *out, "Run directory for artifacts")->required();
  cmd->callback([=]() {
    const train::TrainConfig cfg = load_config(*config_path);
    const auto raw = data::ingest_csv(*data_path, data::Split::train);
    const train::SummaryStore store(*summaries);
    const train::RunManifest man = train::run_training(cfg, raw, *out, store);
    std::printf("run %s complete: config %s\n", out->c_str(),
                man.config_hash.substr(0, 12).c_str());
    for (const auto& [name, rel] : man.artifacts)
      std::printf("  %-16s %s\n", name.c_str(), rel.c_str());
  });
}

void add_forecast(CLI::App& app) {
  auto* cmd = app.add_subcommand(
      "forecast",
      "Run inference over a window source and write 12-step predictions "
      "(denormalized mg/dL)");
  auto run_dir = std::make_shared<std::string>();
  auto data_path = std::make_shared<std::string>();
  auto summaries = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  auto split = std::make_shared<std::string>("test");
  cmd->add_option("--run", *run_dir, "Run directory (from train)")->required();
  cmd->add_option("--data", *data_path, "Cohort CSV")->required();
  cmd->add_option("--summaries", *summaries, "Summary store directory")
      ->required();
  cmd->add_option("--out", *out, "Predictions CSV path")->required();
  cmd->add_option("--split", *split, "Window source within the cohort")
      ->check(CLI::IsMember({"test", "train", "val"}))
      ->capture_default_str();
  cmd->callback([=]() {
    train::LoadedRun run = train::load_run(*run_dir);
    const auto raw = data::ingest_csv(*data_path, data::Split::train);
    const train::CohortData cohort = train::prepare(raw, run.cfg);
    const std::vector<data::CgmWindow> windows = pick_windows(cohort, *split);
    const train::SummaryStore store(*summaries);
    const train::EmbedFn embed = train::embedder_for(run.cfg, store);
    const auto preds = train::predict(
        run.encoder, run.adapter ? &*run.adapter : nullptr,
        run.index ? &*run.index : nullptr, windows, run.norms, embed, run.cfg);
    train::write_predictions_csv(*out, preds);
    std::printf("forecast %zu %s windows -> %s\n", preds.size(),
                split->c_str(), out->c_str());
  });
}

void add_eval(CLI::App& app) {
  auto* cmd = app.add_subcommand(
      "eval",
      "Score a predictions file: RMSE/MAE/correlation plus clinical grids at "
      "the 5/30/60-minute horizons");
  auto preds_path = std::make_shared<std::string>();
  auto run_dir = std::make_shared<std::string>();
  auto out_json = std::make_shared<std::string>();
  auto out_csv = std::make_shared<std::string>();
  cmd->add_option("--predictions", *preds_path, "Predictions CSV (from forecast)")
      ->required();
  cmd->add_option("--run", *run_dir,
                  "Run directory; stamps its config hash into the report");
  cmd->add_option("--out-json", *out_json, "Report JSON path");
  cmd->add_option("--out-csv", *out_csv, "Report CSV path");
  cmd->callback([=]() {
    const auto preds = train::read_predictions_csv(*preds_path);
    std::string hash;
    if (!run_dir->empty()) hash = train::load_manifest(*run_dir).config_hash;
    const train::EvaluationReport rep = train::evaluate(preds, hash);
    const std::string json_text = rep.to_json().dump(2) + "\n";
    if (!out_json->empty())
      train::detail::write_text_atomic(*out_json, json_text);
    if (!out_csv->empty()) train::write_evaluation_csv(*out_csv, rep);
    if (out_json->empty() && out_csv->empty()) {
      std::fputs(json_text.c_str(), stdout);
    } else {
      for (const train::HorizonMetrics& h : rep.pooled)
        std::printf("pooled %2d min: rmse %.3f mae %.3f\n", h.minutes, h.rmse,
                    h.mae);
    }
  });
}

void add_ablate(CLI::App& app) {
  auto* cmd = app.add_subcommand(
      "ablate",
      "Train and evaluate the component on/off grid (retrieval, context "
      "attention, translation loss) and tabulate errors per horizon");
  auto config_path = std::make_shared<std::string>();
  auto data_path = std::make_shared<std::string>();
  auto summaries = std::make_shared<std::string>();
  auto work = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  cmd->add_option("--config", *config_path, "Base run config JSON")->required();
  cmd->add_option("--data", *data_path, "Cohort CSV")->required();
  cmd->add_option("--summaries", *summaries, "Summary store directory")
      ->required();
  cmd->add_option("--work", *work, "Directory that receives one run per row")
      ->required();
  cmd->add_option("--out", *out, "Ablation table CSV path")->required();
  cmd->callback([=]() {
    const train::TrainConfig cfg = load_config(*config_path);
    const auto raw = data::ingest_csv(*data_path, data::Split::train);
    const train::SummaryStore store(*summaries);
    const auto rows = train::run_ablation_suite(cfg, raw, *work, store);
    train::write_ablation_csv(*out, rows);
    for (const train::AblationRow& r : rows)
      std::printf("%-8s rmse60 %.3f mae60 %.3f\n", r.label.c_str(), r.rmse[2],
                  r.mae[2]);
    std::printf("wrote %zu rows to %s\n", rows.size(), out->c_str());
  });
}

void add_plot(CLI::App& app) {
  auto* cmd = app.add_subcommand(
      "plot",
      "Emit per-window plot-data CSVs (time, reference, prediction, 70/180 "
      "band edges) and static SVG renders");
  auto preds_path = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  auto data_path = std::make_shared<std::string>();
  auto run_dir = std::make_shared<std::string>();
  auto config_path = std::make_shared<std::string>();
  auto limit = std::make_shared<std::size_t>(0);
  cmd->add_option("--predictions", *preds_path, "Predictions CSV (from forecast)")
      ->required();
  cmd->add_option("--out", *out, "Output directory for plot files")->required();
  cmd->add_option("--data", *data_path,
                  "Cohort CSV; adds the observed input trace to each plot");
  cmd->add_option("--run", *run_dir,
                  "Run directory providing the split config (with --data)");
  cmd->add_option("--config", *config_path,
                  "Run config JSON, alternative to --run (with --data)");
  cmd->add_option("--limit", *limit,
                  "Plot only the first N windows (0 = all)")
      ->capture_default_str();
  cmd->callback([=]() {
    auto preds = train::read_predictions_csv(*preds_path);
    if (*limit > 0 && preds.size() > *limit) preds.resize(*limit);

    plot::HistoryMap history;
    if (!data_path->empty()) {
      train::TrainConfig cfg;
      if (!run_dir->empty())
        cfg = train::TrainConfig::from_json(
            train::load_manifest(*run_dir).config);
      else if (!config_path->empty())
        cfg = load_config(*config_path);
      else
        throw Error(ErrorKind::validation,
                    "--data needs --run or --config to reproduce the split");
      const auto raw = data::ingest_csv(*data_path, data::Split::train);
      const train::CohortData cohort = train::prepare(raw, cfg);
      for (const auto* windows : {&cohort.train_windows, &cohort.test_windows})
        for (const data::CgmWindow& w : *windows)
          history.emplace(context::window_ref(w), train::x_array(w));
    }

    const auto plots = plot::build_plots(preds, history);
    plot::write_plots(*out, plots);
    std::printf("plotted %zu windows into %s\n", plots.size(), out->c_str());
  });
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "glyrag — retrieval-augmented blood-glucose forecasting pipeline.\n"
      "Stages compose through files; identical inputs reproduce identical "
      "artifacts byte for byte."};
  app.require_subcommand(1);
  app.footer(kExitCodeHelp);

  add_synth(app);
  add_contextualize(app);
  add_train(app);
  add_forecast(app);
  add_eval(app);
  add_ablate(app);
  add_plot(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: code=%d kind=%s detail=%s\n", e.exit_code(),
                 to_string(e.kind()), e.what());
    return e.exit_code();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: code=1 kind=internal detail=%s\n", e.what());
    return 1;
  }
  return 0;
}
