#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "glyrag/plot.hpp"

using namespace glyrag;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("glyrag_plot_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter()++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

plot::WindowPlot sample_plot(bool with_history) {
  plot::WindowPlot w;
  w.window_ref = "synth-01@2026-03-01T08:00:00Z";
  w.patient_id = "synth-01";
  w.start_time = data::parse_timestamp("2026-03-01T08:00:00Z");
  if (with_history) {
    w.history.resize(data::kInputLen);
    for (std::size_t i = 0; i < w.history.size(); ++i)
      w.history[i] = 120.0 + 0.5 * double(i);
  }
  for (std::size_t s = 0; s < data::kHorizonLen; ++s) {
    w.ref[s] = 140.0 + 2.0 * double(s);
    w.pred[s] = 138.0 + 2.5 * double(s);
  }
  return w;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

std::vector<std::string> cells_of(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.push_back("");
  return cells;
}

} // namespace

TEST_CASE("plot csv lays out history then horizon with constant band edges",
          "[plot]") {
  const plot::WindowPlot w = sample_plot(true);
  const auto lines = lines_of(plot::plot_csv(w));
  REQUIRE(lines.size() == 1 + data::kInputLen + data::kHorizonLen);
  CHECK(lines[0] == plot::kPlotCsvHeader);

  // First history row: window start, -175 minutes, observed value, no
  // prediction.
  auto first = cells_of(lines[1]);
  REQUIRE(first.size() == 6);
  CHECK(first[0] == "2026-03-01T08:00:00Z");
  CHECK(first[1] == "-175");
  CHECK(std::stod(first[2]) == 120.0);
  CHECK(first[3].empty());
  CHECK(first[4] == "70");
  CHECK(first[5] == "180");

  // Last history row is the forecast origin at minute 0.
  auto origin = cells_of(lines[data::kInputLen]);
  CHECK(origin[1] == "0");
  CHECK(std::stod(origin[2]) == 120.0 + 0.5 * 35.0);
  CHECK(origin[3].empty());

  // First horizon row: +5 minutes, both columns filled, 300 s after origin.
  auto h1 = cells_of(lines[data::kInputLen + 1]);
  CHECK(h1[0] == "2026-03-01T11:00:00Z");
  CHECK(h1[1] == "5");
  CHECK(std::stod(h1[2]) == 140.0);
  CHECK(std::stod(h1[3]) == 138.0);

  // Last horizon row: +60 minutes.
  auto h12 = cells_of(lines.back());
  CHECK(h12[1] == "60");
  CHECK(std::stod(h12[2]) == 140.0 + 2.0 * 11.0);
  CHECK(std::stod(h12[3]) == 138.0 + 2.5 * 11.0);

  for (std::size_t i = 1; i < lines.size(); ++i) {
    auto cells = cells_of(lines[i]);
    REQUIRE(cells.size() == 6);
    CHECK(cells[4] == "70");
    CHECK(cells[5] == "180");
  }
}

TEST_CASE("plot csv without history covers the horizon only", "[plot]") {
  const plot::WindowPlot w = sample_plot(false);
  const auto lines = lines_of(plot::plot_csv(w));
  REQUIRE(lines.size() == 1 + data::kHorizonLen);
  CHECK(cells_of(lines[1])[1] == "5");
  CHECK(cells_of(lines.back())[1] == "60");
}

TEST_CASE("plot svg is a self-contained deterministic document", "[plot]") {
  const plot::WindowPlot w = sample_plot(true);
  const std::string svg = plot::plot_svg(w);
  CHECK_THAT(svg, Catch::Matchers::StartsWith("<svg "));
  CHECK_THAT(svg, Catch::Matchers::EndsWith("</svg>\n"));
  // Three series, band rectangle, origin rule, title, legend labels.
  CHECK(svg.find("#1565c0") != std::string::npos);
  CHECK(svg.find("#2e7d32") != std::string::npos);
  CHECK(svg.find("#c62828") != std::string::npos);
  CHECK(svg.find("#e8f4e8") != std::string::npos);
  CHECK(svg.find(w.window_ref) != std::string::npos);
  CHECK(svg.find("observed") != std::string::npos);
  CHECK(svg.find("reference") != std::string::npos);
  CHECK(svg.find("forecast") != std::string::npos);
  CHECK(svg.find("minutes from forecast origin") != std::string::npos);
  // The only URL is the SVG namespace; nothing external is referenced.
  const std::size_t first_http = svg.find("http");
  CHECK(first_http == svg.find("http://www.w3.org/2000/svg"));
  CHECK(svg.find("http", first_http + 1) == std::string::npos);
  CHECK(svg.find("href") == std::string::npos);
  // Deterministic bytes.
  CHECK(plot::plot_svg(sample_plot(true)) == svg);
  // Without history the observed polyline disappears but the document stands.
  const std::string bare = plot::plot_svg(sample_plot(false));
  CHECK(bare.find("#1565c0") == std::string::npos);
  CHECK(bare.find("#c62828") != std::string::npos);
}

TEST_CASE("svg frame scales to cover excursions beyond the band", "[plot]") {
  plot::WindowPlot w = sample_plot(true);
  w.ref[5] = 350.0;
  w.pred[7] = 45.0;
  const plot::detail::Frame f = plot::detail::fit_frame(w);
  CHECK(f.min_y <= 45.0 - 10.0);
  CHECK(f.max_y >= 350.0 + 10.0);
  CHECK(std::fmod(f.min_y, 20.0) == 0.0);
  CHECK(std::fmod(f.max_y, 20.0) == 0.0);
  // Frame maps data corners inside the drawing area.
  CHECK(f.x(f.min_x) == plot::detail::Frame::kLeft);
  CHECK(f.x(f.max_x) == plot::detail::Frame::kRight);
  CHECK(f.y(f.min_y) == plot::detail::Frame::kBottom);
  CHECK(f.y(f.max_y) == plot::detail::Frame::kTop);
}

TEST_CASE("build_plots attaches history by window reference", "[plot]") {
  train::WindowPrediction p;
  p.window_ref = "synth-01@2026-03-01T08:00:00Z";
  p.patient_id = "synth-01";
  p.start_time = data::parse_timestamp("2026-03-01T08:00:00Z");
  for (std::size_t s = 0; s < data::kHorizonLen; ++s) {
    p.ref[s] = 100.0 + double(s);
    p.pred[s] = 99.0 + double(s);
  }
  train::WindowPrediction q = p;
  q.window_ref = "synth-01@2026-03-01T09:00:00Z";
  q.start_time = data::parse_timestamp("2026-03-01T09:00:00Z");

  plot::HistoryMap hist;
  hist[p.window_ref].fill(123.0);

  const auto plots = plot::build_plots({p, q}, hist);
  REQUIRE(plots.size() == 2);
  REQUIRE(plots[0].history.size() == data::kInputLen);
  CHECK(plots[0].history.front() == 123.0);
  CHECK(plots[1].history.empty());
  CHECK(plots[0].ref == p.ref);
  CHECK(plots[0].pred == p.pred);
}

TEST_CASE("write_plots emits a csv and svg pair per window", "[plot]") {
  TempDir tmp;
  const std::vector<plot::WindowPlot> plots = {sample_plot(true),
                                               sample_plot(false)};
  CHECK(plot::write_plots(tmp.path / "plots", plots) == 2);
  const std::string stem0 = plot::file_stem(0, plots[0]);
  const std::string stem1 = plot::file_stem(1, plots[1]);
  CHECK(stem0 == "00000_synth-01_2026-03-01T08_00_00Z");
  CHECK(stem1.rfind("00001_", 0) == 0);
  for (const std::string& stem : {stem0, stem1}) {
    CHECK(std::filesystem::exists(tmp.path / "plots" / (stem + ".csv")));
    CHECK(std::filesystem::exists(tmp.path / "plots" / (stem + ".svg")));
  }
  CHECK(slurp(tmp.path / "plots" / (stem0 + ".csv")) ==
        plot::plot_csv(plots[0]));
  CHECK(slurp(tmp.path / "plots" / (stem0 + ".svg")) ==
        plot::plot_svg(plots[0]));
  // Re-running writes the same bytes (idempotent).
  CHECK(plot::write_plots(tmp.path / "plots", plots) == 2);
  CHECK(slurp(tmp.path / "plots" / (stem1 + ".svg")) ==
        plot::plot_svg(plots[1]));
}
