#pragma once
// Forecast visualization. Each predicted window becomes a pair of files: a
// plot-data CSV (absolute time, minutes from the forecast origin, reference
// and predicted glucose, and the 70/180 mg/dL target-band edges) and a static
// SVG rendering of the same rows — observed history, reference continuation,
// and forecast over a shaded target band. Output is plain deterministic text:
// same inputs, same bytes.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "glyrag/data.hpp"
#include "glyrag/error.hpp"
#include "glyrag/trainer.hpp"

namespace glyrag::plot {

inline constexpr double kBandLow = 70.0;   // hypoglycemia edge, mg/dL
inline constexpr double kBandHigh = 180.0; // hyperglycemia edge, mg/dL

// One window ready to draw. `start_time` is the epoch-second timestamp of the
// first input sample; the forecast origin is the last input sample, 175
// minutes later, and horizon step s sits at +5·s minutes from the origin.
// `history` holds the observed input trace in mg/dL and may be empty when the
// caller has predictions only.
struct WindowPlot {
  std::string window_ref;
  std::string patient_id;
  std::int64_t start_time = 0;
  std::vector<double> history;
  std::array<double, data::kHorizonLen> ref{};
  std::array<double, data::kHorizonLen> pred{};
};

using HistoryMap = std::map<std::string, std::array<double, data::kInputLen>>;

// Pairs predictions with their observed input traces, matched by window_ref.
// Windows absent from `history` plot the forecast horizon only.
inline std::vector<WindowPlot> build_plots(
    const std::vector<train::WindowPrediction>& preds,
    const HistoryMap& history = {}) {
  std::vector<WindowPlot> plots;
  plots.reserve(preds.size());
  for (const train::WindowPrediction& p : preds) {
    WindowPlot w;
    w.window_ref = p.window_ref;
    w.patient_id = p.patient_id;
    w.start_time = p.start_time;
    w.ref = p.ref;
    w.pred = p.pred;
    if (auto it = history.find(p.window_ref); it != history.end())
      w.history.assign(it->second.begin(), it->second.end());
    plots.push_back(std::move(w));
  }
  return plots;
}

namespace detail {

inline std::int64_t origin_time(const WindowPlot& w) {
  return w.start_time +
         std::int64_t(data::kInputLen - 1) * data::kSampleSeconds;
}

inline std::string fmt2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

inline std::string fmt_int(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.0f", v);
  return buf;
}

} // namespace detail

// Plot-data CSV. History rows carry the observed value in the reference
// column and an empty prediction cell; horizon rows carry ground truth and
// the model output. The band columns repeat the 70/180 edges so the file is
// self-contained for downstream plotting tools.
inline constexpr const char* kPlotCsvHeader =
    "time,minutes,ref_mg_dl,pred_mg_dl,band_lo_mg_dl,band_hi_mg_dl";

inline std::string plot_csv(const WindowPlot& w) {
  std::string text = kPlotCsvHeader;
  text += '\n';
  const std::int64_t origin = detail::origin_time(w);
  auto row = [&](std::int64_t t, int minutes, const std::string& ref,
                 const std::string& pred) {
    text += data::format_timestamp(t);
    text += ',';
    text += std::to_string(minutes);
    text += ',';
    text += ref;
    text += ',';
    text += pred;
    text += ",70,180\n";
  };
  for (std::size_t i = 0; i < w.history.size(); ++i) {
    const std::int64_t t =
        w.start_time + std::int64_t(i) * data::kSampleSeconds;
    row(t, int((t - origin) / 60), train::detail::fmt_g17(w.history[i]), "");
  }
  for (std::size_t s = 1; s <= data::kHorizonLen; ++s) {
    row(origin + std::int64_t(s) * data::kSampleSeconds, int(5 * s),
        train::detail::fmt_g17(w.ref[s - 1]),
        train::detail::fmt_g17(w.pred[s - 1]));
  }
  return text;
}

namespace detail {

struct Frame {
  double min_x, max_x; // minutes from the forecast origin
  double min_y, max_y; // mg/dL
  static constexpr double kLeft = 64.0, kRight = 684.0;
  static constexpr double kTop = 52.0, kBottom = 368.0;
  double x(double minutes) const {
    return kLeft + (minutes - min_x) / (max_x - min_x) * (kRight - kLeft);
  }
  double y(double mg_dl) const {
    return kBottom - (mg_dl - min_y) / (max_y - min_y) * (kBottom - kTop);
  }
};

inline Frame fit_frame(const WindowPlot& w) {
  Frame f{};
  f.min_x = w.history.empty() ? 0.0 : -5.0 * double(w.history.size() - 1);
  f.max_x = 5.0 * double(data::kHorizonLen);
  double lo = kBandLow, hi = kBandHigh;
  auto widen = [&](double v) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  };
  for (double v : w.history) widen(v);
  for (double v : w.ref) widen(v);
  for (double v : w.pred) widen(v);
  // Round outward to 20 mg/dL so tick values stay clean and deterministic.
  f.min_y = std::floor((lo - 10.0) / 20.0) * 20.0;
  f.max_y = std::ceil((hi + 10.0) / 20.0) * 20.0;
  return f;
}

inline void append_polyline(std::string& svg, const Frame& f,
                            const std::vector<std::pair<double, double>>& pts,
                            const char* stroke, bool dashed) {
  if (pts.size() < 2) return;
  svg += "<polyline fill=\"none\" stroke=\"";
  svg += stroke;
  svg += "\" stroke-width=\"2\"";
  if (dashed) svg += " stroke-dasharray=\"6 4\"";
  svg += " points=\"";
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (i) svg += ' ';
    svg += fmt2(f.x(pts[i].first));
    svg += ',';
    svg += fmt2(f.y(pts[i].second));
  }
  svg += "\"/>\n";
}

inline void append_text(std::string& svg, double x, double y,
                        const std::string& body, const char* anchor = "start",
                        int size = 12) {
  svg += "<text x=\"" + fmt2(x) + "\" y=\"" + fmt2(y) + "\" font-size=\"" +
         std::to_string(size) +
         "\" font-family=\"sans-serif\" fill=\"#333\" text-anchor=\"";
  svg += anchor;
  svg += "\">" + body + "</text>\n";
}

} // namespace detail

// Static SVG: shaded 70–180 band, observed history (blue), reference
// continuation (green), forecast (dashed red), with a vertical rule at the
// forecast origin. Pure text, no external resources.
inline std::string plot_svg(const WindowPlot& w) {
  using detail::append_polyline;
  using detail::append_text;
  using detail::fmt2;
  const detail::Frame f = detail::fit_frame(w);

  std::string svg =
      "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 720 420\" "
      "width=\"720\" height=\"420\">\n"
      "<rect x=\"0\" y=\"0\" width=\"720\" height=\"420\" fill=\"#ffffff\"/>\n";

  // Target band and plot frame.
  svg += "<rect x=\"" + fmt2(detail::Frame::kLeft) + "\" y=\"" +
         fmt2(f.y(kBandHigh)) + "\" width=\"" +
         fmt2(detail::Frame::kRight - detail::Frame::kLeft) + "\" height=\"" +
         fmt2(f.y(kBandLow) - f.y(kBandHigh)) + "\" fill=\"#e8f4e8\"/>\n";
  svg += "<rect x=\"" + fmt2(detail::Frame::kLeft) + "\" y=\"" +
         fmt2(detail::Frame::kTop) + "\" width=\"" +
         fmt2(detail::Frame::kRight - detail::Frame::kLeft) + "\" height=\"" +
         fmt2(detail::Frame::kBottom - detail::Frame::kTop) +
         "\" fill=\"none\" stroke=\"#999\"/>\n";

  // Horizontal guides at the band edges and vertical rule at the origin.
  for (double edge : {kBandLow, kBandHigh}) {
    svg += "<line x1=\"" + fmt2(detail::Frame::kLeft) + "\" y1=\"" +
           fmt2(f.y(edge)) + "\" x2=\"" + fmt2(detail::Frame::kRight) +
           "\" y2=\"" + fmt2(f.y(edge)) +
           "\" stroke=\"#7cb37c\" stroke-dasharray=\"2 3\"/>\n";
    append_text(svg, detail::Frame::kLeft - 6.0, f.y(edge) + 4.0,
                detail::fmt_int(edge), "end");
  }
  svg += "<line x1=\"" + fmt2(f.x(0.0)) + "\" y1=\"" +
         fmt2(detail::Frame::kTop) + "\" x2=\"" + fmt2(f.x(0.0)) +
         "\" y2=\"" + fmt2(detail::Frame::kBottom) +
         "\" stroke=\"#666\" stroke-dasharray=\"4 4\"/>\n";

  // Axis ticks: y every 40 mg/dL, x every 30 minutes.
  for (double v = f.min_y; v <= f.max_y + 1e-9; v += 40.0) {
    append_text(svg, detail::Frame::kLeft - 6.0, f.y(v) + 4.0,
                detail::fmt_int(v), "end", 11);
  }
  const double first_tick = std::ceil(f.min_x / 30.0) * 30.0;
  for (double m = first_tick; m <= f.max_x + 1e-9; m += 30.0) {
    svg += "<line x1=\"" + fmt2(f.x(m)) + "\" y1=\"" +
           fmt2(detail::Frame::kBottom) + "\" x2=\"" + fmt2(f.x(m)) +
           "\" y2=\"" + fmt2(detail::Frame::kBottom + 5.0) +
           "\" stroke=\"#999\"/>\n";
    append_text(svg, f.x(m), detail::Frame::kBottom + 18.0,
                detail::fmt_int(m), "middle", 11);
  }
  append_text(svg, (detail::Frame::kLeft + detail::Frame::kRight) / 2.0, 404.0,
              "minutes from forecast origin", "middle");
  append_text(svg, 16.0, 30.0, w.window_ref + "  (glucose, mg/dL)", "start",
              14);

  // Series. The horizon traces start at the origin sample when history is
  // available so the curves connect visually.
  std::vector<std::pair<double, double>> pts;
  for (std::size_t i = 0; i < w.history.size(); ++i)
    pts.emplace_back(-5.0 * double(w.history.size() - 1 - i), w.history[i]);
  append_polyline(svg, f, pts, "#1565c0", false);

  std::vector<std::pair<double, double>> ref_pts, pred_pts;
  if (!w.history.empty()) {
    ref_pts.emplace_back(0.0, w.history.back());
    pred_pts.emplace_back(0.0, w.history.back());
  }
  for (std::size_t s = 1; s <= data::kHorizonLen; ++s) {
    ref_pts.emplace_back(5.0 * double(s), w.ref[s - 1]);
    pred_pts.emplace_back(5.0 * double(s), w.pred[s - 1]);
  }
  append_polyline(svg, f, ref_pts, "#2e7d32", false);
  append_polyline(svg, f, pred_pts, "#c62828", true);

  // Legend covers exactly the drawn series.
  struct Entry {
    const char* color;
    bool dashed;
    const char* label;
  };
  std::vector<Entry> entries;
  if (!w.history.empty()) entries.push_back({"#1565c0", false, "observed"});
  entries.push_back({"#2e7d32", false, "reference"});
  entries.push_back({"#c62828", true, "forecast"});
  double ly = 46.0;
  for (const Entry& e : entries) {
    svg += "<line x1=\"560\" y1=\"" + fmt2(ly) + "\" x2=\"592\" y2=\"" +
           fmt2(ly) + "\" stroke=\"";
    svg += e.color;
    svg += "\" stroke-width=\"2\"";
    if (e.dashed) svg += " stroke-dasharray=\"6 4\"";
    svg += "/>\n";
    append_text(svg, 598.0, ly + 4.0, e.label, "start", 11);
    ly += 16.0;
  }

  svg += "</svg>\n";
  return svg;
}

// File naming: a zero-padded position index keeps names unique and ordered
// even if reference sanitization collides; the sanitized window_ref keeps
// them human-readable.
inline std::string file_stem(std::size_t index, const WindowPlot& w) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%05zu", index);
  std::string stem = buf;
  stem += '_';
  for (char c : w.window_ref) {
    const bool keep = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                      (c >= '0' && c <= '9') || c == '-' || c == '_';
    stem += keep ? c : '_';
  }
  return stem;
}

// Writes <stem>.csv and <stem>.svg per window into `dir` (created if needed)
// and returns the number of windows written. Files land atomically.
inline std::size_t write_plots(const std::filesystem::path& dir,
                               const std::vector<WindowPlot>& plots) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec)
    throw Error(ErrorKind::io, "cannot create " + dir.string() + ": " +
                                   ec.message());
  for (std::size_t i = 0; i < plots.size(); ++i) {
    const std::string stem = file_stem(i, plots[i]);
    train::detail::write_text_atomic(dir / (stem + ".csv"),
                                     plot_csv(plots[i]));
    train::detail::write_text_atomic(dir / (stem + ".svg"),
                                     plot_svg(plots[i]));
  }
  return plots.size();
}

} // namespace glyrag::plot
