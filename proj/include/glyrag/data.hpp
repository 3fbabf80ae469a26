#pragma once
// CGM data handling: CSV ingest, gap imputation on the 5-minute grid,
// window extraction with multi-horizon targets, per-patient normalization
// with split provenance, and a deterministic synthetic cohort generator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "glyrag/bands.hpp"
#include "glyrag/error.hpp"

namespace glyrag::data {

constexpr int kSampleSeconds = 300;  // CGM cadence: one reading per 5 minutes
constexpr std::size_t kInputLen = 36;   // 3-hour history window
constexpr std::size_t kHorizonLen = 12; // 60-minute forecast trajectory

enum class Split { train, test };
enum class DeviceMode { regular, sleep, exercise, unknown };
enum class Trend { rising, falling, stable };

inline const char* to_string(Split s) { return s == Split::train ? "train" : "test"; }
inline const char* to_string(DeviceMode m) {
  switch (m) {
    case DeviceMode::regular: return "regular";
    case DeviceMode::sleep: return "sleep";
    case DeviceMode::exercise: return "exercise";
    case DeviceMode::unknown: return "unknown";
  }
  return "unknown";
}
inline const char* to_string(Trend t) {
  switch (t) {
    case Trend::rising: return "rising";
    case Trend::falling: return "falling";
    case Trend::stable: return "stable";
  }
  return "stable";
}

struct CgmRecord {
  std::int64_t timestamp = 0;              // epoch seconds, UTC
  std::optional<double> glucose_mg_dl;     // empty until imputation fills it
  double carbs_g = 0.0;
  double bolus_total_u = 0.0;
  double bolus_food_u = 0.0;
  double bolus_correction_u = 0.0;
  double bolus_other_u = 0.0;
  DeviceMode device_mode = DeviceMode::unknown;
};

// Per-patient z-score statistics. Provenance travels with the numbers so test
// data can never leak into normalization.
struct NormStats {
  std::string patient_id;
  double mean = 0.0;
  double stddev = 0.0;  // population form (divide by n)
  Split fitted_on = Split::train;
};

struct PatientSeries {
  std::string patient_id;
  Split split = Split::train;
  bool imputed = false;
  std::vector<CgmRecord> records;
  // Half-open [begin, end) index ranges of gap-free runs; set by impute_gaps.
  std::vector<std::pair<std::size_t, std::size_t>> segments;
};

struct WindowSummaryFeatures {
  double carbs_30min = 0.0;
  double bolus_total_30min = 0.0;
  double bolus_food_30min = 0.0;
  double bolus_correction_30min = 0.0;
  double bolus_other_30min = 0.0;
  double current_bgl = 0.0;
  double tir_window_pct = 0.0;  // share of the 36 inputs inside [70, 180]
  Trend trend = Trend::stable;
};

struct CgmWindow {
  std::string patient_id;
  Split split = Split::train;
  std::int64_t start_time = 0;          // timestamp of the first input sample
  std::vector<double> x;                // 36 raw mg/dL values
  std::vector<double> trajectory;       // next 12 raw mg/dL values
  double target_5min = 0.0;             // trajectory[0]
  double target_30min = 0.0;            // trajectory[5]
  double target_60min = 0.0;            // trajectory[11]
  WindowSummaryFeatures features;
};

// ── timestamps ───────────────────────────────────────────────────────────────

namespace detail {

// Days since 1970-01-01 for a civil date (Gregorian, proleptic).
inline std::int64_t days_from_civil(int y, int m, int d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153u * static_cast<unsigned>(m + (m > 2 ? -3 : 9)) + 2u) / 5u +
                       static_cast<unsigned>(d) - 1u;
  const unsigned doe = yoe * 365u + yoe / 4u - yoe / 100u + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

inline void civil_from_days(std::int64_t z, int& y, int& m, int& d) {
  z += 719468;
  const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
  const unsigned doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  const std::int64_t yy = static_cast<std::int64_t>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  d = static_cast<int>(doy - (153 * mp + 2) / 5 + 1);
  m = static_cast<int>(mp + (mp < 10 ? 3 : -9));
  y = static_cast<int>(yy + (m <= 2));
}

}  // namespace detail

// Strict ISO 8601 UTC, e.g. 2024-01-01T08:35:00Z.
inline std::int64_t parse_timestamp(const std::string& s) {
  int y, mo, d, h, mi, sec;
  char z;
  if (std::sscanf(s.c_str(), "%4d-%2d-%2dT%2d:%2d:%2d%c", &y, &mo, &d, &h, &mi, &sec,
                  &z) != 7 ||
      z != 'Z' || s.size() != 20 || mo < 1 || mo > 12 || d < 1 || d > 31 || h > 23 ||
      mi > 59 || sec > 60)
    throw Error(ErrorKind::parse, "bad timestamp '" + s + "' (want YYYY-MM-DDTHH:MM:SSZ)");
  return detail::days_from_civil(y, mo, d) * 86400 + h * 3600 + mi * 60 + sec;
}

inline std::string format_timestamp(std::int64_t t) {
  std::int64_t days = t / 86400;
  std::int64_t rem = t % 86400;
  if (rem < 0) {
    rem += 86400;
    days -= 1;
  }
  int y, m, d;
  detail::civil_from_days(days, y, m, d);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d-%02d-%02dT%02d:%02d:%02dZ", y, m, d,
                static_cast<int>(rem / 3600), static_cast<int>((rem % 3600) / 60),
                static_cast<int>(rem % 60));
  return buf;
}

// ── CSV ingest ───────────────────────────────────────────────────────────────

inline const char* kCsvHeader =
    "patient_id,timestamp,glucose_mg_dl,carbs_g,bolus_total_u,bolus_food_u,"
    "bolus_correction_u,bolus_other_u,device_mode";

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::optional<double> parse_number(const std::string& s) {
  if (s.empty()) return std::nullopt;
  std::size_t pos = 0;
  double v;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    throw Error(ErrorKind::parse, "unparsable number '" + s + "'");
  }
  if (pos != s.size() || !std::isfinite(v))
    throw Error(ErrorKind::parse, "unparsable number '" + s + "'");
  return v;
}

inline DeviceMode parse_mode(const std::string& s) {
  if (s == "regular") return DeviceMode::regular;
  if (s == "sleep") return DeviceMode::sleep;
  if (s == "exercise") return DeviceMode::exercise;
  if (s == "unknown") return DeviceMode::unknown;
  throw Error(ErrorKind::parse, "unknown device mode '" + s + "'");
}

}  // namespace detail

// Reads a cohort CSV into per-patient series (sorted by patient id). Glucose
// cells may be empty (gaps); therapy cells must parse. Malformed rows abort
// the ingest with their 1-based row numbers.
inline std::vector<PatientSeries> ingest_csv(const std::string& path, Split split) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path);
  std::string line;
  if (!std::getline(in, line))
    throw Error(ErrorKind::parse, path + ": empty file");
  {
    std::string header = line;
    if (!header.empty() && header.back() == '\r') header.pop_back();
    if (header != kCsvHeader)
      throw Error(ErrorKind::parse, path + ": bad header row");
  }

  std::map<std::string, PatientSeries> by_patient;
  std::vector<std::string> bad_rows;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    try {
      auto cells = detail::split_csv_line(line);
      if (cells.size() != 9)
        throw Error(ErrorKind::parse, "wrong column count");
      CgmRecord r;
      const std::string& pid = cells[0];
      if (pid.empty()) throw Error(ErrorKind::parse, "empty patient_id");
      r.timestamp = parse_timestamp(cells[1]);
      r.glucose_mg_dl = detail::parse_number(cells[2]);
      auto required = [&](const std::string& s) {
        auto v = detail::parse_number(s);
        if (!v) throw Error(ErrorKind::parse, "empty required field");
        return *v;
      };
      r.carbs_g = required(cells[3]);
      r.bolus_total_u = required(cells[4]);
      r.bolus_food_u = required(cells[5]);
      r.bolus_correction_u = required(cells[6]);
      r.bolus_other_u = required(cells[7]);
      r.device_mode = detail::parse_mode(cells[8]);
      auto& series = by_patient[pid];
      series.patient_id = pid;
      series.split = split;
      if (!series.records.empty() && r.timestamp <= series.records.back().timestamp)
        throw Error(ErrorKind::parse, "non-monotone timestamp");
      series.records.push_back(r);
    } catch (const Error& e) {
      bad_rows.push_back("row " + std::to_string(row) + ": " + e.what());
      if (bad_rows.size() >= 10) break;
    }
  }
  if (!bad_rows.empty()) {
    std::string msg = path + ": malformed rows [";
    for (std::size_t i = 0; i < bad_rows.size(); ++i)
      msg += (i ? "; " : "") + bad_rows[i];
    throw Error(ErrorKind::parse, msg + "]");
  }

  std::vector<PatientSeries> out;
  out.reserve(by_patient.size());
  for (auto& [_, s] : by_patient) out.push_back(std::move(s));
  return out;
}

inline void write_cohort_csv(const std::string& path,
                             const std::vector<PatientSeries>& cohort) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path);
  out << kCsvHeader << "\n";
  char buf[256];
  for (const PatientSeries& s : cohort)
    for (const CgmRecord& r : s.records) {
      std::string glucose;
      if (r.glucose_mg_dl) {
        std::snprintf(buf, sizeof(buf), "%.1f", *r.glucose_mg_dl);
        glucose = buf;
      }
      std::snprintf(buf, sizeof(buf), "%.1f,%.2f,%.2f,%.2f,%.2f", r.carbs_g,
                    r.bolus_total_u, r.bolus_food_u, r.bolus_correction_u,
                    r.bolus_other_u);
      out << s.patient_id << ',' << format_timestamp(r.timestamp) << ',' << glucose
          << ',' << buf << ',' << to_string(r.device_mode) << "\n";
    }
  if (!out) throw Error(ErrorKind::io, "write failed for " + path);
}

// ── imputation ───────────────────────────────────────────────────────────────

// Snaps records to the 300-second grid anchored at the first sample, fills
// gaps of at most `max_gap_steps` missing slots (linear interpolation in the
// interior, nearest value at the edges), and splits the series into disjoint
// segments across longer gaps. Slots introduced by filling carry zero therapy
// and unknown device mode.
inline PatientSeries impute_gaps(const PatientSeries& series,
                                 std::size_t max_gap_steps = 6) {
  if (series.records.empty())
    throw Error(ErrorKind::validation, "impute_gaps: empty series");
  const std::int64_t t0 = series.records.front().timestamp;
  std::vector<std::optional<CgmRecord>> slots;
  for (const CgmRecord& r : series.records) {
    const double exact = static_cast<double>(r.timestamp - t0) / kSampleSeconds;
    const std::int64_t k = std::llround(exact);
    if (std::abs(r.timestamp - (t0 + k * kSampleSeconds)) > 60)
      throw Error(ErrorKind::validation,
                  series.patient_id + ": timestamp " + format_timestamp(r.timestamp) +
                      " is off the 300 s grid");
    if (k < 0) throw Error(ErrorKind::validation, "negative grid slot");
    if (static_cast<std::size_t>(k) >= slots.size()) slots.resize(k + 1);
    if (slots[k])
      throw Error(ErrorKind::validation,
                  series.patient_id + ": two records share grid slot " +
                      format_timestamp(t0 + k * kSampleSeconds));
    CgmRecord snapped = r;
    snapped.timestamp = t0 + k * kSampleSeconds;
    slots[k] = snapped;
  }

  const std::size_t n = slots.size();
  auto missing = [&](std::size_t i) {
    return !slots[i] || !slots[i]->glucose_mg_dl;
  };

  PatientSeries out;
  out.patient_id = series.patient_id;
  out.split = series.split;
  out.imputed = true;

  // Walk runs of present/missing slots; fill short gaps, break on long ones.
  std::size_t i = 0;
  std::vector<CgmRecord> cur;  // records of the segment being assembled
  auto flush_segment = [&] {
    if (cur.size() > 0) {
      const std::size_t begin = out.records.size();
      out.records.insert(out.records.end(), cur.begin(), cur.end());
      out.segments.emplace_back(begin, out.records.size());
      cur.clear();
    }
  };
  while (i < n) {
    if (!missing(i)) {
      cur.push_back(*slots[i]);
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < n && missing(j)) ++j;  // missing run [i, j)
    const std::size_t gap = j - i;
    const bool leading = cur.empty();
    const bool trailing = j == n;
    if (gap > max_gap_steps) {
      flush_segment();  // long gap: split; the missing slots vanish
      i = j;
      continue;
    }
    if (leading && trailing) break;  // nothing to anchor on
    const double left = leading ? 0.0 : *cur.back().glucose_mg_dl;
    for (std::size_t k = i; k < j; ++k) {
      CgmRecord filled = slots[k] ? *slots[k] : CgmRecord{};
      filled.timestamp = t0 + static_cast<std::int64_t>(k) * kSampleSeconds;
      if (leading) {
        filled.glucose_mg_dl = *slots[j]->glucose_mg_dl;  // nearest ahead
      } else if (trailing) {
        filled.glucose_mg_dl = left;  // nearest behind
      } else {
        const double right = *slots[j]->glucose_mg_dl;
        const double frac = static_cast<double>(k - i + 1) / static_cast<double>(gap + 1);
        filled.glucose_mg_dl = left + (right - left) * frac;
      }
      cur.push_back(filled);
    }
    i = j;
  }
  flush_segment();
  if (out.records.empty())
    throw Error(ErrorKind::validation,
                series.patient_id + ": no usable samples after imputation");
  return out;
}

// ── windows ──────────────────────────────────────────────────────────────────

namespace detail {

inline WindowSummaryFeatures summarize_window(const std::vector<CgmRecord>& recs,
                                              std::size_t start) {
  WindowSummaryFeatures f;
  // Therapy aggregates over the final 30 minutes = last 6 samples.
  for (std::size_t k = kInputLen - 6; k < kInputLen; ++k) {
    const CgmRecord& r = recs[start + k];
    f.carbs_30min += r.carbs_g;
    f.bolus_total_30min += r.bolus_total_u;
    f.bolus_food_30min += r.bolus_food_u;
    f.bolus_correction_30min += r.bolus_correction_u;
    f.bolus_other_30min += r.bolus_other_u;
  }
  const double last = *recs[start + kInputLen - 1].glucose_mg_dl;
  const double back30 = *recs[start + kInputLen - 7].glucose_mg_dl;
  f.current_bgl = last;
  const double diff = last - back30;
  f.trend = diff > 10.0 ? Trend::rising : (diff < -10.0 ? Trend::falling : Trend::stable);
  std::size_t in = 0;
  for (std::size_t k = 0; k < kInputLen; ++k)
    if (in_range(*recs[start + k].glucose_mg_dl)) ++in;
  f.tir_window_pct = 100.0 * static_cast<double>(in) / static_cast<double>(kInputLen);
  return f;
}

}  // namespace detail

// Sliding windows of 36 inputs plus a 12-step target trajectory; windows never
// span a segment boundary. Targets stay in raw mg/dL.
inline std::vector<CgmWindow> make_windows(const PatientSeries& series,
                                           std::size_t stride = 1) {
  if (!series.imputed)
    throw Error(ErrorKind::validation, "make_windows: run impute_gaps first");
  if (stride == 0) throw Error(ErrorKind::validation, "make_windows: stride 0");
  std::vector<CgmWindow> out;
  const std::size_t need = kInputLen + kHorizonLen;
  for (const auto& [seg_begin, seg_end] : series.segments) {
    if (seg_end - seg_begin < need) continue;
    for (std::size_t start = seg_begin; start + need <= seg_end; start += stride) {
      CgmWindow w;
      w.patient_id = series.patient_id;
      w.split = series.split;
      w.start_time = series.records[start].timestamp;
      w.x.reserve(kInputLen);
      for (std::size_t k = 0; k < kInputLen; ++k)
        w.x.push_back(*series.records[start + k].glucose_mg_dl);
      w.trajectory.reserve(kHorizonLen);
      for (std::size_t k = 0; k < kHorizonLen; ++k)
        w.trajectory.push_back(*series.records[start + kInputLen + k].glucose_mg_dl);
      w.target_5min = w.trajectory[0];
      w.target_30min = w.trajectory[5];
      w.target_60min = w.trajectory[11];
      w.features = detail::summarize_window(series.records, start);
      out.push_back(std::move(w));
    }
  }
  return out;
}

// ── normalization ────────────────────────────────────────────────────────────

// Population z-score statistics over every sample of a training-split series.
inline NormStats fit_norm(const PatientSeries& series) {
  if (series.split != Split::train)
    throw Error(ErrorKind::validation,
                "fit_norm: refusing to fit statistics on a non-train split");
  if (!series.imputed)
    throw Error(ErrorKind::validation, "fit_norm: run impute_gaps first");
  if (series.records.empty())
    throw Error(ErrorKind::validation, "fit_norm: empty series");
  double sum = 0.0;
  for (const CgmRecord& r : series.records) sum += *r.glucose_mg_dl;
  const double n = static_cast<double>(series.records.size());
  const double mean = sum / n;
  double ss = 0.0;
  for (const CgmRecord& r : series.records) {
    const double d = *r.glucose_mg_dl - mean;
    ss += d * d;
  }
  NormStats stats;
  stats.patient_id = series.patient_id;
  stats.mean = mean;
  stats.stddev = std::sqrt(ss / n);
  stats.fitted_on = series.split;
  if (stats.stddev == 0.0)
    throw Error(ErrorKind::validation,
                "fit_norm: flat series (zero standard deviation) for " +
                    series.patient_id);
  return stats;
}

inline std::vector<double> normalize(const std::vector<double>& x,
                                     const NormStats& stats) {
  if (stats.fitted_on != Split::train)
    throw Error(ErrorKind::validation,
                "normalize: statistics were not fitted on the training split");
  std::vector<double> out;
  out.reserve(x.size());
  for (double v : x) out.push_back((v - stats.mean) / stats.stddev);
  return out;
}

inline std::vector<double> denormalize(const std::vector<double>& z,
                                       const NormStats& stats) {
  if (stats.fitted_on != Split::train)
    throw Error(ErrorKind::validation,
                "denormalize: statistics were not fitted on the training split");
  std::vector<double> out;
  out.reserve(z.size());
  for (double v : z) out.push_back(v * stats.stddev + stats.mean);
  return out;
}

// Chronological split of a raw (pre-imputation) series: the last
// `test_fraction` of records become the test part.
inline std::pair<PatientSeries, PatientSeries> split_series(const PatientSeries& series,
                                                            double test_fraction) {
  if (test_fraction <= 0.0 || test_fraction >= 1.0)
    throw Error(ErrorKind::validation, "split_series: fraction must be in (0, 1)");
  if (series.imputed)
    throw Error(ErrorKind::validation, "split_series: split before imputation");
  const std::size_t n = series.records.size();
  const auto cut = static_cast<std::size_t>(
      std::llround(static_cast<double>(n) * (1.0 - test_fraction)));
  if (cut == 0 || cut >= n)
    throw Error(ErrorKind::validation, "split_series: split leaves an empty side");
  PatientSeries train, test;
  train.patient_id = test.patient_id = series.patient_id;
  train.split = Split::train;
  test.split = Split::test;
  train.records.assign(series.records.begin(), series.records.begin() + cut);
  test.records.assign(series.records.begin() + cut, series.records.end());
  return {std::move(train), std::move(test)};
}

// ── synthetic cohort ─────────────────────────────────────────────────────────

// Deterministic type-1-diabetes-flavored cohort. Each patient gets a basal
// level, three daily meal archetypes with lagged carbohydrate excursions and
// (partially matched) food boluses, automatic correction boluses above
// 250 mg/dL, occasional overnight dips below 70 mg/dL, and Gaussian sensor
// noise. Values clamp to [40, 400]. Identical seeds give identical cohorts.
struct SynthConfig {
  std::size_t n_patients = 4;
  std::size_t days = 10;
  std::uint64_t seed = 0;
};

namespace detail {

struct Bump {  // piecewise effect: linear rise to `peak` over rise_min, then exp decay
  double t_min = 0.0;   // onset, minutes from series start
  double peak = 0.0;    // signed amplitude, mg/dL
  double rise_min = 30.0;
  double decay_min = 60.0;

  double at(double now_min) const {
    const double dt = now_min - t_min;
    if (dt < 0.0) return 0.0;
    if (dt <= rise_min) return peak * dt / rise_min;
    const double tail = std::exp(-(dt - rise_min) / decay_min);
    return (tail < 1e-4) ? 0.0 : peak * tail;
  }
};

}  // namespace detail

inline std::vector<PatientSeries> generate_synthetic_cohort(const SynthConfig& cfg) {
  if (cfg.n_patients == 0 || cfg.days == 0)
    throw Error(ErrorKind::validation, "synthetic cohort: need patients and days");
  const std::int64_t start_time = parse_timestamp("2024-01-01T00:00:00Z");
  const std::size_t per_day = 86400 / kSampleSeconds;
  const std::size_t n = per_day * cfg.days;

  std::vector<PatientSeries> cohort;
  for (std::size_t p = 0; p < cfg.n_patients; ++p) {
    std::seed_seq seq{static_cast<std::uint64_t>(cfg.seed),
                      static_cast<std::uint64_t>(p) + 1};
    std::mt19937_64 rng(seq);
    auto uni = [&](double lo, double hi) {
      return std::uniform_real_distribution<double>(lo, hi)(rng);
    };

    const double basal = uni(110.0, 150.0);
    const double carb_factor = uni(3.0, 3.8);       // mg/dL per gram
    const double correction_factor = uni(35.0, 45.0);  // mg/dL per unit
    const double carb_ratio = uni(8.0, 12.0);       // grams per unit
    const double meal_carbs[3] = {uni(30.0, 55.0), uni(40.0, 75.0), uni(45.0, 85.0)};
    const double meal_hours[3] = {8.0, 13.0, 19.0};

    struct Therapy {
      std::size_t slot;
      double carbs = 0.0, food_u = 0.0, correction_u = 0.0;
    };
    std::vector<Therapy> therapy;
    std::vector<detail::Bump> bumps;

    for (std::size_t day = 0; day < cfg.days; ++day) {
      for (int m = 0; m < 3; ++m) {
        const double hour = meal_hours[m] + uni(-0.5, 0.5);
        const double t_min = (static_cast<double>(day) * 24.0 + hour) * 60.0;
        const double carbs = meal_carbs[m] * uni(0.9, 1.1);
        const double food_u = carbs / carb_ratio;
        const double match = uni(0.45, 0.65);  // imperfect carb coverage
        bumps.push_back({t_min, carbs * carb_factor, uni(30.0, 60.0), uni(50.0, 75.0)});
        // Insulin effect is expressed as a fraction of the carb excursion it
        // counteracts, so a bolus can blunt a meal but never invert it into a
        // deep trough on its own.
        bumps.push_back({t_min + 10.0, -match * carbs * carb_factor,
                         uni(60.0, 80.0), uni(60.0, 90.0)});
        Therapy th;
        th.slot = static_cast<std::size_t>(t_min / 5.0);
        th.carbs = carbs;
        th.food_u = food_u;
        therapy.push_back(th);
      }
      if (uni(0.0, 1.0) < 0.6) {  // overnight dip
        const double t_min = (static_cast<double>(day) * 24.0 + uni(2.0, 4.0)) * 60.0;
        const double depth = basal - uni(55.0, 65.0);
        bumps.push_back({t_min, -depth, uni(40.0, 60.0), uni(35.0, 55.0)});
      }
      if (uni(0.0, 1.0) < 0.35) {  // unlogged snack: no carb entry, no bolus,
                                   // slow absorption sustains the excursion
        const double t_min = (static_cast<double>(day) * 24.0 + uni(10.0, 22.0)) * 60.0;
        bumps.push_back({t_min, uni(20.0, 40.0) * carb_factor, uni(20.0, 40.0),
                         uni(150.0, 240.0)});
      }
    }

    // Base curve (no corrections yet).
    std::vector<double> base(n, basal);
    for (const detail::Bump& b : bumps)
      for (std::size_t k = 0; k < n; ++k) base[k] += b.at(static_cast<double>(k) * 5.0);

    // Walk forward triggering correction boluses on the pre-noise value.
    std::vector<detail::Bump> corrections;
    std::map<std::size_t, double> correction_units;
    double last_correction_min = -1e9;
    auto value_at = [&](double t_min) {
      const std::size_t k = std::min(
          n - 1, static_cast<std::size_t>(std::max(0.0, t_min) / 5.0));
      double v = base[k];
      for (const detail::Bump& c : corrections) v += c.at(t_min);
      return v;
    };
    for (std::size_t k = 0; k < n; ++k) {
      const double now_min = static_cast<double>(k) * 5.0;
      if (value_at(now_min) <= 250.0 ||
          now_min - last_correction_min < 150.0)
        continue;
      // Dose against the value projected at the bolus's own peak time, not
      // the instantaneous reading: meal excursions largely self-resolve
      // before the insulin takes full effect, and dosing off the transient
      // peak would over-correct into hypoglycemia.
      const double rise = uni(60.0, 80.0), decay = uni(60.0, 90.0);
      const double projected = value_at(now_min + 5.0 + rise);
      if (projected > 180.0) {
        const double units = (projected - 160.0) / correction_factor;
        corrections.push_back({now_min + 5.0, -units * correction_factor * 0.8,
                               rise, decay});
        correction_units[k] += units;
        last_correction_min = now_min;
      }
    }

    std::normal_distribution<double> noise(0.0, 5.0);
    PatientSeries s;
    char pid[16];
    std::snprintf(pid, sizeof(pid), "P%03zu", p);
    s.patient_id = pid;
    s.records.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
      const double now_min = static_cast<double>(k) * 5.0;
      double v = base[k];
      for (const detail::Bump& c : corrections) v += c.at(now_min);
      v += noise(rng);
      v = std::clamp(v, 40.0, 400.0);
      CgmRecord r;
      r.timestamp = start_time + static_cast<std::int64_t>(k) * kSampleSeconds;
      r.glucose_mg_dl = v;
      const double hour_of_day = std::fmod(now_min / 60.0, 24.0);
      r.device_mode = (hour_of_day >= 23.0 || hour_of_day < 7.0) ? DeviceMode::sleep
                                                                 : DeviceMode::regular;
      s.records.push_back(r);
    }
    for (const auto& th : therapy) {
      if (th.slot >= n) continue;
      CgmRecord& r = s.records[th.slot];
      r.carbs_g += th.carbs;
      r.bolus_food_u += th.food_u;
    }
    for (const auto& [slot, units] : correction_units)
      if (slot < n) s.records[slot].bolus_correction_u += units;
    for (CgmRecord& r : s.records)
      r.bolus_total_u = r.bolus_food_u + r.bolus_correction_u + r.bolus_other_u;
    cohort.push_back(std::move(s));
  }
  return cohort;
}

}  // namespace glyrag::data
