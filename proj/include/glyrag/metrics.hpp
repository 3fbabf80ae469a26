#pragma once

// Forecast evaluation: pointwise error metrics, the Clarke error grid, the
// continuous (point + rate) error grid with per-band clinical categories,
// time-in-range statistics, and dysglycemia event sensitivities.
//
// The zone inequalities implemented here transcribe the classical grids:
// the five-zone point grid of Clarke et al. (Diabetes Care 10(5), 1987) and
// its continuous extension with rate grids and per-band combination matrices
// by Kovatchev et al. (Diabetes Care 27(8), 2004). The same inequality sets
// ship as decision-table CSV files under data/ (clarke_zones.csv,
// p_ega_zones.csv, r_ega_zones.csv, cg_ega_{hypo,eu,hyper}.csv); those files
// are the reviewable source of truth, and the test suite checks this code
// against an independent interpreter of the tables over dense input lattices.
//
// Conventions fixed here:
//  * bands: hypo ref <= 70, eu 70 < ref < 180, hyper ref >= 180 (mg/dL);
//  * time-in-range counts 70 <= v <= 180 inclusive on both ends;
//  * rates are per-minute differences over the 5-minute sampling step,
//    clamped to [-4, 4] mg/dL/min (the rate grid's plotted extent);
//  * the first point of a series has no rate and is skipped by the
//    continuous grid;
//  * zone predicates are evaluated in priority order A, E, C, D with B as
//    the remainder, which makes classification total and unambiguous;
//  * correlation of a constant series is undefined and reported as such,
//    never as zero.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "glyrag/error.hpp"

namespace glyrag::metrics {

// ── paired series ────────────────────────────────────────────────────────────

struct PairedSeries {
  std::vector<double> ref;   // observed mg/dL
  std::vector<double> pred;  // forecast mg/dL
  double interval_s = 300.0; // spacing between consecutive points

  // Structural check used by every metric.
  void check_lengths(std::size_t min_len) const {
    if (ref.size() != pred.size())
      throw Error(ErrorKind::validation,
                  "paired series length mismatch: " +
                      std::to_string(ref.size()) + " vs " +
                      std::to_string(pred.size()));
    if (ref.size() < min_len)
      throw Error(ErrorKind::validation,
                  "paired series too short: need at least " +
                      std::to_string(min_len) + " points");
    if (interval_s <= 0.0)
      throw Error(ErrorKind::validation, "sampling interval must be positive");
  }

  // Guard band for the clinical grids, which are undefined far outside
  // physiologic range.
  void check_range() const {
    for (const auto* s : {&ref, &pred})
      for (double v : *s)
        if (!std::isfinite(v) || v < 1.0 || v > 1000.0)
          throw Error(ErrorKind::validation,
                      "glucose value outside the 1..1000 mg/dL guard band: " +
                          std::to_string(v));
  }
};

// ── error metrics ────────────────────────────────────────────────────────────

inline double rmse(const PairedSeries& p) {
  p.check_lengths(1);
  double acc = 0.0;
  for (std::size_t i = 0; i < p.ref.size(); ++i) {
    const double d = p.pred[i] - p.ref[i];
    acc += d * d;
  }
  return std::sqrt(acc / double(p.ref.size()));
}

inline double mae(const PairedSeries& p) {
  p.check_lengths(1);
  double acc = 0.0;
  for (std::size_t i = 0; i < p.ref.size(); ++i)
    acc += std::abs(p.pred[i] - p.ref[i]);
  return acc / double(p.ref.size());
}

struct PearsonResult {
  double r = 0.0;
  bool defined = false;  // false when either series is constant
};

inline PearsonResult pearson(const PairedSeries& p) {
  p.check_lengths(1);
  const std::size_t n = p.ref.size();
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += p.ref[i];
    my += p.pred[i];
  }
  mx /= double(n);
  my /= double(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = p.ref[i] - mx, dy = p.pred[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) return {0.0, false};
  return {sxy / std::sqrt(sxx * syy), true};
}

// ── glycemic bands and time in range ─────────────────────────────────────────

inline constexpr double kHypoThreshold = 70.0;
inline constexpr double kHyperThreshold = 180.0;

enum class Band { hypo, eu, hyper };

inline const char* to_string(Band b) {
  switch (b) {
    case Band::hypo: return "hypo";
    case Band::eu: return "eu";
    case Band::hyper: return "hyper";
  }
  return "?";
}

inline Band band_of(double ref) {
  if (ref <= kHypoThreshold) return Band::hypo;
  if (ref >= kHyperThreshold) return Band::hyper;
  return Band::eu;
}

inline double tir(const std::vector<double>& series) {
  if (series.empty())
    throw Error(ErrorKind::validation, "time-in-range of an empty series");
  std::size_t in = 0;
  for (double v : series)
    if (v >= kHypoThreshold && v <= kHyperThreshold) ++in;
  return 100.0 * double(in) / double(series.size());
}

inline double tir_deviation(const PairedSeries& p) {
  p.check_lengths(1);
  return std::abs(tir(p.ref) - tir(p.pred));
}

// ── event sensitivity ────────────────────────────────────────────────────────

struct Sensitivity {
  double percent = 0.0;
  std::size_t positives = 0;  // reference points in the band
  bool defined = false;       // false when the band never occurs
};

// Pointwise: of the reference points in the band, the fraction whose
// prediction lands in the same band.
inline Sensitivity event_sensitivity(const PairedSeries& p, Band band) {
  p.check_lengths(1);
  if (band == Band::eu)
    throw Error(ErrorKind::validation,
                "event sensitivity is defined for the hypo and hyper bands");
  std::size_t positives = 0, hits = 0;
  for (std::size_t i = 0; i < p.ref.size(); ++i) {
    const bool ref_in = (band == Band::hypo) ? p.ref[i] <= kHypoThreshold
                                             : p.ref[i] >= kHyperThreshold;
    if (!ref_in) continue;
    ++positives;
    const bool pred_in = (band == Band::hypo) ? p.pred[i] <= kHypoThreshold
                                              : p.pred[i] >= kHyperThreshold;
    if (pred_in) ++hits;
  }
  if (positives == 0) return {0.0, 0, false};
  return {100.0 * double(hits) / double(positives), positives, true};
}

// ── point error grid ─────────────────────────────────────────────────────────

enum class ClarkeZone { A, B, C, D, E };

inline const char* to_string(ClarkeZone z) {
  switch (z) {
    case ClarkeZone::A: return "A";
    case ClarkeZone::B: return "B";
    case ClarkeZone::C: return "C";
    case ClarkeZone::D: return "D";
    case ClarkeZone::E: return "E";
  }
  return "?";
}

// Priority A, E, C, D, else B — mirrors data/clarke_zones.csv row order.
inline ClarkeZone clarke_zone(double ref, double pred) {
  if (!std::isfinite(ref) || !std::isfinite(pred) || ref <= 0.0 || pred <= 0.0)
    throw Error(ErrorKind::validation,
                "point grid needs positive finite glucose values");
  if (std::abs(pred - ref) <= 0.2 * ref) return ClarkeZone::A;
  if (ref < 70.0 && pred < 70.0) return ClarkeZone::A;
  if (ref >= 180.0 && pred <= 70.0) return ClarkeZone::E;
  if (ref <= 70.0 && pred >= 180.0) return ClarkeZone::E;
  if (ref > 70.0 && pred >= ref + 110.0) return ClarkeZone::C;
  if (ref >= 130.0 && ref <= 180.0 && pred < 1.4 * ref - 182.0)
    return ClarkeZone::C;
  if (ref > 240.0 && pred >= 70.0 && pred <= 180.0) return ClarkeZone::D;
  if (ref < 70.0 && pred >= 70.0 && pred <= 180.0) return ClarkeZone::D;
  return ClarkeZone::B;
}

struct ClarkeReport {
  std::array<std::size_t, 5> counts{};   // indexed by ClarkeZone
  std::array<double, 5> percent{};
  std::size_t total = 0;

  double zone_percent(ClarkeZone z) const {
    return percent[static_cast<std::size_t>(z)];
  }
  nlohmann::json to_json() const {
    nlohmann::json j;
    for (int z = 0; z < 5; ++z)
      j[to_string(static_cast<ClarkeZone>(z))] = percent[std::size_t(z)];
    return j;
  }
};

inline ClarkeReport clarke(const PairedSeries& p) {
  p.check_lengths(1);
  p.check_range();
  ClarkeReport rep;
  for (std::size_t i = 0; i < p.ref.size(); ++i)
    ++rep.counts[static_cast<std::size_t>(clarke_zone(p.ref[i], p.pred[i]))];
  rep.total = p.ref.size();
  for (int z = 0; z < 5; ++z)
    rep.percent[std::size_t(z)] =
        100.0 * double(rep.counts[std::size_t(z)]) / double(rep.total);
  return rep;
}

// ── continuous error grid ────────────────────────────────────────────────────

inline constexpr double kRateClamp = 4.0;  // mg/dL/min, grid extent

// Boundary expansions of the point grid's A and B zones as a function of the
// reference rate: a falling reference raises the upper limits, a rising
// reference lowers the lower limits (10 for moderate, 20 for rapid change).
struct PEgaMods {
  double mu = 0.0;  // added to upper limits
  double ml = 0.0;  // subtracted from lower limits
};

inline PEgaMods p_ega_mods(double ref_rate) {
  PEgaMods m;
  if (ref_rate < -2.0)
    m.mu = 20.0;
  else if (ref_rate <= -1.0)
    m.mu = 10.0;
  if (ref_rate > 2.0)
    m.ml = 20.0;
  else if (ref_rate >= 1.0)
    m.ml = 10.0;
  return m;
}

// Rate-adjusted point zone. Mirrors data/p_ega_zones.csv row order.
inline ClarkeZone p_ega_zone(double ref, double pred, double ref_rate) {
  if (!std::isfinite(ref) || !std::isfinite(pred) || ref <= 0.0 || pred <= 0.0)
    throw Error(ErrorKind::validation,
                "point grid needs positive finite glucose values");
  const PEgaMods m = p_ega_mods(ref_rate);
  if (ref <= 70.0 && pred <= 70.0 + m.mu) return ClarkeZone::A;
  if (pred <= 1.2 * ref + m.mu && pred >= 0.8 * ref - m.ml) return ClarkeZone::A;
  if (ref >= 180.0 && pred <= 70.0 - m.ml) return ClarkeZone::E;
  if (ref <= 70.0 && pred >= 180.0 + m.mu) return ClarkeZone::E;
  if (ref > 70.0 && pred >= ref + 110.0 + m.mu) return ClarkeZone::C;
  if (ref >= 130.0 && ref <= 180.0 && pred < 1.4 * ref - 182.0 - m.ml)
    return ClarkeZone::C;
  if (ref > 240.0 && pred >= 70.0 - m.ml && pred <= 180.0 - m.ml)
    return ClarkeZone::D;
  if (ref < 70.0 && pred > 70.0 + m.mu && pred <= 180.0 + m.mu)
    return ClarkeZone::D;
  return ClarkeZone::B;
}

enum class REgaZone { A, B, uC, lC, uD, lD, uE, lE };

inline const char* to_string(REgaZone z) {
  switch (z) {
    case REgaZone::A: return "A";
    case REgaZone::B: return "B";
    case REgaZone::uC: return "uC";
    case REgaZone::lC: return "lC";
    case REgaZone::uD: return "uD";
    case REgaZone::lD: return "lD";
    case REgaZone::uE: return "uE";
    case REgaZone::lE: return "lE";
  }
  return "?";
}

// Rate grid over clamped per-minute rates. Mirrors data/r_ega_zones.csv.
inline REgaZone r_ega_zone(double ref_rate, double pred_rate) {
  const double rr = std::clamp(ref_rate, -kRateClamp, kRateClamp);
  const double pr = std::clamp(pred_rate, -kRateClamp, kRateClamp);
  if (std::abs(pr - rr) <= 1.0) return REgaZone::A;
  if (rr >= 1.0 && pr >= 0.5 * rr && pr <= 2.0 * rr) return REgaZone::A;
  if (rr <= -1.0 && pr <= 0.5 * rr && pr >= 2.0 * rr) return REgaZone::A;
  if (rr <= -1.0 && pr >= 1.0) return REgaZone::uE;
  if (rr >= 1.0 && pr <= -1.0) return REgaZone::lE;
  if (rr > -1.0 && rr < 1.0 && pr > rr + 2.0) return REgaZone::uC;
  if (rr > -1.0 && rr < 1.0 && pr < rr - 2.0) return REgaZone::lC;
  if (pr > -1.0 && pr < 1.0 && rr < pr - 2.0) return REgaZone::uD;
  if (pr > -1.0 && pr < 1.0 && rr > pr + 2.0) return REgaZone::lD;
  return REgaZone::B;
}

enum class CgCategory { AP, BE, EP };  // accurate / benign error / erroneous

inline const char* to_string(CgCategory c) {
  switch (c) {
    case CgCategory::AP: return "AP";
    case CgCategory::BE: return "BE";
    case CgCategory::EP: return "EP";
  }
  return "?";
}

// Per-band combination matrices: (point zone, rate zone) → category.
// Mirrors data/cg_ega_{hypo,eu,hyper}.csv; point zones that cannot occur in a
// band are absent there, and hitting one here is an internal-coherence error.
inline CgCategory cg_combine(Band band, ClarkeZone p, REgaZone r) {
  const bool rate_e = (r == REgaZone::uE || r == REgaZone::lE);
  const bool rate_ab = (r == REgaZone::A || r == REgaZone::B);
  switch (band) {
    case Band::hypo:
      if (p == ClarkeZone::A)
        return rate_ab ? CgCategory::AP
                       : (rate_e ? CgCategory::EP : CgCategory::BE);
      if (p == ClarkeZone::D || p == ClarkeZone::E) return CgCategory::EP;
      break;
    case Band::eu:
      if (p == ClarkeZone::A)
        return rate_ab ? CgCategory::AP
                       : (rate_e ? CgCategory::EP : CgCategory::BE);
      if (p == ClarkeZone::B)
        return rate_e ? CgCategory::EP : CgCategory::BE;
      if (p == ClarkeZone::C) return CgCategory::EP;
      break;
    case Band::hyper:
      if (p == ClarkeZone::A)
        return rate_ab ? CgCategory::AP
                       : (rate_e ? CgCategory::EP : CgCategory::BE);
      if (p == ClarkeZone::B)
        return rate_e ? CgCategory::EP : CgCategory::BE;
      return CgCategory::EP;  // C, D, E
  }
  throw Error(ErrorKind::validation,
              std::string("point zone ") + to_string(p) +
                  " cannot occur in the " + to_string(band) + " band");
}

struct BandRates {
  double ap = 0.0, be = 0.0, ep = 0.0;  // percentages, sum to 100
  std::size_t count = 0;

  nlohmann::json to_json() const {
    return {{"ap", ap}, {"be", be}, {"ep", ep}, {"count", count}};
  }
};

struct CgEgaReport {
  std::optional<BandRates> hypo, eu, hyper;

  const std::optional<BandRates>& band(Band b) const {
    switch (b) {
      case Band::hypo: return hypo;
      case Band::eu: return eu;
      case Band::hyper: return hyper;
    }
    throw Error(ErrorKind::validation, "unknown band");
  }
  nlohmann::json to_json() const {
    nlohmann::json j;
    if (hypo) j["hypo"] = hypo->to_json();
    if (eu) j["eu"] = eu->to_json();
    if (hyper) j["hyper"] = hyper->to_json();
    return j;
  }
};

namespace detail {

using CgTally = std::array<std::array<std::size_t, 3>, 3>;  // [band][category]

inline void cg_tally(const PairedSeries& p, CgTally& tally) {
  p.check_lengths(2);
  p.check_range();
  const double dt_min = p.interval_s / 60.0;
  for (std::size_t i = 1; i < p.ref.size(); ++i) {
    const double rr =
        std::clamp((p.ref[i] - p.ref[i - 1]) / dt_min, -kRateClamp, kRateClamp);
    const double pr = std::clamp((p.pred[i] - p.pred[i - 1]) / dt_min,
                                 -kRateClamp, kRateClamp);
    const Band band = band_of(p.ref[i]);
    const ClarkeZone pz = p_ega_zone(p.ref[i], p.pred[i], rr);
    const REgaZone rz = r_ega_zone(rr, pr);
    const CgCategory cat = cg_combine(band, pz, rz);
    ++tally[static_cast<std::size_t>(band)][static_cast<std::size_t>(cat)];
  }
}

inline CgEgaReport cg_report(const CgTally& tally) {
  CgEgaReport rep;
  for (int b = 0; b < 3; ++b) {
    const auto& t = tally[std::size_t(b)];
    const std::size_t n = t[0] + t[1] + t[2];
    if (n == 0) continue;  // absent band stays absent, never 0/0
    BandRates rates;
    rates.ap = 100.0 * double(t[0]) / double(n);
    rates.be = 100.0 * double(t[1]) / double(n);
    rates.ep = 100.0 * double(t[2]) / double(n);
    rates.count = n;
    auto& slot = (b == 0) ? rep.hypo : (b == 1) ? rep.eu : rep.hyper;
    slot = rates;
  }
  return rep;
}

}  // namespace detail

// Continuous grid over a paired series: per point (from the second on),
// classify the rate pair on the rate grid and the value pair on the
// rate-adjusted point grid, then map through the band's combination matrix.
inline CgEgaReport cg_ega(const PairedSeries& p) {
  detail::CgTally tally{};
  detail::cg_tally(p, tally);
  return detail::cg_report(tally);
}

// Pooled grid over several contiguous segments of one recording (gaps in a
// sensor trace break the rate computation, so each gap-free run is tallied
// separately and the classifications are pooled before the percentages).
inline CgEgaReport cg_ega(const std::vector<PairedSeries>& segments) {
  if (segments.empty())
    throw Error(ErrorKind::validation, "cg_ega: no segments");
  detail::CgTally tally{};
  for (const PairedSeries& p : segments) detail::cg_tally(p, tally);
  return detail::cg_report(tally);
}

}  // namespace glyrag::metrics
