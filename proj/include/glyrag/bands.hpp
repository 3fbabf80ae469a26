#pragma once
// Glycemic band thresholds shared by windowing features, metrics, and the
// summarizer. Range boundaries are inclusive: 70 and 180 mg/dL both count as
// in-range.

namespace glyrag {

struct GlycemiaBands {
  static constexpr double hypo_threshold = 70.0;   // at or below: hypoglycemia
  static constexpr double hyper_threshold = 180.0; // at or above: hyperglycemia
};

inline bool in_range(double mg_dl) {
  return mg_dl >= GlycemiaBands::hypo_threshold &&
         mg_dl <= GlycemiaBands::hyper_threshold;
}

}  // namespace glyrag
