#pragma once

// Brute-force references for AP and box IoU, shared by the unit and acceptance tests.

#include <cstdint>
#include <optional>
#include <set>
#include <vector>

#include "atcon/metrics.hpp"

namespace atcon::testing {

/// Enumerates every distinct score as a threshold "predict positive iff score >= t",
/// and averages the precision at each threshold over the positives it newly admits.
inline std::optional<double> brute_force_ap(const std::vector<double>& scores, const std::vector<int>& labels) {
  long positives = 0;
  for (int l : labels) positives += l != 0;
  if (positives == 0) return std::nullopt;
  const std::set<double> thresholds(scores.begin(), scores.end());
  double sum = 0;
  for (double t : thresholds) {
    long tp = 0, fp = 0, new_pos = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i] < t) continue;
      (labels[i] ? tp : fp) += 1;
      if (labels[i] && scores[i] == t) ++new_pos;
    }
    sum += static_cast<double>(new_pos) * static_cast<double>(tp) / static_cast<double>(tp + fp);
  }
  return 100.0 * sum / static_cast<double>(positives);
}

inline std::optional<double> brute_force_iou(const std::vector<std::uint8_t>& mask, int h, int w,
                                             const std::vector<Box>& boxes) {
  long inter = 0, uni = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      bool in_box = false;
      for (const auto& b : boxes) in_box = in_box || (x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1);
      const bool on = mask[y * w + x] != 0;
      inter += on && in_box;
      uni += on || in_box;
    }
  }
  if (uni == 0) return std::nullopt;
  return 100.0 * static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace atcon::testing
