#include "atcon/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "atcon/attribution.hpp"
#include "atcon/errors.hpp"

namespace atcon {

double f1_from_counts(long tp, long fp, long fn) {
  const long denom = 2 * tp + fp + fn;
  if (tp == 0 || denom == 0) return 0.0;
  return 100.0 * 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

F1Result f1_scores(const std::vector<std::vector<double>>& predictions, const std::vector<std::vector<int>>& labels,
                   HeadMode mode, double threshold) {
  if (predictions.size() != labels.size()) throw DimensionError("f1: prediction and label counts differ");
  if (predictions.empty()) throw DataError("f1: no samples");
  const std::size_t k = labels.front().size();
  std::vector<long> tp(k, 0), fp(k, 0), fn(k, 0);
  for (std::size_t n = 0; n < predictions.size(); ++n) {
    const auto& p = predictions[n];
    const auto& y = labels[n];
    if (p.size() != k || y.size() != k) throw DimensionError("f1: ragged prediction or label rows");
    std::vector<int> hat(k, 0);
    if (mode == HeadMode::multiclass_softmax) {
      hat[std::max_element(p.begin(), p.end()) - p.begin()] = 1;
    } else {
      for (std::size_t c = 0; c < k; ++c) hat[c] = p[c] >= threshold ? 1 : 0;
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (hat[c] && y[c]) ++tp[c];
      else if (hat[c]) ++fp[c];
      else if (y[c]) ++fn[c];
    }
  }
  F1Result r;
  for (std::size_t c = 0; c < k; ++c) r.per_class.push_back(f1_from_counts(tp[c], fp[c], fn[c]));
  r.mean = std::accumulate(r.per_class.begin(), r.per_class.end(), 0.0) / static_cast<double>(k);
  return r;
}

std::optional<double> average_precision(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimensionError("average_precision: score and label counts differ");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  long positives = 0;
  for (int y : labels) positives += y != 0;
  if (positives == 0) return std::nullopt;

  double total = 0.0;
  long seen = 0, seen_pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    // a block of tied scores forms one threshold
    std::size_t j = i;
    long block_pos = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      block_pos += labels[order[j]] != 0;
      ++j;
    }
    seen += static_cast<long>(j - i);
    seen_pos += block_pos;
    total += static_cast<double>(block_pos) * static_cast<double>(seen_pos) / static_cast<double>(seen);
    i = j;
  }
  return 100.0 * total / static_cast<double>(positives);
}

APResult mean_average_precision(const std::vector<std::vector<double>>& scores,
                                const std::vector<std::vector<int>>& labels) {
  if (scores.size() != labels.size()) throw DimensionError("mAP: score and label counts differ");
  if (scores.empty()) throw DataError("mAP: no samples");
  const std::size_t k = labels.front().size();
  APResult r;
  double sum = 0.0;
  int counted = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<double> s;
    std::vector<int> y;
    for (std::size_t n = 0; n < scores.size(); ++n) {
      if (scores[n].size() != k || labels[n].size() != k) throw DimensionError("mAP: ragged rows");
      s.push_back(scores[n][c]);
      y.push_back(labels[n][c]);
    }
    auto ap = average_precision(s, y);
    r.per_class.push_back(ap);
    if (ap) {
      sum += *ap;
      ++counted;
    }
  }
  if (counted == 0) throw NumericError("mAP undefined: no class has a positive sample");
  r.map = sum / counted;
  return r;
}

std::optional<double> mask_box_iou(const std::vector<std::uint8_t>& mask, int height, int width,
                                   const std::vector<Box>& boxes) {
  if (mask.size() != static_cast<std::size_t>(height) * width) throw DimensionError("mask_box_iou: mask size");
  std::vector<std::uint8_t> in_box(mask.size(), 0);
  for (const Box& b : boxes) {
    for (int i = std::max(b.y0, 0); i < std::min(b.y1, height); ++i) {
      for (int j = std::max(b.x0, 0); j < std::min(b.x1, width); ++j) in_box[static_cast<std::size_t>(i) * width + j] = 1;
    }
  }
  long inter = 0, uni = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const bool m = mask[i] != 0, b = in_box[i] != 0;
    inter += m && b;
    uni += m || b;
  }
  if (uni == 0) return std::nullopt;
  return 100.0 * static_cast<double>(inter) / static_cast<double>(uni);
}

std::optional<double> overlap_iou(const Tensor& map, const std::vector<Box>& boxes, int height, int width) {
  const Tensor unit = rescale_unit(resize_map(map, height, width));
  std::vector<std::uint8_t> mask(unit.size());
  for (std::size_t i = 0; i < unit.size(); ++i) mask[i] = unit[i] >= 0.5f ? 1 : 0;
  return mask_box_iou(mask, height, width, boxes);
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json ap = nlohmann::json::array();
  for (const auto& v : r.per_class_ap) ap.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
  return {{"per_class_f1", r.per_class_f1},
          {"mean_f1", r.mean_f1},
          {"per_class_ap", ap},
          {"map", r.map},
          {"overlap_iou", r.overlap_iou},
          {"n_true_positives", r.n_true_positives},
          {"n_overlap_skipped", r.n_overlap_skipped},
          {"n_samples", r.n_samples}};
}

std::string to_csv(const EvalReport& r) {
  std::ostringstream out;
  out.precision(17);
  out << "class,f1,ap\n";
  for (std::size_t c = 0; c < r.per_class_f1.size(); ++c) {
    out << c << ',' << r.per_class_f1[c] << ',';
    if (c < r.per_class_ap.size() && r.per_class_ap[c]) out << *r.per_class_ap[c];
    out << '\n';
  }
  out << "mean," << r.mean_f1 << ',' << r.map << '\n';
  out << "overlap_iou," << r.overlap_iou << ",\n";
  out << "n_true_positives," << r.n_true_positives << ",\n";
  return out.str();
}

std::string format_report(const EvalReport& r) {
  std::ostringstream out;
  char line[128];
  out << "class      F1      AP\n";
  for (std::size_t c = 0; c < r.per_class_f1.size(); ++c) {
    const auto& ap = c < r.per_class_ap.size() ? r.per_class_ap[c] : std::nullopt;
    if (ap) {
      std::snprintf(line, sizeof line, "%5zu  %6.2f  %6.2f\n", c, r.per_class_f1[c], *ap);
    } else {
      std::snprintf(line, sizeof line, "%5zu  %6.2f       -\n", c, r.per_class_f1[c]);
    }
    out << line;
  }
  std::snprintf(line, sizeof line, " mean  %6.2f  %6.2f\n", r.mean_f1, r.map);
  out << line;
  std::snprintf(line, sizeof line, "overlap IoU %.2f over %d true positives (%d skipped)\n", r.overlap_iou,
                r.n_true_positives, r.n_overlap_skipped);
  out << line;
  return out.str();
}

}  // namespace atcon
