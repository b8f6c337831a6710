#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "atcon/model.hpp"

namespace atcon {

/// Ground-truth box in pixel coordinates, half-open: columns [x0,x1), rows [y0,y1).
struct Box {
  int cls = 0;
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;

  bool operator==(const Box&) const = default;
};

struct F1Result {
  std::vector<double> per_class;  // [0,100]
  double mean = 0.0;
};

/// Multilabel heads threshold each class probability; multiclass heads take the argmax.
/// Labels are multi-hot rows. A class with no true positive scores 0.
F1Result f1_scores(const std::vector<std::vector<double>>& predictions, const std::vector<std::vector<int>>& labels,
                   HeadMode mode, double threshold = 0.5);

/// F1 from raw counts, 0 when the class never occurs and is never predicted.
double f1_from_counts(long tp, long fp, long fn);

/// All-points AP in [0,100]: precision at every positive, averaged. Tied scores
/// share one threshold. Returns nullopt when there is no positive.
std::optional<double> average_precision(std::span<const double> scores, std::span<const int> labels);

struct APResult {
  std::vector<std::optional<double>> per_class;  // nullopt: no positives, excluded
  double map = 0.0;
};

/// Throws NumericError when no class has a positive.
APResult mean_average_precision(const std::vector<std::vector<double>>& scores,
                                const std::vector<std::vector<int>>& labels);

/// Pixel IoU in [0,100] of a binary mask ([H*W] row-major, nonzero = on) against
/// the union of `boxes`. nullopt when both are empty.
std::optional<double> mask_box_iou(const std::vector<std::uint8_t>& mask, int height, int width,
                                   const std::vector<Box>& boxes);

/// Bilinear upsample to height x width, min-max rescale, threshold at 0.5, IoU
/// with the union of `boxes`.
std::optional<double> overlap_iou(const Tensor& map, const std::vector<Box>& boxes, int height, int width);

struct EvalReport {
  std::vector<double> per_class_f1;
  double mean_f1 = 0.0;
  std::vector<std::optional<double>> per_class_ap;
  double map = 0.0;
  double overlap_iou = 0.0;  // mean over true positives with a defined IoU
  int n_true_positives = 0;
  int n_overlap_skipped = 0;
  int n_samples = 0;
};

nlohmann::json to_json(const EvalReport& report);
std::string to_csv(const EvalReport& report);
/// Human-readable summary with one line per class.
std::string format_report(const EvalReport& report);

}  // namespace atcon
