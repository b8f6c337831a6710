#pragma once

#include <string>
#include <vector>

#include "atcon/consistency.hpp"
#include "atcon/data.hpp"
#include "atcon/metrics.hpp"

namespace atcon {

/// Cross-entropy of one sample from its logits: softmax CE for multiclass heads,
/// mean per-class binary CE for multilabel heads. Computed in double.
double supervised_loss_value(const Tensor& logits, const std::vector<int>& labels, HeadMode mode);

struct Predictions {
  std::vector<std::vector<double>> probabilities;
  std::vector<std::vector<int>> labels;
  double mean_loss = 0.0;
};

Predictions predict(const Model& model, const Dataset& dataset, const std::vector<int>& ids);

struct EvalOptions {
  std::string layer;  // Grad-CAM layer for the overlap; empty = last conv
  bool gradcam_relu = true;
  bool with_overlap = true;
};

/// F1, AP and the Grad-CAM/box overlap over true positives.
EvalReport evaluate_model(const Model& model, const Dataset& dataset, const std::vector<int>& ids,
                          const EvalOptions& opts = {});

struct ConsistencySummary {
  double mean_correlation = 0.0;  // over samples that were not skipped
  double mean_loss = 0.0;
  int used = 0;
  int skipped = 0;
  std::vector<ConsistencyDiagnostics> diagnostics;  // one per sample, maps dropped
};

ConsistencySummary mean_consistency(const Model& model, const Dataset& dataset, const std::vector<int>& ids,
                                    const ConsistencyConfig& cfg);

}  // namespace atcon
