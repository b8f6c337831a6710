#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "atcon/attribution.hpp"

namespace atcon {

/// Which two attribution functions are compared.
enum class AttributionPair { gradcam_gb, gradcam_ig, layer_pair };

/// How maps of different resolution are made comparable.
enum class ResolutionMatching { gb_as_mask, gradcam_as_mask, gradcam_upsample, gb_maxpool };

enum class CorrelationMetric { pearson, cross_correlation, ssim };

/// Dispersion used to standardise the mask source.
enum class SigmaMode { std_dev, variance };

/// raw_normalized: <a,b>/(|a||b|). mean_free: same after removing means (equals Pearson).
enum class CrossCorrelationMode { raw_normalized, mean_free };

std::string to_string(AttributionPair v);
std::string to_string(ResolutionMatching v);
std::string to_string(CorrelationMetric v);
std::string to_string(SigmaMode v);
std::string to_string(CrossCorrelationMode v);
AttributionPair parse_attribution_pair(const std::string& text);
ResolutionMatching parse_resolution_matching(const std::string& text);
CorrelationMetric parse_correlation_metric(const std::string& text);
SigmaMode parse_sigma_mode(const std::string& text);
CrossCorrelationMode parse_cross_correlation_mode(const std::string& text);

/// Row labels and column labels of the matching x metric grid, in display order.
const std::vector<ResolutionMatching>& ablation_rows();
const std::vector<CorrelationMetric>& ablation_columns();
std::string display_name(ResolutionMatching v);
std::string display_name(CorrelationMetric v);

struct ConsistencyConfig {
  AttributionPair pair = AttributionPair::gradcam_gb;
  ResolutionMatching matching = ResolutionMatching::gb_as_mask;
  CorrelationMetric metric = CorrelationMetric::pearson;
  std::optional<IGConfig> ig;                                          // iff pair == gradcam_ig
  std::optional<std::pair<std::string, std::string>> layer_pair_names;  // iff pair == layer_pair

  std::string target_layer;  // Grad-CAM layer; empty selects the last conv layer
  bool gradcam_relu = true;
  ChannelReduction reduction = ChannelReduction::max_abs;
  SigmaMode sigma = SigmaMode::std_dev;
  bool freeze_mask = false;  // stop-gradient through the mask
  CrossCorrelationMode cross_mode = CrossCorrelationMode::raw_normalized;

  void validate() const;
  /// Layer baseline over the last convolution layers of the last two blocks.
  static ConsistencyConfig layer_baseline(const Model& model, CorrelationMetric metric = CorrelationMetric::pearson);
};

nlohmann::json to_json(const ConsistencyConfig& cfg);

inline constexpr double kMaskSigmaFloor = 1e-6;
// Standardised values are clamped to +-30 before the sigmoid so P stays strictly
// inside (0,1) in double even for outliers or a floored sigma.
inline constexpr double kMaskLogitBound = 30.0;

/// Sigmoid mask of a standardised source map, evaluated in double precision.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<double> p;  // row-major, every value in (0,1)
  double mu = 0.0;
  double sigma = 0.0;

  double at(int i, int j) const { return p[static_cast<std::size_t>(i) * width + j]; }
  Tensor to_tensor() const;
};

Mask make_mask(const AttributionMap& source, SigmaMode mode = SigmaMode::std_dev);
Mask make_mask(const Tensor& source, SigmaMode mode = SigmaMode::std_dev);

/// Differentiable version used inside the loss; `mu`/`sigma` receive the statistics.
Var mask_var(const Var& source, SigmaMode mode, double* mu = nullptr, double* sigma = nullptr);

/// Value-level correlation in double precision, clamped to [-1,1]. Degenerate
/// (zero-variance or zero-range) inputs score 0 and set `degenerate` when given.
double correlate(const Tensor& a, const Tensor& b, CorrelationMetric metric,
                 CrossCorrelationMode cross_mode = CrossCorrelationMode::raw_normalized, bool* degenerate = nullptr);
double correlate(const AttributionMap& a, const AttributionMap& b, CorrelationMetric metric,
                 CrossCorrelationMode cross_mode = CrossCorrelationMode::raw_normalized);

struct CorrelationVar {
  Var value;  // [1]
  bool degenerate = false;
};

CorrelationVar correlate_var(const Var& a, const Var& b, CorrelationMetric metric, CrossCorrelationMode cross_mode);

struct ConsistencyDiagnostics {
  double correlation = 0.0;
  int class_index = 0;
  double mask_mu = 0.0;
  double mask_sigma = 0.0;
  bool skipped = false;  // degenerate map, excluded from batch means
  Tensor map_a;
  Tensor map_b;
};

nlohmann::json to_json(const ConsistencyDiagnostics& d);

struct ConsistencyTerm {
  Var loss;  // [1]; -correlation, or constant 0 when skipped
  ConsistencyDiagnostics diag;
};

/// Builds the consistency loss for one sample on the tape of `x`. With
/// create_graph the loss is differentiable with respect to `params`.
ConsistencyTerm consistency_loss_on(const Model& model, const ParamVars& params, const Var& x,
                                    const ConsistencyConfig& cfg, bool create_graph);

struct ConsistencyResult {
  double loss = 0.0;
  ConsistencyDiagnostics diag;
  std::optional<ParamMap> grads;  // d loss / d theta when requested and not skipped
};

ConsistencyResult consistency_loss(const Model& model, const Tensor& x, const ConsistencyConfig& cfg,
                                   bool with_grads = false);

}  // namespace atcon
