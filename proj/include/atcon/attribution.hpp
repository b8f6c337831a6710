#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "atcon/model.hpp"

namespace atcon {

enum class AttributionMethod { grad_cam, guided_backprop, integrated_gradients };

/// How a [C,H,W] input gradient becomes a single [H,W] map.
enum class ChannelReduction { max_abs, mean_abs, l2 };

std::string to_string(AttributionMethod method);
std::string to_string(ChannelReduction reduction);
ChannelReduction parse_channel_reduction(const std::string& text);

struct AttributionMap {
  Tensor values;  // [H,W]
  AttributionMethod method = AttributionMethod::grad_cam;
  int class_index = 0;
  std::optional<std::string> source_layer;
};

/// Path integral settings: `steps` Riemann points, baseline defaults to zeros.
struct IGConfig {
  int steps = 5;
  std::optional<Tensor> baseline;
};

/// Intermediate quantities of a Grad-CAM evaluation.
struct GradCamContext {
  Tensor feature_maps;  // f_k, [K,H,W]
  Tensor weights;       // alpha_k, [K]
  int spatial_size = 0; // Z = H*W
};

// ---- tape-level building blocks ------------------------------------------------
//
// These operate on a live ForwardPass and, with create_graph, return maps that
// remain differentiable with respect to the model parameters.

struct GradCamTerms {
  Var map;       // [H,W]
  Var alpha;     // [K]
  Var features;  // [K,H,W]
};

void check_class_index(const Model& model, int class_index);
/// Resolves "" to the last conv layer and checks that `layer` names a conv layer.
std::string resolve_conv_layer(const Model& model, const std::string& layer);

GradCamTerms grad_cam_terms(const Model& model, const ForwardPass& pass, int class_index, const std::string& layer,
                            bool apply_relu, bool create_graph);

Var reduce_channels(const Var& grad, ChannelReduction reduction);

/// d logit_c / d input with guided ReLU backward, channel-reduced. The pass input
/// must require grad.
Var guided_backprop_map(const ForwardPass& pass, int class_index, ChannelReduction reduction, bool create_graph);

/// Integrated gradients. `raw` (optional) receives the [C,H,W] attribution before
/// channel reduction.
Var integrated_gradients_map(const Model& model, const ParamVars& params, const Var& x, int class_index,
                             const IGConfig& cfg, ChannelReduction reduction, bool create_graph, Var* raw = nullptr);

// ---- value-level API ---------------------------------------------------------------

AttributionMap grad_cam(const Model& model, const Tensor& x, int class_index, const std::string& layer = "",
                        bool apply_relu = true);
GradCamContext grad_cam_context(const Model& model, const Tensor& x, int class_index, const std::string& layer = "");
AttributionMap guided_backprop(const Model& model, const Tensor& x, int class_index,
                               ChannelReduction reduction = ChannelReduction::max_abs);
AttributionMap integrated_gradients(const Model& model, const Tensor& x, int class_index, const IGConfig& cfg,
                                    ChannelReduction reduction = ChannelReduction::max_abs);
/// Per-channel integrated gradients before reduction, [C,H,W].
Tensor integrated_gradients_raw(const Model& model, const Tensor& x, int class_index, const IGConfig& cfg);

/// Per-map min-max rescale to [0,1]; a constant map becomes all zeros.
Tensor rescale_unit(const Tensor& map);
/// Bilinear resize of an [H,W] map.
Tensor resize_map(const Tensor& map, int height, int width);

/// Writes <stem>.atct, <stem>.pgm and, when `image` is given, <stem>_overlay.ppm.
void export_map(const AttributionMap& map, const std::filesystem::path& stem, const Tensor* image = nullptr);

}  // namespace atcon
