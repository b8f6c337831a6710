#include "atcon/attribution.hpp"

#include <algorithm>
#include <cmath>

#include "atcon/errors.hpp"
#include "atcon/image_io.hpp"
#include "atcon/ops.hpp"

namespace atcon {

std::string to_string(AttributionMethod method) {
  switch (method) {
    case AttributionMethod::grad_cam: return "grad_cam";
    case AttributionMethod::guided_backprop: return "guided_backprop";
    case AttributionMethod::integrated_gradients: return "integrated_gradients";
  }
  throw InternalError("bad attribution method");
}

std::string to_string(ChannelReduction reduction) {
  switch (reduction) {
    case ChannelReduction::max_abs: return "max_abs";
    case ChannelReduction::mean_abs: return "mean_abs";
    case ChannelReduction::l2: return "l2";
  }
  throw InternalError("bad channel reduction");
}

ChannelReduction parse_channel_reduction(const std::string& text) {
  for (auto r : {ChannelReduction::max_abs, ChannelReduction::mean_abs, ChannelReduction::l2}) {
    if (to_string(r) == text) return r;
  }
  throw ConfigError("unknown channel reduction '" + text + "'");
}

void check_class_index(const Model& model, int class_index) {
  if (class_index < 0 || class_index >= model.num_classes()) {
    throw ConfigError("class index " + std::to_string(class_index) + " out of range for " +
                      std::to_string(model.num_classes()) + " classes");
  }
}

std::string resolve_conv_layer(const Model& model, const std::string& layer) {
  if (layer.empty()) return model.last_conv_layer();
  if (!model.has_layer(layer)) throw ConfigError("unknown layer '" + layer + "'");
  if (model.layer(layer).kind != LayerKind::conv) throw ConfigError("layer '" + layer + "' is not a conv layer");
  return layer;
}

GradCamTerms grad_cam_terms(const Model& model, const ForwardPass& pass, int class_index, const std::string& layer,
                            bool apply_relu, bool create_graph) {
  check_class_index(model, class_index);
  const std::string name = resolve_conv_layer(model, layer);
  const Var& features = pass.activations.at(name);
  Tape& tape = features.tape();
  const Var score = ops::select(pass.logits, class_index);
  const Var grad = tape.gradients(score, std::span<const Var>(&features, 1), create_graph).front();

  const int z = features.shape()[1] * features.shape()[2];
  GradCamTerms terms;
  terms.features = features;
  terms.alpha = ops::scale(ops::channel_sum_spatial(grad), 1.0f / static_cast<Real>(z));
  terms.map = ops::weighted_channel_sum(features, terms.alpha);
  if (apply_relu) terms.map = ops::relu(terms.map);
  return terms;
}

Var reduce_channels(const Var& grad, ChannelReduction reduction) {
  switch (reduction) {
    case ChannelReduction::max_abs: return ops::channel_max(ops::abs(grad));
    case ChannelReduction::mean_abs:
      return ops::scale(ops::sum_channels(ops::abs(grad)), 1.0f / static_cast<Real>(grad.shape()[0]));
    case ChannelReduction::l2: return ops::sqrt(ops::add_scalar(ops::sum_channels(ops::square(grad)), 1e-12f));
  }
  throw InternalError("bad channel reduction");
}

Var guided_backprop_map(const ForwardPass& pass, int class_index, ChannelReduction reduction, bool create_graph) {
  Tape& tape = pass.input.tape();
  if (!pass.input.requires_grad()) throw InternalError("guided backprop needs an input that requires grad");
  const Var score = ops::select(pass.logits, class_index);
  Var grad;
  {
    ReluModeGuard guided(tape, ReluBackward::guided);
    grad = tape.gradients(score, std::span<const Var>(&pass.input, 1), create_graph).front();
  }
  return reduce_channels(grad, reduction);
}

Var integrated_gradients_map(const Model& model, const ParamVars& params, const Var& x, int class_index,
                             const IGConfig& cfg, ChannelReduction reduction, bool create_graph, Var* raw) {
  if (cfg.steps < 1) throw ConfigError("integrated gradients needs at least one step");
  check_class_index(model, class_index);
  Tape& tape = x.tape();
  const Tensor base = cfg.baseline ? *cfg.baseline : Tensor(x.shape());
  if (base.shape() != x.shape()) throw DimensionError("integrated gradients baseline shape does not match input");
  const Var baseline = tape.constant(base);
  const Var delta = ops::sub(x, baseline);

  Var total;
  for (int i = 1; i <= cfg.steps; ++i) {
    const Real t = static_cast<Real>(i) / static_cast<Real>(cfg.steps);
    Var point = ops::add(baseline, ops::scale(delta, t));
    if (!point.requires_grad()) point = tape.leaf(point.value(), true);
    const ForwardPass pass = forward_on(model, params, point);
    const Var score = ops::select(pass.logits, class_index);
    ReluModeGuard standard(tape, ReluBackward::standard);
    const Var g = tape.gradients(score, std::span<const Var>(&point, 1), create_graph).front();
    total = total.valid() ? ops::add(total, g) : g;
  }
  const Var attribution = ops::mul(delta, ops::scale(total, 1.0f / static_cast<Real>(cfg.steps)));
  if (raw) *raw = attribution;
  return reduce_channels(attribution, reduction);
}

// ---- value-level API -----------------------------------------------------------

AttributionMap grad_cam(const Model& model, const Tensor& x, int class_index, const std::string& layer,
                        bool apply_relu) {
  auto rec = forward_record(model, x);
  const std::string name = resolve_conv_layer(model, layer);
  auto terms = grad_cam_terms(model, rec.pass, class_index, name, apply_relu, false);
  return AttributionMap{terms.map.value(), AttributionMethod::grad_cam, class_index, name};
}

GradCamContext grad_cam_context(const Model& model, const Tensor& x, int class_index, const std::string& layer) {
  auto rec = forward_record(model, x);
  auto terms = grad_cam_terms(model, rec.pass, class_index, layer, false, false);
  const Shape& s = terms.features.shape();
  return GradCamContext{terms.features.value(), terms.alpha.value(), s[1] * s[2]};
}

AttributionMap guided_backprop(const Model& model, const Tensor& x, int class_index, ChannelReduction reduction) {
  check_class_index(model, class_index);
  auto rec = forward_record(model, x);
  Var map = guided_backprop_map(rec.pass, class_index, reduction, false);
  return AttributionMap{map.value(), AttributionMethod::guided_backprop, class_index, std::nullopt};
}

AttributionMap integrated_gradients(const Model& model, const Tensor& x, int class_index, const IGConfig& cfg,
                                    ChannelReduction reduction) {
  Tape tape;
  auto params = bind_parameters(model, tape, false);
  Var input = tape.leaf(x, true);
  Var map = integrated_gradients_map(model, params, input, class_index, cfg, reduction, false);
  return AttributionMap{map.value(), AttributionMethod::integrated_gradients, class_index, std::nullopt};
}

Tensor integrated_gradients_raw(const Model& model, const Tensor& x, int class_index, const IGConfig& cfg) {
  Tape tape;
  auto params = bind_parameters(model, tape, false);
  Var input = tape.leaf(x, true);
  Var raw;
  integrated_gradients_map(model, params, input, class_index, cfg, ChannelReduction::max_abs, false, &raw);
  return raw.value();
}

Tensor rescale_unit(const Tensor& map) {
  auto d = map.data();
  if (d.empty()) return map;
  const auto [lo, hi] = std::minmax_element(d.begin(), d.end());
  Tensor out(map.shape());
  const Real range = *hi - *lo;
  if (!(range > 0.0f)) return out;
  for (std::size_t i = 0; i < d.size(); ++i) out[i] = (d[i] - *lo) / range;
  return out;
}

Tensor resize_map(const Tensor& map, int height, int width) {
  if (map.rank() != 2) throw DimensionError("resize_map expects an [H,W] map");
  if (map.dim(0) == height && map.dim(1) == width) return map;
  Tape tape;
  return ops::upsample_bilinear(tape.constant(map), height, width).value();
}

namespace {

// Blue -> cyan -> yellow -> red ramp.
void heat_color(Real t, Real rgb[3]) {
  t = std::clamp<Real>(t, 0.0f, 1.0f);
  rgb[0] = std::clamp<Real>(1.5f - std::fabs(4.0f * t - 3.0f), 0.0f, 1.0f);
  rgb[1] = std::clamp<Real>(1.5f - std::fabs(4.0f * t - 2.0f), 0.0f, 1.0f);
  rgb[2] = std::clamp<Real>(1.5f - std::fabs(4.0f * t - 1.0f), 0.0f, 1.0f);
}

}  // namespace

void export_map(const AttributionMap& map, const std::filesystem::path& stem, const Tensor* image) {
  save_atct(stem.string() + ".atct", map.values);
  const Tensor unit = rescale_unit(map.values);
  write_pgm(stem.string() + ".pgm", unit);
  if (!image) return;
  if (image->rank() != 3) throw DimensionError("overlay image must be [C,H,W]");
  const int c = image->dim(0), h = image->dim(1), w = image->dim(2);
  const Tensor heat = resize_map(unit, h, w);
  Tensor overlay(Shape{3, h, w});
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      Real rgb[3];
      heat_color(heat.at(i, j), rgb);
      for (int k = 0; k < 3; ++k) {
        overlay.at(k, i, j) = 0.5f * image->at(c == 3 ? k : 0, i, j) + 0.5f * rgb[k];
      }
    }
  }
  write_ppm(stem.string() + "_overlay.ppm", overlay);
}

}  // namespace atcon
