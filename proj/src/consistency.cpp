#include "atcon/consistency.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "atcon/errors.hpp"
#include "atcon/ops.hpp"

namespace atcon {

using nlohmann::json;

// ---- enum names ----------------------------------------------------------------

namespace {

template <class E, std::size_t N>
E parse_enum(const std::string& text, const E (&values)[N], const char* what) {
  for (E v : values) {
    if (to_string(v) == text) return v;
  }
  throw ConfigError(std::string("unknown ") + what + " '" + text + "'");
}

constexpr double kSsimC1 = 0.01 * 0.01;
constexpr double kSsimC2 = 0.03 * 0.03;
constexpr int kSsimWindow = 7;
constexpr double kDegenerateVariance = 1e-14;

int ssim_window(int h, int w) {
  int win = std::min({kSsimWindow, h, w});
  if (win % 2 == 0) --win;
  return std::max(win, 1);
}

}  // namespace

std::string to_string(AttributionPair v) {
  switch (v) {
    case AttributionPair::gradcam_gb: return "gradcam_gb";
    case AttributionPair::gradcam_ig: return "gradcam_ig";
    case AttributionPair::layer_pair: return "layer_pair";
  }
  throw InternalError("bad pair");
}

std::string to_string(ResolutionMatching v) {
  switch (v) {
    case ResolutionMatching::gb_as_mask: return "gb_as_mask";
    case ResolutionMatching::gradcam_as_mask: return "gradcam_as_mask";
    case ResolutionMatching::gradcam_upsample: return "gradcam_upsample";
    case ResolutionMatching::gb_maxpool: return "gb_maxpool";
  }
  throw InternalError("bad matching");
}

std::string to_string(CorrelationMetric v) {
  switch (v) {
    case CorrelationMetric::pearson: return "pearson";
    case CorrelationMetric::cross_correlation: return "cross_correlation";
    case CorrelationMetric::ssim: return "ssim";
  }
  throw InternalError("bad metric");
}

std::string to_string(SigmaMode v) { return v == SigmaMode::std_dev ? "std" : "variance"; }

std::string to_string(CrossCorrelationMode v) {
  return v == CrossCorrelationMode::raw_normalized ? "raw_normalized" : "mean_free";
}

AttributionPair parse_attribution_pair(const std::string& text) {
  constexpr AttributionPair all[] = {AttributionPair::gradcam_gb, AttributionPair::gradcam_ig,
                                     AttributionPair::layer_pair};
  return parse_enum(text, all, "attribution pair");
}

ResolutionMatching parse_resolution_matching(const std::string& text) {
  constexpr ResolutionMatching all[] = {ResolutionMatching::gb_as_mask, ResolutionMatching::gradcam_as_mask,
                                        ResolutionMatching::gradcam_upsample, ResolutionMatching::gb_maxpool};
  return parse_enum(text, all, "resolution matching");
}

CorrelationMetric parse_correlation_metric(const std::string& text) {
  constexpr CorrelationMetric all[] = {CorrelationMetric::pearson, CorrelationMetric::cross_correlation,
                                       CorrelationMetric::ssim};
  return parse_enum(text, all, "correlation metric");
}

SigmaMode parse_sigma_mode(const std::string& text) {
  constexpr SigmaMode all[] = {SigmaMode::std_dev, SigmaMode::variance};
  return parse_enum(text, all, "sigma mode");
}

CrossCorrelationMode parse_cross_correlation_mode(const std::string& text) {
  constexpr CrossCorrelationMode all[] = {CrossCorrelationMode::raw_normalized, CrossCorrelationMode::mean_free};
  return parse_enum(text, all, "cross-correlation mode");
}

const std::vector<ResolutionMatching>& ablation_rows() {
  static const std::vector<ResolutionMatching> rows{ResolutionMatching::gradcam_upsample, ResolutionMatching::gb_maxpool,
                                                    ResolutionMatching::gb_as_mask, ResolutionMatching::gradcam_as_mask};
  return rows;
}

const std::vector<CorrelationMetric>& ablation_columns() {
  static const std::vector<CorrelationMetric> cols{CorrelationMetric::pearson, CorrelationMetric::cross_correlation,
                                                   CorrelationMetric::ssim};
  return cols;
}

std::string display_name(ResolutionMatching v) {
  switch (v) {
    case ResolutionMatching::gradcam_upsample: return "Grad-CAM Upsampling";
    case ResolutionMatching::gb_maxpool: return "GB Pooling";
    case ResolutionMatching::gb_as_mask: return "GB as mask";
    case ResolutionMatching::gradcam_as_mask: return "Grad-CAM as mask";
  }
  throw InternalError("bad matching");
}

std::string display_name(CorrelationMetric v) {
  switch (v) {
    case CorrelationMetric::pearson: return "Pearson";
    case CorrelationMetric::cross_correlation: return "Cross-correlation";
    case CorrelationMetric::ssim: return "SSIM";
  }
  throw InternalError("bad metric");
}

// ---- config --------------------------------------------------------------------

void ConsistencyConfig::validate() const {
  if (ig.has_value() != (pair == AttributionPair::gradcam_ig)) {
    throw ConfigError("integrated-gradients settings must be given exactly when pair is gradcam_ig");
  }
  if (layer_pair_names.has_value() != (pair == AttributionPair::layer_pair)) {
    throw ConfigError("layer pair names must be given exactly when pair is layer_pair");
  }
  if (ig && ig->steps < 1) throw ConfigError("integrated gradients needs at least one step");
}

ConsistencyConfig ConsistencyConfig::layer_baseline(const Model& model, CorrelationMetric metric) {
  const auto convs = model.conv_layer_names();
  if (convs.size() < 2) throw ConfigError("layer consistency needs at least two conv layers");
  ConsistencyConfig cfg;
  cfg.pair = AttributionPair::layer_pair;
  cfg.metric = metric;
  cfg.layer_pair_names = std::make_pair(convs[convs.size() - 2], convs.back());
  return cfg;
}

json to_json(const ConsistencyConfig& cfg) {
  json j{{"pair", to_string(cfg.pair)},
         {"matching", to_string(cfg.matching)},
         {"metric", to_string(cfg.metric)},
         {"target_layer", cfg.target_layer},
         {"gradcam_relu", cfg.gradcam_relu},
         {"reduction", to_string(cfg.reduction)},
         {"sigma", to_string(cfg.sigma)},
         {"freeze_mask", cfg.freeze_mask},
         {"cross_mode", to_string(cfg.cross_mode)}};
  if (cfg.ig) j["ig_steps"] = cfg.ig->steps;
  if (cfg.layer_pair_names) j["layer_pair"] = {cfg.layer_pair_names->first, cfg.layer_pair_names->second};
  return j;
}

// ---- mask ----------------------------------------------------------------------

Tensor Mask::to_tensor() const {
  Tensor t(Shape{height, width});
  for (std::size_t i = 0; i < p.size(); ++i) t[i] = static_cast<Real>(p[i]);
  return t;
}

Mask make_mask(const Tensor& source, SigmaMode mode) {
  if (source.rank() != 2) throw DimensionError("mask source must be an [H,W] map");
  require_finite(source, "mask source");
  const auto d = source.data();
  const double n = static_cast<double>(d.size());
  double mu = 0.0;
  for (Real v : d) mu += v;
  mu /= n;
  double var = 0.0;
  for (Real v : d) var += (v - mu) * (v - mu);
  var /= n;
  const double spread = std::max(mode == SigmaMode::std_dev ? std::sqrt(var) : var, kMaskSigmaFloor);
  Mask m{source.dim(0), source.dim(1), {}, mu, spread};
  m.p.resize(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double z = std::clamp((d[i] - mu) / spread, -kMaskLogitBound, kMaskLogitBound);
    m.p[i] = 1.0 / (1.0 + std::exp(-z));
  }
  return m;
}

Mask make_mask(const AttributionMap& source, SigmaMode mode) { return make_mask(source.values, mode); }

Var mask_var(const Var& source, SigmaMode mode, double* mu, double* sigma) {
  const Var mean = ops::mean(source);
  const Var centered = ops::sub(source, ops::expand(mean, source.shape()));
  Var spread = ops::mean(ops::square(centered));
  if (mode == SigmaMode::std_dev) spread = ops::sqrt(ops::add_scalar(spread, 1e-30f));
  spread = ops::clamp_min(spread, static_cast<Real>(kMaskSigmaFloor));
  if (mu) *mu = mean.value()[0];
  if (sigma) *sigma = spread.value()[0];
  Var z = ops::div(centered, ops::expand(spread, source.shape()));
  const auto bound = static_cast<Real>(kMaskLogitBound);
  z = ops::neg(ops::clamp_min(ops::neg(ops::clamp_min(z, -bound)), -bound));
  return ops::sigmoid(z);
}

// ---- value-level correlation --------------------------------------------------

namespace {

double pearson_value(std::span<const Real> a, std::span<const Real> b, bool mean_free, bool& degenerate) {
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  if (mean_free) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      ma += a[i];
      mb += b[i];
    }
    ma /= n;
    mb /= n;
  }
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i] - ma, y = b[i] - mb;
    cov += x * y;
    va += x * x;
    vb += y * y;
  }
  if (va / n <= kDegenerateVariance || vb / n <= kDegenerateVariance) {
    degenerate = true;
    return 0.0;
  }
  return cov / std::sqrt(va * vb);
}

std::vector<double> unit_range(std::span<const Real> v, bool& degenerate) {
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double range = static_cast<double>(*hi) - *lo;
  std::vector<double> out(v.size(), 0.0);
  if (!(range > 0.0)) {
    degenerate = true;
    return out;
  }
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - *lo) / range;
  return out;
}

double ssim_value(const Tensor& a, const Tensor& b, bool& degenerate) {
  const int h = a.dim(0), w = a.dim(1);
  const auto x = unit_range(a.data(), degenerate);
  const auto y = unit_range(b.data(), degenerate);
  if (degenerate) return 0.0;
  const int win = ssim_window(h, w);
  const double np = static_cast<double>(win) * win;
  double total = 0.0;
  int count = 0;
  for (int i = 0; i + win <= h; ++i) {
    for (int j = 0; j + win <= w; ++j) {
      double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
      for (int p = 0; p < win; ++p) {
        for (int q = 0; q < win; ++q) {
          const std::size_t k = static_cast<std::size_t>(i + p) * w + (j + q);
          sx += x[k];
          sy += y[k];
          sxx += x[k] * x[k];
          syy += y[k] * y[k];
          sxy += x[k] * y[k];
        }
      }
      const double mx = sx / np, my = sy / np;
      const double vx = sxx / np - mx * mx, vy = syy / np - my * my, cxy = sxy / np - mx * my;
      total += ((2 * mx * my + kSsimC1) * (2 * cxy + kSsimC2)) /
               ((mx * mx + my * my + kSsimC1) * (vx + vy + kSsimC2));
      ++count;
    }
  }
  return total / count;
}

}  // namespace

double correlate(const Tensor& a, const Tensor& b, CorrelationMetric metric, CrossCorrelationMode cross_mode,
                 bool* degenerate) {
  if (a.shape() != b.shape()) {
    throw DimensionError("correlate: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  if (a.rank() != 2) throw DimensionError("correlate expects [H,W] maps");
  bool deg = false;
  double r = 0.0;
  switch (metric) {
    case CorrelationMetric::pearson: r = pearson_value(a.data(), b.data(), true, deg); break;
    case CorrelationMetric::cross_correlation:
      r = pearson_value(a.data(), b.data(), cross_mode == CrossCorrelationMode::mean_free, deg);
      break;
    case CorrelationMetric::ssim: r = ssim_value(a, b, deg); break;
  }
  if (degenerate) *degenerate = deg;
  return std::clamp(r, -1.0, 1.0);
}

double correlate(const AttributionMap& a, const AttributionMap& b, CorrelationMetric metric,
                 CrossCorrelationMode cross_mode) {
  return correlate(a.values, b.values, metric, cross_mode);
}

// ---- differentiable correlation --------------------------------------------------

namespace {

Var centered(const Var& v) { return ops::sub(v, ops::expand(ops::mean(v), v.shape())); }

bool low_energy(const Var& v) {
  double s = 0.0;
  for (Real x : v.value().data()) s += static_cast<double>(x) * x;
  return s / static_cast<double>(v.size()) <= kDegenerateVariance;
}

Var normalized_dot(const Var& a, const Var& b) {
  const Var dot = ops::sum(ops::mul(a, b));
  const Var norms = ops::sqrt(ops::mul(ops::sum(ops::square(a)), ops::sum(ops::square(b))));
  return ops::div(dot, norms);
}

Var unit_range_var(const Var& v) {
  const Var lo = ops::min_all(v);
  const Var range = ops::sub(ops::max_all(v), lo);
  return ops::div(ops::sub(v, ops::expand(lo, v.shape())), ops::expand(range, v.shape()));
}

Var ssim_var(const Var& a, const Var& b) {
  Tape& tape = a.tape();
  const int h = a.shape()[0], w = a.shape()[1];
  const int win = ssim_window(h, w);
  const Var kernel = tape.constant(Tensor(Shape{1, 1, win, win}, 1.0f / static_cast<Real>(win * win)));
  const Var x = ops::reshape(unit_range_var(a), Shape{1, h, w});
  const Var y = ops::reshape(unit_range_var(b), Shape{1, h, w});
  auto blur = [&](const Var& v) { return ops::conv2d(v, kernel, nullptr, 1, 0); };
  const Var mx = blur(x), my = blur(y);
  const Var mxx = ops::mul(mx, mx), myy = ops::mul(my, my), mxy = ops::mul(mx, my);
  const Var vx = ops::sub(blur(ops::mul(x, x)), mxx);
  const Var vy = ops::sub(blur(ops::mul(y, y)), myy);
  const Var cxy = ops::sub(blur(ops::mul(x, y)), mxy);
  const Var num = ops::mul(ops::add_scalar(ops::scale(mxy, 2.0f), kSsimC1), ops::add_scalar(ops::scale(cxy, 2.0f), kSsimC2));
  const Var den = ops::mul(ops::add_scalar(ops::add(mxx, myy), kSsimC1), ops::add_scalar(ops::add(vx, vy), kSsimC2));
  return ops::mean(ops::div(num, den));
}

bool flat(const Var& v) {
  auto d = v.value().data();
  const auto [lo, hi] = std::minmax_element(d.begin(), d.end());
  return !(*hi - *lo > 0.0f);
}

}  // namespace

CorrelationVar correlate_var(const Var& a, const Var& b, CorrelationMetric metric, CrossCorrelationMode cross_mode) {
  if (a.shape() != b.shape()) {
    throw InternalError("correlate: unmatched shapes " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Tape& tape = a.tape();
  auto degenerate = [&] { return CorrelationVar{tape.constant(Tensor::scalar(0.0f)), true}; };
  switch (metric) {
    case CorrelationMetric::pearson: {
      const Var ca = centered(a), cb = centered(b);
      if (low_energy(ca) || low_energy(cb)) return degenerate();
      return {normalized_dot(ca, cb), false};
    }
    case CorrelationMetric::cross_correlation: {
      const bool mean_free = cross_mode == CrossCorrelationMode::mean_free;
      const Var ca = mean_free ? centered(a) : a, cb = mean_free ? centered(b) : b;
      if (low_energy(ca) || low_energy(cb)) return degenerate();
      return {normalized_dot(ca, cb), false};
    }
    case CorrelationMetric::ssim:
      if (flat(a) || flat(b)) return degenerate();
      return {ssim_var(a, b), false};
  }
  throw InternalError("bad metric");
}

// ---- the loss ------------------------------------------------------------------

json to_json(const ConsistencyDiagnostics& d) {
  return json{{"correlation", d.correlation}, {"class_index", d.class_index}, {"mask_mu", d.mask_mu},
              {"mask_sigma", d.mask_sigma}, {"skipped", d.skipped}};
}

ConsistencyTerm consistency_loss_on(const Model& model, const ParamVars& params, const Var& x,
                                    const ConsistencyConfig& cfg, bool create_graph) {
  cfg.validate();
  Tape& tape = x.tape();
  const int channels = x.shape()[0], height = x.shape()[1], width = x.shape()[2];
  const ForwardPass first = forward_on(model, params, x);
  ConsistencyTerm term;
  auto& diag = term.diag;
  diag.class_index = top_class(first.logits.value());
  const int cls = diag.class_index;

  auto gradcam = [&](const ForwardPass& pass, const std::string& layer) {
    return grad_cam_terms(model, pass, cls, layer, cfg.gradcam_relu, create_graph).map;
  };
  auto pixel_map = [&](const ForwardPass& pass) {
    if (cfg.pair == AttributionPair::gradcam_ig) {
      return integrated_gradients_map(model, params, pass.input, cls, *cfg.ig, cfg.reduction, create_graph);
    }
    return guided_backprop_map(pass, cls, cfg.reduction, create_graph);
  };
  auto masked_input = [&](const Var& source) {
    Var p = mask_var(source, cfg.sigma, &diag.mask_mu, &diag.mask_sigma);
    if (cfg.freeze_mask) p = tape.constant(p.value());
    return ops::mul(ops::expand_channels(p, channels), x);
  };

  Var a, b;
  if (cfg.pair == AttributionPair::layer_pair) {
    const auto& [first_layer, second_layer] = *cfg.layer_pair_names;
    a = gradcam(first, first_layer);
    b = gradcam(first, second_layer);
    const auto size = [](const Var& v) { return v.shape()[0] * v.shape()[1]; };
    if (size(a) < size(b)) a = ops::upsample_bilinear(a, b.shape()[0], b.shape()[1]);
    if (size(b) < size(a)) b = ops::upsample_bilinear(b, a.shape()[0], a.shape()[1]);
  } else {
    switch (cfg.matching) {
      case ResolutionMatching::gb_as_mask: {
        a = gradcam(first, cfg.target_layer);
        const ForwardPass second = forward_on(model, params, masked_input(pixel_map(first)));
        b = gradcam(second, cfg.target_layer);
        break;
      }
      case ResolutionMatching::gradcam_as_mask: {
        const Var cam = ops::upsample_bilinear(gradcam(first, cfg.target_layer), height, width);
        a = pixel_map(first);
        const ForwardPass second = forward_on(model, params, masked_input(cam));
        b = pixel_map(second);
        break;
      }
      case ResolutionMatching::gradcam_upsample:
        a = ops::upsample_bilinear(ops::box_filter3(gradcam(first, cfg.target_layer)), height, width);
        b = pixel_map(first);
        break;
      case ResolutionMatching::gb_maxpool: {
        a = gradcam(first, cfg.target_layer);
        b = ops::adaptive_maxpool2d(pixel_map(first), a.shape()[0], a.shape()[1]);
        break;
      }
    }
  }
  if (a.shape() != b.shape()) throw InternalError("consistency maps differ in shape after resolution matching");

  diag.map_a = a.value();
  diag.map_b = b.value();
  const CorrelationVar corr = correlate_var(a, b, cfg.metric, cfg.cross_mode);
  diag.skipped = corr.degenerate;
  diag.correlation = corr.value.value()[0];
  term.loss = ops::neg(corr.value);
  if (!term.loss.value().all_finite()) throw NumericError("consistency loss is not finite");
  return term;
}

ConsistencyResult consistency_loss(const Model& model, const Tensor& x, const ConsistencyConfig& cfg,
                                   bool with_grads) {
  Tape tape;
  const ParamVars params = bind_parameters(model, tape, with_grads);
  const Var input = tape.leaf(x, true);
  ConsistencyTerm term = consistency_loss_on(model, params, input, cfg, with_grads);
  ConsistencyResult result{term.loss.value()[0], std::move(term.diag), std::nullopt};
  if (with_grads && !result.diag.skipped) {
    std::vector<Var> vars;
    std::vector<std::string> names;
    for (const auto& [name, v] : params) {
      names.push_back(name);
      vars.push_back(v);
    }
    auto grads = tape.gradients(term.loss, vars, false);
    ParamMap out;
    for (std::size_t i = 0; i < names.size(); ++i) {
      require_finite(grads[i].value(), "consistency gradient of " + names[i]);
      out[names[i]] = grads[i].value();
    }
    result.grads = std::move(out);
  }
  return result;
}

}  // namespace atcon
