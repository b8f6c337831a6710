#include "atcon/model.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

#include "atcon/errors.hpp"
#include "atcon/ops.hpp"

namespace atcon {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(HeadMode mode) {
  return mode == HeadMode::multiclass_softmax ? "multiclass_softmax" : "multilabel_sigmoid";
}

HeadMode parse_head_mode(const std::string& text) {
  if (text == "multiclass_softmax" || text == "multiclass") return HeadMode::multiclass_softmax;
  if (text == "multilabel_sigmoid" || text == "multilabel") return HeadMode::multilabel_sigmoid;
  throw ConfigError("unknown head mode '" + text + "'");
}

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::global_avg_pool: return "global_avg_pool";
    case LayerKind::linear: return "linear";
  }
  throw InternalError("bad layer kind");
}

LayerKind parse_layer_kind(const std::string& text) {
  for (auto k : {LayerKind::conv, LayerKind::relu, LayerKind::maxpool, LayerKind::global_avg_pool, LayerKind::linear}) {
    if (to_string(k) == text) return k;
  }
  throw ConfigError("unknown layer kind '" + text + "'");
}

namespace {

void expect_param(const ParamMap& params, const std::string& name, const Shape& shape) {
  auto it = params.find(name);
  if (it == params.end()) throw ConfigError("missing parameter '" + name + "'");
  if (it->second.shape() != shape) {
    throw DimensionError("parameter '" + name + "' has shape " + shape_string(it->second.shape()) + ", expected " +
                         shape_string(shape));
  }
}

}  // namespace

Model::Model(Shape input_shape, std::vector<Layer> layers, HeadMode head_mode, ParamMap params)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)), head_mode_(head_mode), params_(std::move(params)) {
  if (input_shape_.size() != 3) throw DimensionError("model input must be [C,H,W]");
  std::set<std::string> names;
  std::set<std::string> expected_params;
  Shape shape = input_shape_;
  bool seen_conv = false;
  for (const auto& layer : layers_) {
    if (layer.name.empty() || !names.insert(layer.name).second) {
      throw ConfigError("layer names must be unique and non-empty: '" + layer.name + "'");
    }
    switch (layer.kind) {
      case LayerKind::conv: {
        if (shape.size() != 3 || shape[0] != layer.in_channels || layer.kernel < 1 || layer.stride < 1 || layer.pad < 0) {
          throw ConfigError("conv layer '" + layer.name + "' does not fit input " + shape_string(shape));
        }
        if (layer.kernel > shape[1] + 2 * layer.pad || layer.kernel > shape[2] + 2 * layer.pad) {
          throw ConfigError("conv layer '" + layer.name + "' kernel exceeds its input");
        }
        expect_param(params_, layer.weight_name(), {layer.out_channels, layer.in_channels, layer.kernel, layer.kernel});
        expect_param(params_, layer.bias_name(), {layer.out_channels});
        expected_params.insert({layer.weight_name(), layer.bias_name()});
        shape = {layer.out_channels, (shape[1] + 2 * layer.pad - layer.kernel) / layer.stride + 1,
                 (shape[2] + 2 * layer.pad - layer.kernel) / layer.stride + 1};
        seen_conv = true;
        break;
      }
      case LayerKind::relu:
        break;
      case LayerKind::maxpool:
        if (shape.size() != 3 || layer.kernel < 1 || layer.stride < 1 || layer.kernel > shape[1] || layer.kernel > shape[2]) {
          throw ConfigError("maxpool layer '" + layer.name + "' does not fit input " + shape_string(shape));
        }
        shape = {shape[0], (shape[1] - layer.kernel) / layer.stride + 1, (shape[2] - layer.kernel) / layer.stride + 1};
        break;
      case LayerKind::global_avg_pool:
        if (shape.size() != 3) throw ConfigError("global_avg_pool layer '" + layer.name + "' needs [C,H,W] input");
        shape = {shape[0]};
        break;
      case LayerKind::linear:
        if (shape.size() != 1 || shape[0] != layer.in_features || layer.out_features < 1) {
          throw ConfigError("linear layer '" + layer.name + "' does not fit input " + shape_string(shape));
        }
        expect_param(params_, layer.weight_name(), {layer.out_features, layer.in_features});
        expect_param(params_, layer.bias_name(), {layer.out_features});
        expected_params.insert({layer.weight_name(), layer.bias_name()});
        shape = {layer.out_features};
        break;
    }
  }
  if (!seen_conv) throw ConfigError("model needs at least one conv layer before the head");
  if (shape.size() != 1) throw ConfigError("model output must be a logit vector, got " + shape_string(shape));
  if (params_.size() != expected_params.size()) throw ConfigError("model has parameters not used by any layer");
  num_classes_ = shape[0];
}

void Model::set_params(ParamMap params) {
  for (const auto& [name, t] : params_) expect_param(params, name, t.shape());
  if (params.size() != params_.size()) throw ConfigError("parameter set does not match model");
  params_ = std::move(params);
}

bool Model::has_layer(const std::string& name) const {
  for (const auto& l : layers_) {
    if (l.name == name) return true;
  }
  return false;
}

const Layer& Model::layer(const std::string& name) const {
  for (const auto& l : layers_) {
    if (l.name == name) return l;
  }
  throw ConfigError("unknown layer '" + name + "'");
}

std::vector<std::string> Model::conv_layer_names() const {
  std::vector<std::string> out;
  for (const auto& l : layers_) {
    if (l.kind == LayerKind::conv) out.push_back(l.name);
  }
  return out;
}

std::string Model::last_conv_layer() const { return conv_layer_names().back(); }

Tensor Model::logits(const Tensor& x) const {
  Tape tape;
  auto params = bind_parameters(*this, tape, false);
  return forward_on(*this, params, tape.constant(x)).logits.value();
}

Tensor Model::probabilities(const Tensor& x) const {
  Tensor z = logits(x);
  Tensor p(z.shape());
  if (head_mode_ == HeadMode::multilabel_sigmoid) {
    for (std::size_t i = 0; i < z.size(); ++i) p[i] = 1.0f / (1.0f + std::exp(-z[i]));
    return p;
  }
  Real m = z[0];
  for (Real v : z.data()) m = std::max(m, v);
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) total += std::exp(static_cast<double>(z[i] - m));
  for (std::size_t i = 0; i < z.size(); ++i) p[i] = static_cast<Real>(std::exp(static_cast<double>(z[i] - m)) / total);
  return p;
}

Model build_tinycnn(const TinyCnnConfig& config) {
  if (config.channels.size() < 2) throw ConfigError("tinycnn needs at least two blocks");
  if (config.num_classes < 1 || config.input_channels < 1 || config.image_size < 4) {
    throw ConfigError("invalid tinycnn configuration");
  }
  std::mt19937_64 rng(config.seed);
  ParamMap params;
  std::vector<Layer> layers;
  auto he = [&](Shape shape, int fan_in) {
    Tensor t(std::move(shape));
    std::normal_distribution<Real> dist(0.0f, std::sqrt(2.0f / static_cast<Real>(fan_in)));
    for (auto& v : t.data()) v = dist(rng);
    return t;
  };

  int in_c = config.input_channels;
  int size = config.image_size;
  for (std::size_t b = 0; b < config.channels.size(); ++b) {
    const int out_c = config.channels[b];
    if (out_c < 1) throw ConfigError("block channel counts must be positive");
    const std::string prefix = "block" + std::to_string(b);
    Layer conv{.name = prefix + ".conv", .kind = LayerKind::conv, .in_channels = in_c, .out_channels = out_c,
               .kernel = 3, .stride = 1, .pad = 1};
    params[conv.weight_name()] = he({out_c, in_c, 3, 3}, in_c * 9);
    params[conv.bias_name()] = Tensor(Shape{out_c});
    layers.push_back(conv);
    layers.push_back(Layer{.name = prefix + ".relu", .kind = LayerKind::relu});
    if (size < 2) throw ConfigError("image too small for the requested number of blocks");
    layers.push_back(Layer{.name = prefix + ".pool", .kind = LayerKind::maxpool, .kernel = 2, .stride = 2});
    size /= 2;
    in_c = out_c;
  }
  layers.push_back(Layer{.name = "gap", .kind = LayerKind::global_avg_pool});
  Layer head{.name = "head", .kind = LayerKind::linear, .in_features = in_c, .out_features = config.num_classes};
  params[head.weight_name()] = he({config.num_classes, in_c}, in_c);
  params[head.bias_name()] = Tensor(Shape{config.num_classes});
  layers.push_back(head);

  Model model({config.input_channels, config.image_size, config.image_size}, std::move(layers), config.head_mode,
              std::move(params));
  model.set_config(config);
  return model;
}

ParamVars bind_parameters(const Model& model, Tape& tape, bool requires_grad) {
  ParamVars vars;
  for (const auto& [name, t] : model.params()) vars.emplace(name, tape.leaf(t, requires_grad));
  return vars;
}

ForwardPass forward_on(const Model& model, const ParamVars& params, const Var& x) {
  if (x.shape() != model.input_shape()) {
    throw DimensionError("input shape " + shape_string(x.shape()) + " does not match model input " +
                         shape_string(model.input_shape()));
  }
  ForwardPass pass;
  pass.input = x;
  Var h = x;
  for (const auto& layer : model.layers()) {
    switch (layer.kind) {
      case LayerKind::conv: {
        const Var& b = params.at(layer.bias_name());
        h = ops::conv2d(h, params.at(layer.weight_name()), &b, layer.stride, layer.pad);
        break;
      }
      case LayerKind::relu: h = ops::relu(h); break;
      case LayerKind::maxpool: h = ops::maxpool2d(h, layer.kernel, layer.stride); break;
      case LayerKind::global_avg_pool: h = ops::global_avg_pool(h); break;
      case LayerKind::linear:
        h = ops::linear(h, params.at(layer.weight_name()), params.at(layer.bias_name()));
        break;
    }
    pass.activations[layer.name] = h;
  }
  pass.logits = h;
  return pass;
}

ForwardRecord forward_record(const Model& model, const Tensor& x, bool params_require_grad) {
  ForwardRecord rec;
  rec.tape = std::make_unique<Tape>();
  rec.params = bind_parameters(model, *rec.tape, params_require_grad);
  Var input = rec.tape->leaf(x, true);
  rec.pass = forward_on(model, rec.params, input);
  return rec;
}

int top_class(const Tensor& logits) {
  if (logits.empty()) throw DimensionError("top_class on empty logits");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return static_cast<int>(best);
}

// ---- checkpoints -------------------------------------------------------------

void save_model(const Model& model, const fs::path& dir) {
  json manifest;
  manifest["format"] = "atcon-model";
  manifest["version"] = 1;
  manifest["input_shape"] = model.input_shape();
  manifest["head_mode"] = to_string(model.head_mode());
  json layers = json::array();
  for (const auto& l : model.layers()) {
    layers.push_back({{"name", l.name}, {"kind", to_string(l.kind)}, {"in_channels", l.in_channels},
                      {"out_channels", l.out_channels}, {"kernel", l.kernel}, {"stride", l.stride}, {"pad", l.pad},
                      {"in_features", l.in_features}, {"out_features", l.out_features}});
  }
  manifest["layers"] = layers;
  json params = json::array();
  for (const auto& [name, t] : model.params()) {
    params.push_back({{"name", name}, {"file", name + ".atct"}, {"shape", t.shape()}});
  }
  manifest["params"] = params;
  if (const auto& c = model.config()) {
    manifest["config"] = {{"channels", c->channels}, {"input_channels", c->input_channels},
                          {"image_size", c->image_size}, {"num_classes", c->num_classes},
                          {"head_mode", to_string(c->head_mode)}, {"seed", c->seed}};
  }

  // Write next to the destination, then swap in.
  const fs::path tmp = dir.string() + ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  for (const auto& [name, t] : model.params()) save_atct(tmp / (name + ".atct"), t);
  {
    std::ofstream out(tmp / "manifest.json");
    if (!out) throw IoError("cannot write model manifest in " + tmp.string());
    out << manifest.dump(2) << '\n';
  }
  fs::remove_all(dir);
  if (dir.has_parent_path()) fs::create_directories(dir.parent_path());
  fs::rename(tmp, dir);
}

Model load_model(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("no model manifest in " + dir.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("bad model manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "atcon-model") throw IoError("not an atcon model checkpoint: " + dir.string());
  std::vector<Layer> layers;
  for (const auto& l : manifest.at("layers")) {
    layers.push_back(Layer{.name = l.at("name"), .kind = parse_layer_kind(l.at("kind")),
                           .in_channels = l.at("in_channels"), .out_channels = l.at("out_channels"),
                           .kernel = l.at("kernel"), .stride = l.at("stride"), .pad = l.at("pad"),
                           .in_features = l.at("in_features"), .out_features = l.at("out_features")});
  }
  ParamMap params;
  for (const auto& p : manifest.at("params")) {
    params[p.at("name").get<std::string>()] = load_atct(dir / p.at("file").get<std::string>());
  }
  Model model(manifest.at("input_shape").get<Shape>(), std::move(layers),
              parse_head_mode(manifest.at("head_mode")), std::move(params));
  if (manifest.contains("config")) {
    const auto& c = manifest["config"];
    model.set_config(TinyCnnConfig{.channels = c.at("channels").get<std::vector<int>>(),
                                   .input_channels = c.at("input_channels"),
                                   .image_size = c.at("image_size"),
                                   .num_classes = c.at("num_classes"),
                                   .head_mode = parse_head_mode(c.at("head_mode")),
                                   .seed = c.at("seed").get<std::uint64_t>()});
  }
  return model;
}

}  // namespace atcon
