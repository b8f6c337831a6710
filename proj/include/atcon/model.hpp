#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "atcon/autodiff.hpp"
#include "atcon/tensor.hpp"

namespace atcon {

enum class HeadMode { multiclass_softmax, multilabel_sigmoid };
enum class LayerKind { conv, relu, maxpool, global_avg_pool, linear };

std::string to_string(HeadMode mode);
HeadMode parse_head_mode(const std::string& text);
std::string to_string(LayerKind kind);
LayerKind parse_layer_kind(const std::string& text);

struct Layer {
  std::string name;
  LayerKind kind = LayerKind::relu;
  // conv: channels, square kernel, stride, pad. maxpool: kernel = window, stride.
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 0;
  int stride = 1;
  int pad = 0;
  // linear
  int in_features = 0;
  int out_features = 0;

  std::string weight_name() const { return name + ".weight"; }
  std::string bias_name() const { return name + ".bias"; }
};

/// Desk-scale conv -> relu -> maxpool blocks followed by global-average-pool and a linear head.
struct TinyCnnConfig {
  std::vector<int> channels{8, 16, 32};
  int input_channels = 3;
  int image_size = 32;
  int num_classes = 4;
  HeadMode head_mode = HeadMode::multiclass_softmax;
  std::uint64_t seed = 0;
};

using ParamMap = std::map<std::string, Tensor>;
using ParamVars = std::map<std::string, Var>;

/// Ordered sequence of named layers plus their parameters. Copyable value;
/// training works on its own copy.
class Model {
 public:
  Model(Shape input_shape, std::vector<Layer> layers, HeadMode head_mode, ParamMap params);

  const Shape& input_shape() const { return input_shape_; }
  const std::vector<Layer>& layers() const { return layers_; }
  HeadMode head_mode() const { return head_mode_; }
  int num_classes() const { return num_classes_; }

  const ParamMap& params() const { return params_; }
  ParamMap& mutable_params() { return params_; }
  void set_params(ParamMap params);

  bool has_layer(const std::string& name) const;
  const Layer& layer(const std::string& name) const;
  std::vector<std::string> conv_layer_names() const;
  std::string last_conv_layer() const;

  const std::optional<TinyCnnConfig>& config() const { return config_; }
  void set_config(TinyCnnConfig config) { config_ = std::move(config); }

  /// Plain inference without gradient recording.
  Tensor logits(const Tensor& x) const;
  /// Softmax or per-class sigmoid depending on head_mode.
  Tensor probabilities(const Tensor& x) const;

 private:
  Shape input_shape_;
  std::vector<Layer> layers_;
  HeadMode head_mode_;
  ParamMap params_;
  int num_classes_ = 0;
  std::optional<TinyCnnConfig> config_;
};

Model build_tinycnn(const TinyCnnConfig& config);

/// Puts every parameter on `tape` as a leaf.
ParamVars bind_parameters(const Model& model, Tape& tape, bool requires_grad);

/// Layer outputs of one pass, keyed by layer name, plus the logits.
struct ForwardPass {
  Var input;
  std::map<std::string, Var> activations;
  Var logits;
};

ForwardPass forward_on(const Model& model, const ParamVars& params, const Var& x);

/// Self-contained pass on a private tape. The input is a grad-requiring leaf so
/// input gradients can be taken afterwards.
struct ForwardRecord {
  std::unique_ptr<Tape> tape;
  ParamVars params;
  ForwardPass pass;

  const std::map<std::string, Var>& activations() const { return pass.activations; }
  const Var& logits() const { return pass.logits; }
};

ForwardRecord forward_record(const Model& model, const Tensor& x, bool params_require_grad = false);

/// argmax, ties to the lowest index.
int top_class(const Tensor& logits);

/// Checkpoint directory: one ATCT file per parameter plus manifest.json.
void save_model(const Model& model, const std::filesystem::path& dir);
Model load_model(const std::filesystem::path& dir);

}  // namespace atcon
