#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "atcon/consistency.hpp"
#include "atcon/data.hpp"

namespace atcon {

enum class Strategy { supervised_only, finetune, combined, alternated };
enum class SelectionMetric { mean_f1, map };

std::string to_string(Strategy s);
std::string to_string(SelectionMetric m);
Strategy parse_strategy(const std::string& text);  // also accepts "supervised"
SelectionMetric parse_selection_metric(const std::string& text);

struct TrainConfig {
  Strategy strategy = Strategy::supervised_only;
  double lr = 1e-3;
  int batch_size = 8;
  int epochs = 20;
  double lambda = 1.0;  // weight of the consistency term in the combined strategy
  std::uint64_t seed = 0;
  SelectionMetric selection = SelectionMetric::mean_f1;
  ConsistencyConfig consistency;
  bool augment = true;  // supervised batches only; fine-tuning never augments

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);

/// Adam with bias correction.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(ParamMap& params, const ParamMap& grads);
  long steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  ParamMap m_, v_;
};

/// Per-sample supervised loss on the tape of `x`.
Var supervised_loss_var(const Model& model, const ParamVars& params, const Var& x, const std::vector<int>& labels);

struct BatchGradient {
  ParamMap grads;     // mean over contributing samples; zeros when none contribute
  double loss = 0.0;  // mean over contributing samples
  int used = 0;
  int skipped = 0;
};

/// Mean supervised gradient over `images`/`labels`.
BatchGradient supervised_gradient(const Model& model, const std::vector<Tensor>& images,
                                  const std::vector<std::vector<int>>& labels);
/// Mean consistency gradient over the non-skipped images. Labels are never read.
BatchGradient consistency_gradient(const Model& model, const std::vector<Tensor>& images,
                                   const ConsistencyConfig& cfg);

struct EpochLog {
  int epoch = 0;
  std::optional<double> train_supervised_loss;   // mean over supervised updates
  std::optional<double> train_consistency_loss;  // mean over consistency updates
  int supervised_steps = 0;
  int consistency_steps = 0;
  int consistency_skipped = 0;
  double val_loss = 0.0;              // validation cross-entropy
  double val_consistency_loss = 0.0;  // validation consistency loss (labels unused)
  double val_f1 = 0.0;
  double val_map = 0.0;
  double val_metric = 0.0;  // the selection metric
};

struct RunLog {
  std::vector<EpochLog> epochs;
  int best_epoch = 0;  // 0 means the input model was kept
  double best_metric = 0.0;

  /// One JSON object per line: a header with the effective config, then the epochs.
  std::string to_jsonl(const TrainConfig& cfg) const;
};

struct TrainResult {
  Model model;
  RunLog log;
};

/// Strategy-dispatched training on split.train, selecting the checkpoint with
/// the best validation metric on split.val (ties go to the later epoch).
TrainResult train(const Model& model, const Dataset& dataset, const DatasetSplit& split, const TrainConfig& cfg);

TrainResult train_supervised(const Model& model, const Dataset& dataset, const DatasetSplit& split, TrainConfig cfg);
TrainResult finetune_consistency(const Model& model, const Dataset& dataset, const DatasetSplit& split,
                                 TrainConfig cfg);
TrainResult train_combined(const Model& model, const Dataset& dataset, const DatasetSplit& split, TrainConfig cfg);
TrainResult train_alternated(const Model& model, const Dataset& dataset, const DatasetSplit& split, TrainConfig cfg);

/// Pearson correlation of two series; a constant series gives 0 and sets `degenerate`.
double series_pearson(const std::vector<double>& a, const std::vector<double>& b, bool* degenerate = nullptr);

struct LossCorrelationCell {
  ResolutionMatching matching = ResolutionMatching::gb_as_mask;
  CorrelationMetric metric = CorrelationMetric::pearson;
  std::vector<double> consistency_series;
  double coefficient = 0.0;
  bool degenerate = false;
};

struct LossCorrelationMatrix {
  std::vector<double> supervised_series;  // validation cross-entropy per epoch
  std::vector<LossCorrelationCell> cells;  // row-major over ablation_rows() x ablation_columns()

  const LossCorrelationCell& cell(ResolutionMatching matching, CorrelationMetric metric) const;
  nlohmann::json to_json() const;
  std::string to_csv() const;  // coefficients x100, labelled rows and columns
  std::string format_table() const;
};

/// Supervised-only training for cfg.epochs epochs; after every epoch each grid
/// cell's validation consistency loss is recorded next to the validation
/// cross-entropy. Needs at least 3 epochs.
LossCorrelationMatrix monitor_loss_correlation(const Model& model, const Dataset& dataset, const DatasetSplit& split,
                                               const TrainConfig& cfg, const std::vector<ConsistencyConfig>& grid);

/// The 4x3 grid of resolution matching x correlation metric on top of `base`.
std::vector<ConsistencyConfig> ablation_grid(const ConsistencyConfig& base = {});

}  // namespace atcon
