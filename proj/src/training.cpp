#include "atcon/training.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "atcon/errors.hpp"
#include "atcon/evaluate.hpp"
#include "atcon/ops.hpp"
#include "atcon/parallel.hpp"

namespace atcon {

using nlohmann::json;

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::supervised_only: return "supervised_only";
    case Strategy::finetune: return "finetune";
    case Strategy::combined: return "combined";
    case Strategy::alternated: return "alternated";
  }
  throw InternalError("bad strategy");
}

std::string to_string(SelectionMetric m) { return m == SelectionMetric::mean_f1 ? "mean_f1" : "mAP"; }

Strategy parse_strategy(const std::string& text) {
  if (text == "supervised") return Strategy::supervised_only;
  for (auto s : {Strategy::supervised_only, Strategy::finetune, Strategy::combined, Strategy::alternated}) {
    if (to_string(s) == text) return s;
  }
  throw ConfigError("unknown strategy '" + text + "'");
}

SelectionMetric parse_selection_metric(const std::string& text) {
  if (text == "mean_f1" || text == "f1") return SelectionMetric::mean_f1;
  if (text == "mAP" || text == "map") return SelectionMetric::map;
  throw ConfigError("unknown selection metric '" + text + "'");
}

void TrainConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be a finite value >= 0");
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be >= 0");
  consistency.validate();
}

json to_json(const TrainConfig& cfg) {
  return json{{"strategy", to_string(cfg.strategy)},
              {"lr", cfg.lr},
              {"batch_size", cfg.batch_size},
              {"epochs", cfg.epochs},
              {"lambda", cfg.lambda},
              {"seed", cfg.seed},
              {"selection_metric", to_string(cfg.selection)},
              {"augment", cfg.augment},
              {"consistency", to_json(cfg.consistency)}};
}

// ---- optimizer -----------------------------------------------------------------

Adam::Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(ParamMap& params, const ParamMap& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& [name, p] : params) {
    const auto it = grads.find(name);
    if (it == grads.end()) throw InternalError("no gradient for parameter " + name);
    const Tensor& g = it->second;
    if (g.shape() != p.shape()) throw InternalError("gradient shape mismatch for " + name);
    auto [mit, fresh] = m_.try_emplace(name, Tensor(p.shape()));
    auto& v = v_.try_emplace(name, Tensor(p.shape())).first->second;
    Tensor& m = mit->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      m[i] = static_cast<Real>(beta1_ * m[i] + (1.0 - beta1_) * gi);
      v[i] = static_cast<Real>(beta2_ * v[i] + (1.0 - beta2_) * gi * gi);
      const double mhat = m[i] / c1, vhat = v[i] / c2;
      p[i] = static_cast<Real>(p[i] - lr_ * mhat / (std::sqrt(vhat) + eps_));
    }
  }
}

// ---- gradients ------------------------------------------------------------------

Var supervised_loss_var(const Model& model, const ParamVars& params, const Var& x, const std::vector<int>& labels) {
  const Var logits = forward_on(model, params, x).logits;
  if (static_cast<int>(labels.size()) != model.num_classes()) {
    throw DataError("label vector does not match the number of classes");
  }
  if (model.head_mode() == HeadMode::multiclass_softmax) {
    if (std::count(labels.begin(), labels.end(), 1) != 1) throw DataError("multiclass head needs one-hot labels");
    const int y = static_cast<int>(std::find(labels.begin(), labels.end(), 1) - labels.begin());
    return ops::sub(ops::logsumexp(logits), ops::select(logits, y));
  }
  Tensor y(logits.shape());
  for (std::size_t c = 0; c < labels.size(); ++c) y[c] = static_cast<Real>(labels[c]);
  const Var per_class = ops::sub(ops::softplus(logits), ops::mul(x.tape().constant(std::move(y)), logits));
  return ops::mean(per_class);
}

namespace {

struct SampleGrad {
  ParamMap grads;
  double loss = 0.0;
  bool used = false;
};

SampleGrad grads_of(Tape& tape, const ParamVars& params, const Var& loss) {
  std::vector<Var> vars;
  for (const auto& [name, v] : params) vars.push_back(v);
  auto gs = tape.gradients(loss, vars, false);
  SampleGrad out;
  out.loss = loss.value()[0];
  out.used = true;
  std::size_t i = 0;
  for (const auto& [name, v] : params) {
    require_finite(gs[i].value(), "gradient of " + name);
    out.grads[name] = gs[i++].value();
  }
  return out;
}

// Fixed-order mean over the used samples, accumulated in double.
BatchGradient reduce(const Model& model, const std::vector<SampleGrad>& parts) {
  BatchGradient out;
  std::map<std::string, std::vector<double>> acc;
  for (const auto& [name, p] : model.params()) acc[name].assign(p.size(), 0.0);
  for (const auto& s : parts) {
    if (!s.used) {
      ++out.skipped;
      continue;
    }
    ++out.used;
    out.loss += s.loss;
    for (auto& [name, a] : acc) {
      const Tensor& g = s.grads.at(name);
      for (std::size_t i = 0; i < a.size(); ++i) a[i] += g[i];
    }
  }
  const double scale = out.used ? 1.0 / out.used : 0.0;
  out.loss *= scale;
  for (const auto& [name, p] : model.params()) {
    Tensor g(p.shape());
    const auto& a = acc[name];
    for (std::size_t i = 0; i < a.size(); ++i) g[i] = static_cast<Real>(a[i] * scale);
    out.grads.emplace(name, std::move(g));
  }
  return out;
}

}  // namespace

BatchGradient supervised_gradient(const Model& model, const std::vector<Tensor>& images,
                                  const std::vector<std::vector<int>>& labels) {
  if (images.size() != labels.size()) throw DataError("image and label counts differ");
  std::vector<SampleGrad> parts(images.size());
  parallel_for(static_cast<int>(images.size()), [&](int i) {
    Tape tape;
    const ParamVars params = bind_parameters(model, tape, true);
    const Var x = tape.constant(images[static_cast<std::size_t>(i)]);
    const Var loss = supervised_loss_var(model, params, x, labels[static_cast<std::size_t>(i)]);
    parts[static_cast<std::size_t>(i)] = grads_of(tape, params, loss);
  });
  return reduce(model, parts);
}

BatchGradient consistency_gradient(const Model& model, const std::vector<Tensor>& images,
                                   const ConsistencyConfig& cfg) {
  std::vector<SampleGrad> parts(images.size());
  parallel_for(static_cast<int>(images.size()), [&](int i) {
    Tape tape;
    const ParamVars params = bind_parameters(model, tape, true);
    const Var x = tape.leaf(images[static_cast<std::size_t>(i)], true);
    ConsistencyTerm term = consistency_loss_on(model, params, x, cfg, true);
    if (!term.diag.skipped) parts[static_cast<std::size_t>(i)] = grads_of(tape, params, term.loss);
  });
  return reduce(model, parts);
}

// ---- training loop --------------------------------------------------------------

std::string RunLog::to_jsonl(const TrainConfig& cfg) const {
  std::ostringstream out;
  out << json{{"type", "config"}, {"config", to_json(cfg)}}.dump() << '\n';
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  for (const auto& e : epochs) {
    out << json{{"type", "epoch"},
                {"epoch", e.epoch},
                {"train_supervised_loss", opt(e.train_supervised_loss)},
                {"train_consistency_loss", opt(e.train_consistency_loss)},
                {"supervised_steps", e.supervised_steps},
                {"consistency_steps", e.consistency_steps},
                {"consistency_skipped", e.consistency_skipped},
                {"val_loss", e.val_loss},
                {"val_consistency_loss", e.val_consistency_loss},
                {"val_f1", e.val_f1},
                {"val_map", e.val_map},
                {"val_metric", e.val_metric}}
               .dump()
        << '\n';
  }
  out << json{{"type", "best"}, {"epoch", best_epoch}, {"metric", best_metric}}.dump() << '\n';
  return out.str();
}

namespace {

using EpochHook = std::function<void(int epoch, const Model& model)>;

void check_inputs(const Model& model, const Dataset& dataset, const DatasetSplit& split) {
  if (split.train.empty()) throw DataError("empty training split");
  if (split.val.empty()) throw DataError("empty validation split");
  if (dataset.num_classes != model.num_classes()) {
    throw DataError("dataset has " + std::to_string(dataset.num_classes) + " classes, model has " +
                    std::to_string(model.num_classes()));
  }
  if (dataset.multilabel != (model.head_mode() == HeadMode::multilabel_sigmoid)) {
    throw DataError("dataset labelling does not match the model head mode");
  }
}

void fill_validation(const Model& model, const Dataset& dataset, const DatasetSplit& split, const TrainConfig& cfg,
                     EpochLog& e) {
  const EvalReport r = evaluate_model(model, dataset, split.val, EvalOptions{"", true, false});
  e.val_loss = predict(model, dataset, split.val).mean_loss;
  e.val_f1 = r.mean_f1;
  e.val_map = r.map;
  e.val_metric = cfg.selection == SelectionMetric::mean_f1 ? r.mean_f1 : r.map;
  e.val_consistency_loss = mean_consistency(model, dataset, split.val, cfg.consistency).mean_loss;
}

TrainResult run(const Model& start, const Dataset& dataset, const DatasetSplit& split, const TrainConfig& cfg,
                const EpochHook& hook) {
  cfg.validate();
  check_inputs(start, dataset, split);
  TrainResult result{start, {}};
  Model current = start;
  Adam adam(cfg.lr);
  std::mt19937_64 rng(cfg.seed);
  long batch_counter = 0;
  double best = -std::numeric_limits<double>::infinity();
  const bool use_augment = cfg.augment && cfg.strategy != Strategy::finetune;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<int> order = split.train;
    std::shuffle(order.begin(), order.end(), rng);
    EpochLog e;
    e.epoch = epoch;
    double sup_total = 0.0, cons_total = 0.0;
    for (std::size_t start_idx = 0; start_idx < order.size(); start_idx += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start_idx + static_cast<std::size_t>(cfg.batch_size));
      std::vector<Tensor> images;
      std::vector<std::vector<int>> labels;
      for (std::size_t i = start_idx; i < end; ++i) {
        const auto& s = dataset.at(order[i]);
        images.push_back(use_augment ? augment(s.image, s.id, epoch, cfg.seed) : s.image);
        labels.push_back(s.labels);
      }

      bool do_sup = false, do_cons = false;
      switch (cfg.strategy) {
        case Strategy::supervised_only: do_sup = true; break;
        case Strategy::finetune: do_cons = true; break;
        case Strategy::combined:
          do_sup = true;
          do_cons = cfg.lambda > 0.0;
          break;
        case Strategy::alternated:
          // first batch of the run is supervised
          (batch_counter % 2 == 0 ? do_sup : do_cons) = true;
          break;
      }
      ++batch_counter;

      std::optional<BatchGradient> sup, cons;
      if (do_sup) {
        sup = supervised_gradient(current, images, labels);
        sup_total += sup->loss;
        ++e.supervised_steps;
      }
      if (do_cons) {
        cons = consistency_gradient(current, images, cfg.consistency);
        e.consistency_skipped += cons->skipped;
        if (cons->used > 0) {
          cons_total += cons->loss;
          ++e.consistency_steps;
        } else {
          cons.reset();
        }
      }
      if (!sup && !cons) continue;
      ParamMap grads;
      if (sup && cons) {
        grads = sup->grads;
        const auto lambda = static_cast<Real>(cfg.lambda);
        for (auto& [name, g] : grads) {
          const Tensor& c = cons->grads.at(name);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += lambda * c[i];
        }
      } else {
        grads = sup ? sup->grads : cons->grads;
      }
      adam.step(current.mutable_params(), grads);
    }
    for (const auto& [name, p] : current.params()) require_finite(p, "parameter " + name);
    if (e.supervised_steps) e.train_supervised_loss = sup_total / e.supervised_steps;
    if (e.consistency_steps) e.train_consistency_loss = cons_total / e.consistency_steps;
    fill_validation(current, dataset, split, cfg, e);
    if (hook) hook(epoch, current);
    if (e.val_metric >= best) {
      best = e.val_metric;
      result.model = current;
      result.log.best_epoch = epoch;
      result.log.best_metric = e.val_metric;
    }
    result.log.epochs.push_back(std::move(e));
  }
  if (cfg.epochs == 0) {
    EpochLog e;
    fill_validation(start, dataset, split, cfg, e);
    result.log.best_metric = e.val_metric;
  }
  return result;
}

}  // namespace

TrainResult train(const Model& model, const Dataset& dataset, const DatasetSplit& split, const TrainConfig& cfg) {
  return run(model, dataset, split, cfg, nullptr);
}

TrainResult train_supervised(const Model& model, const Dataset& dataset, const DatasetSplit& split, TrainConfig cfg) {
  cfg.strategy = Strategy::supervised_only;
  return train(model, dataset, split, cfg);
}

TrainResult finetune_consistency(const Model& model, const Dataset& dataset, const DatasetSplit& split,
                                 TrainConfig cfg) {
  cfg.strategy = Strategy::finetune;
  return train(model, dataset, split, cfg);
}

TrainResult train_combined(const Model& model, const Dataset& dataset, const DatasetSplit& split, TrainConfig cfg) {
  cfg.strategy = Strategy::combined;
  return train(model, dataset, split, cfg);
}

TrainResult train_alternated(const Model& model, const Dataset& dataset, const DatasetSplit& split, TrainConfig cfg) {
  cfg.strategy = Strategy::alternated;
  return train(model, dataset, split, cfg);
}

// ---- loss-correlation monitoring --------------------------------------------------

double series_pearson(const std::vector<double>& a, const std::vector<double>& b, bool* degenerate) {
  if (a.size() != b.size()) throw DimensionError("series lengths differ");
  if (a.size() < 2) throw DataError("series too short for a correlation");
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cov += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  const bool flat = !(va > 0.0) || !(vb > 0.0);
  if (degenerate) *degenerate = flat;
  if (flat) return 0.0;
  return std::clamp(cov / std::sqrt(va * vb), -1.0, 1.0);
}

std::vector<ConsistencyConfig> ablation_grid(const ConsistencyConfig& base) {
  std::vector<ConsistencyConfig> grid;
  for (auto m : ablation_rows()) {
    for (auto h : ablation_columns()) {
      ConsistencyConfig c = base;
      c.matching = m;
      c.metric = h;
      grid.push_back(c);
    }
  }
  return grid;
}

const LossCorrelationCell& LossCorrelationMatrix::cell(ResolutionMatching matching, CorrelationMetric metric) const {
  for (const auto& c : cells) {
    if (c.matching == matching && c.metric == metric) return c;
  }
  throw ConfigError("no cell " + to_string(matching) + "/" + to_string(metric));
}

json LossCorrelationMatrix::to_json() const {
  json rows = json::array();
  for (const auto& c : cells) {
    rows.push_back({{"matching", atcon::to_string(c.matching)},
                    {"metric", atcon::to_string(c.metric)},
                    {"row", display_name(c.matching)},
                    {"column", display_name(c.metric)},
                    {"coefficient", c.coefficient},
                    {"degenerate", c.degenerate},
                    {"consistency_series", c.consistency_series}});
  }
  return json{{"supervised_series", supervised_series}, {"cells", rows}};
}

std::string LossCorrelationMatrix::to_csv() const {
  std::ostringstream out;
  out << "matching";
  for (auto h : ablation_columns()) out << ',' << display_name(h);
  out << '\n';
  char buf[32];
  for (auto m : ablation_rows()) {
    out << display_name(m);
    for (auto h : ablation_columns()) {
      std::snprintf(buf, sizeof buf, ",%.1f", 100.0 * cell(m, h).coefficient);
      out << buf;
    }
    out << '\n';
  }
  return out.str();
}

std::string LossCorrelationMatrix::format_table() const {
  std::ostringstream out;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%-22s", "");
  out << buf;
  for (auto h : ablation_columns()) {
    std::snprintf(buf, sizeof buf, "%18s", display_name(h).c_str());
    out << buf;
  }
  out << '\n';
  for (auto m : ablation_rows()) {
    std::snprintf(buf, sizeof buf, "%-22s", display_name(m).c_str());
    out << buf;
    for (auto h : ablation_columns()) {
      const auto& c = cell(m, h);
      std::snprintf(buf, sizeof buf, "%17.1f%s", 100.0 * c.coefficient, c.degenerate ? "*" : " ");
      out << buf;
    }
    out << '\n';
  }
  return out.str();
}

LossCorrelationMatrix monitor_loss_correlation(const Model& model, const Dataset& dataset, const DatasetSplit& split,
                                               const TrainConfig& cfg, const std::vector<ConsistencyConfig>& grid) {
  if (cfg.epochs < 3) throw ConfigError("loss-correlation monitoring needs at least 3 epochs");
  if (grid.empty()) throw ConfigError("empty consistency grid");
  for (const auto& g : grid) g.validate();
  TrainConfig sup = cfg;
  sup.strategy = Strategy::supervised_only;

  LossCorrelationMatrix out;
  for (const auto& g : grid) out.cells.push_back(LossCorrelationCell{g.matching, g.metric, {}, 0.0, false});
  run(model, dataset, split, sup, [&](int, const Model& current) {
    out.supervised_series.push_back(predict(current, dataset, split.val).mean_loss);
    for (std::size_t i = 0; i < grid.size(); ++i) {
      out.cells[i].consistency_series.push_back(mean_consistency(current, dataset, split.val, grid[i]).mean_loss);
    }
  });
  for (auto& c : out.cells) c.coefficient = series_pearson(c.consistency_series, out.supervised_series, &c.degenerate);
  return out;
}

}  // namespace atcon
