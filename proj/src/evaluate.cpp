#include "atcon/evaluate.hpp"

#include <algorithm>
#include <cmath>

#include "atcon/attribution.hpp"
#include "atcon/errors.hpp"
#include "atcon/parallel.hpp"

namespace atcon {

double supervised_loss_value(const Tensor& logits, const std::vector<int>& labels, HeadMode mode) {
  const auto z = logits.data();
  if (z.size() != labels.size()) throw DataError("label vector does not match the number of classes");
  if (mode == HeadMode::multiclass_softmax) {
    const auto target = std::find(labels.begin(), labels.end(), 1);
    if (target == labels.end() || std::count(labels.begin(), labels.end(), 1) != 1) {
      throw DataError("multiclass head needs one-hot labels");
    }
    const double hi = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (Real v : z) s += std::exp(v - hi);
    return hi + std::log(s) - z[static_cast<std::size_t>(target - labels.begin())];
  }
  double total = 0.0;
  for (std::size_t c = 0; c < z.size(); ++c) {
    const double v = z[c];
    const double softplus = v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
    total += softplus - labels[c] * v;
  }
  return total / static_cast<double>(z.size());
}

Predictions predict(const Model& model, const Dataset& dataset, const std::vector<int>& ids) {
  if (ids.empty()) throw DataError("no samples to evaluate");
  const int n = static_cast<int>(ids.size());
  Predictions p;
  p.probabilities.resize(ids.size());
  p.labels.resize(ids.size());
  std::vector<double> losses(ids.size());
  parallel_for(n, [&](int i) {
    const auto& s = dataset.at(ids[static_cast<std::size_t>(i)]);
    const Tensor logits = model.logits(s.image);
    const Tensor prob = model.probabilities(s.image);
    p.probabilities[static_cast<std::size_t>(i)].assign(prob.data().begin(), prob.data().end());
    p.labels[static_cast<std::size_t>(i)] = s.labels;
    losses[static_cast<std::size_t>(i)] = supervised_loss_value(logits, s.labels, model.head_mode());
  });
  for (double l : losses) p.mean_loss += l;
  p.mean_loss /= n;
  return p;
}

EvalReport evaluate_model(const Model& model, const Dataset& dataset, const std::vector<int>& ids,
                          const EvalOptions& opts) {
  const Predictions pred = predict(model, dataset, ids);
  EvalReport r;
  r.n_samples = static_cast<int>(ids.size());
  const F1Result f1 = f1_scores(pred.probabilities, pred.labels, model.head_mode());
  r.per_class_f1 = f1.per_class;
  r.mean_f1 = f1.mean;
  const APResult ap = mean_average_precision(pred.probabilities, pred.labels);
  r.per_class_ap = ap.per_class;
  r.map = ap.map;
  if (!opts.with_overlap) return r;

  // (sample, class) pairs classified correctly as positive
  std::vector<std::pair<int, int>> hits;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& prob = pred.probabilities[i];
    const auto& y = pred.labels[i];
    if (model.head_mode() == HeadMode::multiclass_softmax) {
      const int c = static_cast<int>(std::max_element(prob.begin(), prob.end()) - prob.begin());
      if (y[static_cast<std::size_t>(c)]) hits.emplace_back(static_cast<int>(i), c);
    } else {
      for (std::size_t c = 0; c < y.size(); ++c) {
        if (y[c] && prob[c] >= 0.5) hits.emplace_back(static_cast<int>(i), static_cast<int>(c));
      }
    }
  }
  std::vector<std::optional<double>> ious(hits.size());
  parallel_for(static_cast<int>(hits.size()), [&](int h) {
    const auto [i, c] = hits[static_cast<std::size_t>(h)];
    const auto& s = dataset.at(ids[static_cast<std::size_t>(i)]);
    std::vector<Box> boxes;
    for (const Box& b : s.boxes) {
      if (b.cls == c) boxes.push_back(b);
    }
    const AttributionMap map = grad_cam(model, s.image, c, opts.layer, opts.gradcam_relu);
    ious[static_cast<std::size_t>(h)] = overlap_iou(map.values, boxes, s.image.dim(1), s.image.dim(2));
  });
  r.n_true_positives = static_cast<int>(hits.size());
  double sum = 0.0;
  int counted = 0;
  for (const auto& v : ious) {
    if (v) {
      sum += *v;
      ++counted;
    } else {
      ++r.n_overlap_skipped;
    }
  }
  r.overlap_iou = counted ? sum / counted : 0.0;
  return r;
}

ConsistencySummary mean_consistency(const Model& model, const Dataset& dataset, const std::vector<int>& ids,
                                    const ConsistencyConfig& cfg) {
  std::vector<ConsistencyResult> results(ids.size());
  parallel_for(static_cast<int>(ids.size()), [&](int i) {
    results[static_cast<std::size_t>(i)] =
        consistency_loss(model, dataset.at(ids[static_cast<std::size_t>(i)]).image, cfg, false);
  });
  ConsistencySummary s;
  for (auto& r : results) {
    r.diag.map_a = Tensor();
    r.diag.map_b = Tensor();
    s.diagnostics.push_back(r.diag);
    if (r.diag.skipped) {
      ++s.skipped;
      continue;
    }
    ++s.used;
    s.mean_correlation += r.diag.correlation;
    s.mean_loss += r.loss;
  }
  if (s.used) {
    s.mean_correlation /= s.used;
    s.mean_loss /= s.used;
  }
  return s;
}

}  // namespace atcon
