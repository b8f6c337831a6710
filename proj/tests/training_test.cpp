#include <algorithm>
#include <random>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "atcon/errors.hpp"
#include "atcon/evaluate.hpp"
#include "atcon/training.hpp"
#include "test_util.hpp"

using namespace atcon;
using atcon::testing::tiny_model;

namespace {

// Two classes on 3x8x8 images: a bright top half or a bright bottom half, plus noise.
Dataset separable_blobs(int per_class, std::uint64_t seed) {
  Dataset d;
  d.num_classes = 2;
  d.image_size = 8;
  d.channels = 3;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> noise(0.0f, 0.2f);
  auto add = [&](int cls, std::vector<int>& split) {
    LabeledSample s;
    s.id = static_cast<int>(d.samples.size());
    s.image = Tensor(Shape{3, 8, 8});
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) s.image.at(c, y, x) = noise(rng) + (((y < 4) == (cls == 0)) ? 0.7f : 0.0f);
    s.labels = {cls == 0, cls == 1};
    s.boxes = {Box{cls, 0, cls == 0 ? 0 : 4, 8, cls == 0 ? 4 : 8}};
    split.push_back(s.id);
    d.samples.push_back(std::move(s));
  };
  for (int i = 0; i < per_class; ++i)
    for (int c = 0; c < 2; ++c) add(c, d.split.train);
  for (int i = 0; i < 3; ++i)
    for (int c = 0; c < 2; ++c) add(c, d.split.val);
  d.split.samples_per_class = per_class;
  d.validate();
  return d;
}

TrainConfig quick_config(Strategy strategy, int epochs = 2) {
  TrainConfig cfg;
  cfg.strategy = strategy;
  cfg.lr = 1e-2;
  cfg.batch_size = 4;
  cfg.epochs = epochs;
  cfg.seed = 3;
  cfg.augment = false;
  return cfg;
}

Model blob_model(std::uint64_t seed = 1) { return tiny_model(seed, 2); }

}  // namespace

TEST(Adam, FirstStepMovesByLearningRate) {
  ParamMap p{{"w", Tensor::from({1.0f, -2.0f, 3.0f})}};
  const ParamMap g{{"w", Tensor::from({0.5f, -4.0f, 0.0f})}};
  Adam adam(0.1);
  adam.step(p, g);
  EXPECT_NEAR(p.at("w")[0], 0.9, 1e-6);
  EXPECT_NEAR(p.at("w")[1], -1.9, 1e-6);
  EXPECT_EQ(p.at("w")[2], 3.0f);
  EXPECT_EQ(adam.steps(), 1);
  ParamMap missing{{"v", Tensor::from({1.0f})}};
  EXPECT_THROW(adam.step(missing, g), InternalError);
}

TEST(Training, ConfigValidation) {
  TrainConfig cfg;
  cfg.lr = -1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.lr = 1e-3;
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.batch_size = 1;
  cfg.lambda = -0.5;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_EQ(parse_strategy("supervised"), Strategy::supervised_only);
  EXPECT_EQ(parse_strategy("alternated"), Strategy::alternated);
  EXPECT_THROW(parse_strategy("mixed"), ConfigError);
  EXPECT_EQ(parse_selection_metric("mAP"), SelectionMetric::map);
}

TEST(Training, InputErrors) {
  Dataset d = separable_blobs(2, 1);
  DatasetSplit empty = d.split;
  empty.train.clear();
  EXPECT_THROW(train(blob_model(), d, empty, quick_config(Strategy::supervised_only)), DataError);
  EXPECT_THROW(train(tiny_model(1, 3), d, d.split, quick_config(Strategy::supervised_only)), DataError);
  EXPECT_THROW(train(tiny_model(1, 2, HeadMode::multilabel_sigmoid), d, d.split,
                     quick_config(Strategy::supervised_only)),
               DataError);
}

TEST(Training, SeparableToyConverges) {
  const Dataset d = separable_blobs(8, 2);
  TrainConfig cfg = quick_config(Strategy::supervised_only, 50);
  const auto r = train_supervised(blob_model(), d, d.split, cfg);
  ASSERT_EQ(r.log.epochs.size(), 50u);
  EXPECT_LT(*r.log.epochs.back().train_supervised_loss, 0.1);
  EXPECT_LT(predict(r.model, d, d.split.train).mean_loss, 0.1);
}

TEST(Training, ZeroLearningRateKeepsParameters) {
  const Dataset d = separable_blobs(4, 3);
  for (Strategy s : {Strategy::supervised_only, Strategy::finetune, Strategy::combined, Strategy::alternated}) {
    TrainConfig cfg = quick_config(s, 3);
    cfg.lr = 0.0;
    const Model start = blob_model();
    EXPECT_EQ(train(start, d, d.split, cfg).model.params(), start.params()) << to_string(s);
  }
}

TEST(Training, ZeroEpochsReturnsInputModel) {
  const Dataset d = separable_blobs(2, 4);
  const Model start = blob_model(5);
  const auto r = finetune_consistency(start, d, d.split, quick_config(Strategy::finetune, 0));
  EXPECT_EQ(r.model.params(), start.params());
  EXPECT_EQ(r.log.best_epoch, 0);
  EXPECT_TRUE(r.log.epochs.empty());
}

TEST(Training, DeterministicRunLog) {
  const Dataset d = separable_blobs(4, 5);
  const TrainConfig cfg = quick_config(Strategy::alternated, 3);
  const auto a = train(blob_model(), d, d.split, cfg), b = train(blob_model(), d, d.split, cfg);
  EXPECT_EQ(a.log.to_jsonl(cfg), b.log.to_jsonl(cfg));
  EXPECT_EQ(a.model.params(), b.model.params());
  TrainConfig other = cfg;
  other.seed = 4;
  EXPECT_NE(train(blob_model(), d, d.split, other).model.params(), a.model.params());
}

TEST(Training, CheckpointIsBestLoggedEpoch) {
  const Dataset d = separable_blobs(4, 6);
  for (SelectionMetric sel : {SelectionMetric::mean_f1, SelectionMetric::map}) {
    TrainConfig cfg = quick_config(Strategy::supervised_only, 5);
    cfg.selection = sel;
    const auto r = train(blob_model(), d, d.split, cfg);
    double best = -1;
    int best_epoch = 0;
    for (const auto& e : r.log.epochs) {
      EXPECT_EQ(e.val_metric, sel == SelectionMetric::mean_f1 ? e.val_f1 : e.val_map);
      if (e.val_metric >= best) best = e.val_metric, best_epoch = e.epoch;
    }
    EXPECT_EQ(r.log.best_metric, best);
    EXPECT_EQ(r.log.best_epoch, best_epoch);
    const EvalReport rep = evaluate_model(r.model, d, d.split.val, EvalOptions{"", true, false});
    EXPECT_DOUBLE_EQ(sel == SelectionMetric::mean_f1 ? rep.mean_f1 : rep.map, best);
  }
}

TEST(Training, CombinedWithZeroLambdaIsSupervised) {
  const Dataset d = separable_blobs(4, 7);
  TrainConfig cfg = quick_config(Strategy::combined, 3);
  cfg.lambda = 0.0;
  cfg.augment = true;
  const auto comb = train_combined(blob_model(), d, d.split, cfg);
  const auto sup = train_supervised(blob_model(), d, d.split, cfg);
  EXPECT_EQ(comb.model.params(), sup.model.params());
  for (std::size_t i = 0; i < comb.log.epochs.size(); ++i) {
    EXPECT_EQ(comb.log.epochs[i].train_supervised_loss, sup.log.epochs[i].train_supervised_loss);
    EXPECT_EQ(comb.log.epochs[i].consistency_steps, 0);
  }
}

TEST(Training, CombinedGradientIsSumOfSeparatePasses) {
  const Dataset d = separable_blobs(3, 8);
  TrainConfig cfg = quick_config(Strategy::combined, 1);
  cfg.lambda = 0.7;
  cfg.batch_size = static_cast<int>(d.split.train.size());  // one step over the whole set
  const Model start = blob_model(2);
  const auto r = train_combined(start, d, d.split, cfg);

  // same batch order as the trainer: one shuffle of the train ids with the run seed
  std::vector<int> order = d.split.train;
  std::mt19937_64 rng(cfg.seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Tensor> images;
  std::vector<std::vector<int>> labels;
  for (int id : order) images.push_back(d.at(id).image), labels.push_back(d.at(id).labels);
  const auto sup = supervised_gradient(start, images, labels);
  const auto cons = consistency_gradient(start, images, cfg.consistency);
  ASSERT_GT(cons.used, 0);
  ParamMap total = sup.grads;
  for (auto& [name, g] : total)
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += static_cast<Real>(cfg.lambda) * cons.grads.at(name)[i];
  Model expected = start;
  Adam(cfg.lr).step(expected.mutable_params(), total);
  EXPECT_EQ(r.model.params(), expected.params());
  EXPECT_NEAR(*r.log.epochs[0].train_supervised_loss, sup.loss, 1e-12);
  EXPECT_NEAR(*r.log.epochs[0].train_consistency_loss, cons.loss, 1e-12);
}

TEST(Training, AlternationSchedule) {
  const Dataset d = separable_blobs(4, 9);  // 8 train images
  TrainConfig cfg = quick_config(Strategy::alternated, 2);
  cfg.batch_size = 4;  // two batches per epoch
  auto r = train_alternated(blob_model(), d, d.split, cfg);
  for (const auto& e : r.log.epochs) {
    EXPECT_EQ(e.supervised_steps, 1);
    EXPECT_EQ(e.consistency_steps + (e.consistency_skipped > 0 ? 1 : 0), 1);
  }
  cfg.batch_size = 3;  // three batches per epoch: S C S | C S C
  r = train_alternated(blob_model(), d, d.split, cfg);
  EXPECT_EQ(r.log.epochs[0].supervised_steps, 2);
  EXPECT_EQ(r.log.epochs[1].supervised_steps, 1);
  EXPECT_EQ(r.log.epochs[1].consistency_steps, 2);
  ASSERT_TRUE(r.log.epochs[0].train_supervised_loss && r.log.epochs[0].train_consistency_loss);
}

TEST(Training, FinetuneIgnoresTrainLabels) {
  const Dataset d = separable_blobs(4, 10);
  Dataset permuted = d;
  std::vector<std::vector<int>> train_labels;
  for (int id : d.split.train) train_labels.push_back(d.at(id).labels);
  std::rotate(train_labels.begin(), train_labels.begin() + 1, train_labels.end());
  for (std::size_t i = 0; i < d.split.train.size(); ++i) permuted.samples[d.split.train[i]].labels = train_labels[i];
  const TrainConfig cfg = quick_config(Strategy::finetune, 3);
  const Model start = blob_model(4);
  const auto a = finetune_consistency(start, d, d.split, cfg);
  const auto b = finetune_consistency(start, permuted, permuted.split, cfg);
  EXPECT_EQ(a.model.params(), b.model.params());
  EXPECT_NE(a.model.params(), start.params());
  for (const auto& e : a.log.epochs) {
    EXPECT_EQ(e.supervised_steps, 0);
    ASSERT_TRUE(e.train_consistency_loss.has_value());
    EXPECT_TRUE(std::isfinite(*e.train_consistency_loss));
  }
}

TEST(Training, RunLogJsonLines) {
  const Dataset d = separable_blobs(2, 11);
  const TrainConfig cfg = quick_config(Strategy::combined, 2);
  const auto r = train(blob_model(), d, d.split, cfg);
  std::istringstream in(r.log.to_jsonl(cfg));
  std::vector<nlohmann::json> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(nlohmann::json::parse(line));
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[0].at("config").at("strategy"), "combined");
  EXPECT_EQ(lines[1].at("epoch"), 1);
  EXPECT_FALSE(lines[2].at("train_supervised_loss").is_null());
  EXPECT_FALSE(lines[2].at("train_consistency_loss").is_null());
  EXPECT_EQ(lines[3].at("type"), "best");
}

TEST(SeriesPearson, CopiesConstantsAndErrors) {
  const std::vector<double> a{3.0, 2.0, 2.5, 1.0};
  EXPECT_NEAR(series_pearson(a, a), 1.0, 1e-12);
  bool degenerate = false;
  EXPECT_EQ(series_pearson(a, {0.4, 0.4, 0.4, 0.4}, &degenerate), 0.0);
  EXPECT_TRUE(degenerate);
  EXPECT_THROW(series_pearson(a, {1.0, 2.0}), DimensionError);
}

TEST(MonitorLossCorrelation, GridShapeAndMinimumEpochs) {
  const Dataset d = separable_blobs(2, 12);
  TrainConfig cfg = quick_config(Strategy::supervised_only, 2);
  EXPECT_THROW(monitor_loss_correlation(blob_model(), d, d.split, cfg, ablation_grid()), ConfigError);
  cfg.epochs = 3;
  const auto m = monitor_loss_correlation(blob_model(), d, d.split, cfg, ablation_grid());
  ASSERT_EQ(m.cells.size(), 12u);
  EXPECT_EQ(m.supervised_series.size(), 3u);
  // the supervised series is the validation loss of the supervised-only run
  const auto run = train_supervised(blob_model(), d, d.split, cfg);
  for (int e = 0; e < 3; ++e) EXPECT_EQ(m.supervised_series[e], run.log.epochs[e].val_loss);
  for (const auto& c : m.cells) {
    EXPECT_EQ(c.consistency_series.size(), 3u);
    EXPECT_GE(c.coefficient, -1.0);
    EXPECT_LE(c.coefficient, 1.0);
  }
  const std::string csv = m.to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "matching,Pearson,Cross-correlation,SSIM");
  for (const char* row : {"GB as mask", "Grad-CAM as mask", "Grad-CAM Upsampling", "GB Pooling"})
    EXPECT_NE(csv.find(std::string("\n") + row + ","), std::string::npos) << row;
}
