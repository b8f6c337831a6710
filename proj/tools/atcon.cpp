// atcon command-line tool: data generation, training, attribution export,
// evaluation and the resolution-matching x metric ablation.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "atcon/attribution.hpp"
#include "atcon/consistency.hpp"
#include "atcon/data.hpp"
#include "atcon/errors.hpp"
#include "atcon/evaluate.hpp"
#include "atcon/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace atcon;

namespace {

// ---- small helpers -----------------------------------------------------------------

void write_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << content;
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("expected a comma-separated integer list, got '" + text + "'");
    }
  }
  return out;
}

// key=value lines; '#' starts a comment.
std::vector<std::pair<std::string, std::string>> read_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key=value");
    }
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

const std::vector<int>& split_ids(const Dataset& ds, const std::string& split) {
  if (split == "train") return ds.split.train;
  if (split == "val") return ds.split.val;
  if (split == "test") return ds.split.test;
  throw ConfigError("unknown split '" + split + "'");
}

// ---- option groups --------------------------------------------------------------------

struct ConsistencyOptions {
  std::string pair = "gradcam_gb";
  std::string matching = "gb_as_mask";
  std::string metric = "pearson";
  int ig_steps = 5;
  std::string layer_pair;
  std::string layer;
  bool gradcam_relu = true;
  std::string reduction = "max_abs";
  std::string sigma = "std";
  bool freeze_mask = false;
  std::string cross_mode = "raw_normalized";

  void add(CLI::App* app) {
    app->add_option("--pair", pair, "attribution pair: gradcam_gb, gradcam_ig, layer_pair");
    app->add_option("--matching", matching, "gb_as_mask, gradcam_as_mask, gradcam_upsample, gb_maxpool");
    app->add_option("--metric", metric, "pearson, cross_correlation, ssim");
    app->add_option("--ig-steps", ig_steps, "integrated gradients steps (gradcam_ig)");
    app->add_option("--layer-pair", layer_pair, "two conv layer names 'a,b' (layer_pair); default last two");
    app->add_option("--layer", layer, "Grad-CAM layer; default last conv layer");
    app->add_option("--gradcam-relu", gradcam_relu, "apply ReLU to Grad-CAM maps");
    app->add_option("--reduction", reduction, "input-gradient channel reduction: max_abs, mean_abs, l2");
    app->add_option("--sigma", sigma, "mask dispersion: std or variance");
    app->add_option("--freeze-mask", freeze_mask, "stop gradients through the mask");
    app->add_option("--cross-mode", cross_mode, "cross-correlation: raw_normalized or mean_free");
  }

  ConsistencyConfig build(const Model& model) const {
    ConsistencyConfig c;
    c.pair = parse_attribution_pair(pair);
    c.matching = parse_resolution_matching(matching);
    c.metric = parse_correlation_metric(metric);
    if (c.pair == AttributionPair::gradcam_ig) c.ig = IGConfig{ig_steps, std::nullopt};
    if (c.pair == AttributionPair::layer_pair) {
      if (layer_pair.empty()) {
        c.layer_pair_names = ConsistencyConfig::layer_baseline(model, c.metric).layer_pair_names;
      } else {
        const auto comma = layer_pair.find(',');
        if (comma == std::string::npos) throw ConfigError("--layer-pair needs two names separated by ','");
        const std::string a = layer_pair.substr(0, comma), b = layer_pair.substr(comma + 1);
        c.layer_pair_names = std::make_pair(resolve_conv_layer(model, a), resolve_conv_layer(model, b));
      }
    }
    c.target_layer = layer.empty() ? "" : resolve_conv_layer(model, layer);
    c.gradcam_relu = gradcam_relu;
    c.reduction = parse_channel_reduction(reduction);
    c.sigma = parse_sigma_mode(sigma);
    c.freeze_mask = freeze_mask;
    c.cross_mode = parse_cross_correlation_mode(cross_mode);
    c.validate();
    return c;
  }
};

struct TrainOptions {
  std::string dataset;
  std::string out_dir;
  std::string checkpoint;
  std::string strategy = "supervised";
  int epochs = 20;
  double lr = 1e-3;
  int batch_size = 8;
  double lambda = 1.0;
  std::uint64_t seed = 0;
  std::string selection = "mean_f1";
  bool augment = true;
  int per_class = 0;
  std::string channels = "8,16,32";
  ConsistencyOptions consistency;

  void add(CLI::App* app, bool with_strategy) {
    app->add_option("--dataset", dataset, "dataset directory")->required();
    app->add_option("--out-dir", out_dir, "output directory")->required();
    app->add_option("--checkpoint", checkpoint, "initial model checkpoint; default builds a fresh model");
    if (with_strategy) app->add_option("--strategy", strategy, "supervised, finetune, combined, alternated");
    app->add_option("--epochs", epochs, "epoch budget");
    app->add_option("--lr", lr, "Adam learning rate");
    app->add_option("--batch-size", batch_size, "batch size");
    app->add_option("--lambda", lambda, "consistency weight for the combined strategy");
    app->add_option("--seed", seed, "seed for initialisation, batch order and augmentation");
    app->add_option("--selection", selection, "checkpoint selection metric: mean_f1 or mAP");
    app->add_option("--augment", augment, "augment supervised batches");
    app->add_option("--per-class", per_class, "subsample the train split to N images per class (0 = all)");
    app->add_option("--channels", channels, "conv channels per block for a fresh model");
    consistency.add(app);
  }

  Model initial_model(const Dataset& ds) const {
    if (!checkpoint.empty()) return load_model(checkpoint);
    TinyCnnConfig cfg;
    cfg.channels = parse_int_list(channels);
    cfg.input_channels = ds.channels;
    cfg.image_size = ds.image_size;
    cfg.num_classes = ds.num_classes;
    cfg.head_mode = ds.multilabel ? HeadMode::multilabel_sigmoid : HeadMode::multiclass_softmax;
    cfg.seed = seed;
    return build_tinycnn(cfg);
  }

  TrainConfig build(const Model& model) const {
    TrainConfig t;
    t.strategy = parse_strategy(strategy);
    t.epochs = epochs;
    t.lr = lr;
    t.batch_size = batch_size;
    t.lambda = lambda;
    t.seed = seed;
    t.selection = parse_selection_metric(selection);
    t.augment = augment;
    t.consistency = consistency.build(model);
    t.validate();
    return t;
  }

  DatasetSplit split(const Dataset& ds) const {
    return per_class > 0 ? subsample_per_class(ds, per_class, seed) : ds.split;
  }

  json effective() const {
    return json{{"dataset", dataset}, {"out_dir", out_dir}, {"checkpoint", checkpoint}, {"per_class", per_class},
                {"channels", channels}};
  }
};

// ---- commands -------------------------------------------------------------------------

struct GenDataOptions {
  SyntheticConfig cfg;
  std::string out_dir;
};

int cmd_gen_data(const GenDataOptions& o) {
  const Dataset ds = generate_synthetic(o.cfg);
  const json gen{{"classes", o.cfg.num_classes},          {"per_class", o.cfg.samples_per_class},
                 {"val_per_class", o.cfg.val_per_class},  {"test_per_class", o.cfg.test_per_class},
                 {"image_size", o.cfg.image_size},        {"channels", o.cfg.channels},
                 {"multilabel", o.cfg.multilabel},        {"noise", o.cfg.noise},
                 {"seed", o.cfg.seed}};
  save_dataset(ds, o.out_dir, &gen);
  std::cout << "wrote " << ds.samples.size() << " samples (" << ds.split.train.size() << " train, "
            << ds.split.val.size() << " val, " << ds.split.test.size() << " test) to " << o.out_dir << '\n';
  return 0;
}

int cmd_train(const TrainOptions& o, bool finetune) {
  if (finetune && o.checkpoint.empty()) throw ConfigError("finetune needs --checkpoint");
  const Dataset ds = load_dataset(o.dataset);
  const Model start = o.initial_model(ds);
  TrainConfig cfg = o.build(start);
  if (finetune) cfg.strategy = Strategy::finetune;
  const DatasetSplit split = o.split(ds);
  const TrainResult result = train(start, ds, split, cfg);

  const fs::path out = o.out_dir;
  fs::create_directories(out);
  json effective = o.effective();
  effective["train"] = to_json(cfg);
  save_model(result.model, out / "model");
  write_atomic(out / "run_log.jsonl", result.log.to_jsonl(cfg));
  write_atomic(out / "config.json", effective.dump(2) + "\n");
  std::cout << to_string(cfg.strategy) << ": " << result.log.epochs.size() << " epochs, best epoch "
            << result.log.best_epoch << " (" << to_string(cfg.selection) << " " << result.log.best_metric << ")\n";
  return 0;
}

struct AttributeOptions {
  std::string checkpoint, dataset, out_dir;
  std::string split = "test";
  std::string ids;
  int limit = 8;
  std::string method = "all";
  int class_index = -1;
  std::string layer;
  int ig_steps = 5;
  std::string reduction = "max_abs";
};

int cmd_attribute(const AttributeOptions& o) {
  const Dataset ds = load_dataset(o.dataset);
  const Model model = load_model(o.checkpoint);
  std::vector<int> ids = o.ids.empty() ? split_ids(ds, o.split) : parse_int_list(o.ids);
  if (o.ids.empty() && o.limit > 0 && static_cast<int>(ids.size()) > o.limit) ids.resize(static_cast<std::size_t>(o.limit));
  std::vector<AttributionMethod> methods;
  if (o.method == "all") {
    methods = {AttributionMethod::grad_cam, AttributionMethod::guided_backprop, AttributionMethod::integrated_gradients};
  } else if (o.method == "grad_cam" || o.method == "guided_backprop" || o.method == "integrated_gradients") {
    for (auto m : {AttributionMethod::grad_cam, AttributionMethod::guided_backprop,
                   AttributionMethod::integrated_gradients}) {
      if (to_string(m) == o.method) methods.push_back(m);
    }
  } else {
    throw ConfigError("unknown method '" + o.method + "'");
  }
  const ChannelReduction reduction = parse_channel_reduction(o.reduction);
  const fs::path out = o.out_dir;
  const fs::path tmp = out / "maps.tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  json index = json::array();
  for (int id : ids) {
    const auto& s = ds.at(id);
    const int cls = o.class_index >= 0 ? o.class_index : top_class(model.logits(s.image));
    for (auto m : methods) {
      AttributionMap map;
      switch (m) {
        case AttributionMethod::grad_cam: map = grad_cam(model, s.image, cls, o.layer); break;
        case AttributionMethod::guided_backprop: map = guided_backprop(model, s.image, cls, reduction); break;
        case AttributionMethod::integrated_gradients:
          map = integrated_gradients(model, s.image, cls, IGConfig{o.ig_steps, std::nullopt}, reduction);
          break;
      }
      char stem[64];
      std::snprintf(stem, sizeof stem, "%06d_%s", id, to_string(m).c_str());
      export_map(map, tmp / stem, &s.image);
      index.push_back({{"id", id}, {"class", cls}, {"method", to_string(m)}, {"stem", std::string("maps/") + stem},
                       {"shape", map.values.shape()}});
    }
  }
  fs::remove_all(out / "maps");
  fs::rename(tmp, out / "maps");
  const json effective{{"checkpoint", o.checkpoint}, {"dataset", o.dataset}, {"out_dir", o.out_dir},
                       {"split", o.split},           {"ids", ids},         {"method", o.method},
                       {"class", o.class_index},     {"layer", o.layer},   {"ig_steps", o.ig_steps},
                       {"reduction", o.reduction}};
  write_atomic(out / "attributions.json", json{{"config", effective}, {"maps", index}}.dump(2) + "\n");
  write_atomic(out / "config.json", effective.dump(2) + "\n");
  std::cout << "exported " << index.size() << " maps to " << (out / "maps").string() << '\n';
  return 0;
}

struct EvalOptionsCli {
  std::string checkpoint, dataset, out_dir;
  std::string split = "test";
  ConsistencyOptions consistency;
};

int cmd_eval(const EvalOptionsCli& o) {
  const Dataset ds = load_dataset(o.dataset);
  const Model model = load_model(o.checkpoint);
  const ConsistencyConfig ccfg = o.consistency.build(model);
  const auto& ids = split_ids(ds, o.split);
  EvalOptions eopts;
  eopts.layer = ccfg.target_layer;
  eopts.gradcam_relu = ccfg.gradcam_relu;
  const EvalReport report = evaluate_model(model, ds, ids, eopts);
  const ConsistencySummary cons = mean_consistency(model, ds, ids, ccfg);

  json metrics = to_json(report);
  metrics["split"] = o.split;
  metrics["consistency"] = {{"config", to_json(ccfg)},
                            {"mean_correlation", cons.mean_correlation},
                            {"mean_loss", cons.mean_loss},
                            {"used", cons.used},
                            {"skipped", cons.skipped}};
  const json effective{{"checkpoint", o.checkpoint}, {"dataset", o.dataset}, {"out_dir", o.out_dir},
                       {"split", o.split}, {"consistency", to_json(ccfg)}};
  const fs::path out = o.out_dir;
  write_atomic(out / "metrics.json", metrics.dump(2) + "\n");
  write_atomic(out / "metrics.csv", to_csv(report));
  write_atomic(out / "config.json", effective.dump(2) + "\n");
  std::cout << format_report(report);
  std::printf("consistency %s/%s: mean correlation %.4f over %d samples (%d skipped)\n",
              to_string(ccfg.matching).c_str(), to_string(ccfg.metric).c_str(), cons.mean_correlation, cons.used,
              cons.skipped);
  return 0;
}

int cmd_ablate(const TrainOptions& o) {
  const Dataset ds = load_dataset(o.dataset);
  const Model start = o.initial_model(ds);
  TrainConfig cfg = o.build(start);
  cfg.strategy = Strategy::supervised_only;
  const DatasetSplit split = o.split(ds);
  const LossCorrelationMatrix matrix = monitor_loss_correlation(start, ds, split, cfg, ablation_grid(cfg.consistency));

  const fs::path out = o.out_dir;
  json effective = o.effective();
  effective["train"] = to_json(cfg);
  json result = matrix.to_json();
  result["config"] = effective;
  write_atomic(out / "ablation.json", result.dump(2) + "\n");
  write_atomic(out / "ablation.csv", matrix.to_csv());
  write_atomic(out / "config.json", effective.dump(2) + "\n");
  std::cout << "Pearson x100 between validation consistency loss and validation cross-entropy over "
            << matrix.supervised_series.size() << " epochs (* = constant series)\n"
            << matrix.format_table();
  return 0;
}

// Splices `--config FILE` entries in front of the command-line arguments so that
// flags given explicitly win (options keep their last value).
std::vector<std::string> layered_args(int argc, char** argv, CLI::App& app) {
  std::vector<std::string> args(argv + 1, argv + argc);
  if (args.empty()) return args;
  CLI::App* sub = nullptr;
  try {
    sub = app.get_subcommand(args.front());
  } catch (const CLI::OptionNotFound&) {
    return args;
  }
  std::string config_path;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) config_path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0) config_path = args[i].substr(9);
  }
  if (config_path.empty()) return args;
  std::vector<std::string> out{args.front()};
  for (const auto& [key, value] : read_config_file(config_path)) {
    if (key == "config" || sub->get_option_no_throw("--" + key) == nullptr) {
      throw ConfigError("unknown key '" + key + "' in " + config_path + " for command " + args.front());
    }
    out.push_back("--" + key);
    out.push_back(value);
  }
  out.insert(out.end(), args.begin() + 1, args.end());
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"atcon: attention-consistency training and attribution toolkit"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  std::string config_file;

  GenDataOptions gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate the synthetic shapes dataset");
  gen_cmd->add_option("--classes", gen.cfg.num_classes, "number of classes (2-8)");
  gen_cmd->add_option("--per-class", gen.cfg.samples_per_class, "train images per class");
  gen_cmd->add_option("--val-per-class", gen.cfg.val_per_class, "validation images per class");
  gen_cmd->add_option("--test-per-class", gen.cfg.test_per_class, "test images per class");
  gen_cmd->add_option("--image-size", gen.cfg.image_size, "square image size (>= 32)");
  gen_cmd->add_option("--channels", gen.cfg.channels, "1 or 3");
  gen_cmd->add_option("--multilabel", gen.cfg.multilabel, "1-3 shapes per image");
  gen_cmd->add_option("--noise", gen.cfg.noise, "background noise amplitude");
  gen_cmd->add_option("--seed", gen.cfg.seed, "generator seed");
  gen_cmd->add_option("--out-dir", gen.out_dir, "dataset directory")->required();
  gen_cmd->add_option("--config", config_file, "key=value config file");

  TrainOptions train_opts;
  auto* train_cmd = app.add_subcommand("train", "train a model with the chosen strategy");
  train_opts.add(train_cmd, true);
  train_cmd->add_option("--config", config_file, "key=value config file");

  TrainOptions finetune_opts;
  finetune_opts.epochs = 10;
  finetune_opts.lr = 1e-4;
  finetune_opts.augment = false;
  auto* finetune_cmd = app.add_subcommand("finetune", "unsupervised consistency fine-tuning of a checkpoint");
  finetune_opts.add(finetune_cmd, false);
  finetune_cmd->add_option("--config", config_file, "key=value config file");

  AttributeOptions attr;
  auto* attr_cmd = app.add_subcommand("attribute", "export Grad-CAM, guided backprop and IG maps");
  attr_cmd->add_option("--checkpoint", attr.checkpoint, "model checkpoint")->required();
  attr_cmd->add_option("--dataset", attr.dataset, "dataset directory")->required();
  attr_cmd->add_option("--out-dir", attr.out_dir, "output directory")->required();
  attr_cmd->add_option("--split", attr.split, "train, val or test");
  attr_cmd->add_option("--ids", attr.ids, "comma-separated sample ids (overrides --split)");
  attr_cmd->add_option("--limit", attr.limit, "maximum samples taken from the split (0 = all)");
  attr_cmd->add_option("--method", attr.method, "all, grad_cam, guided_backprop, integrated_gradients");
  attr_cmd->add_option("--class", attr.class_index, "class index; default the top predicted class");
  attr_cmd->add_option("--layer", attr.layer, "Grad-CAM layer; default last conv layer");
  attr_cmd->add_option("--ig-steps", attr.ig_steps, "integrated gradients steps");
  attr_cmd->add_option("--reduction", attr.reduction, "channel reduction: max_abs, mean_abs, l2");
  attr_cmd->add_option("--seed", gen.cfg.seed, "accepted for uniformity; attribution is deterministic");
  attr_cmd->add_option("--config", config_file, "key=value config file");

  EvalOptionsCli ev;
  auto* eval_cmd = app.add_subcommand("eval", "F1, mAP and Grad-CAM/box overlap on a split");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "model checkpoint")->required();
  eval_cmd->add_option("--dataset", ev.dataset, "dataset directory")->required();
  eval_cmd->add_option("--out-dir", ev.out_dir, "output directory")->required();
  eval_cmd->add_option("--split", ev.split, "train, val or test");
  ev.consistency.add(eval_cmd);
  eval_cmd->add_option("--seed", gen.cfg.seed, "accepted for uniformity; evaluation is deterministic");
  eval_cmd->add_option("--config", config_file, "key=value config file");

  TrainOptions ablate_opts;
  ablate_opts.epochs = 10;
  auto* ablate_cmd = app.add_subcommand("ablate", "loss-correlation matrix over matching x metric");
  ablate_opts.add(ablate_cmd, false);
  ablate_cmd->add_option("--config", config_file, "key=value config file");

  try {
    std::vector<std::string> args = layered_args(argc, argv, app);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen);
    if (*train_cmd) return cmd_train(train_opts, false);
    if (*finetune_cmd) return cmd_train(finetune_opts, true);
    if (*attr_cmd) return cmd_attribute(attr);
    if (*eval_cmd) return cmd_eval(ev);
    if (*ablate_cmd) return cmd_ablate(ablate_opts);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
