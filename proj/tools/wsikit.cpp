// wsikit: train MIL slide classifiers on tile-descriptor bags and explain
// them with gradient attributions and feature heat-maps.
//
// Subcommands: gen-data, train, explain, heatmap, eval, ascent.
// Exit codes: 0 success, 2 usage error, 1 runtime failure.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "wsikit/data.hpp"
#include "wsikit/eval.hpp"
#include "wsikit/interpret.hpp"
#include "wsikit/model.hpp"
#include "wsikit/parallel.hpp"
#include "wsikit/random.hpp"
#include "wsikit/tensor.hpp"
#include "wsikit/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace wsikit;

namespace {

// Post-parse validation failures that are really usage errors.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flat or per-subcommand JSON config file: {"train": {"epochs": 5}, ...}.
class JsonConfig : public CLI::Config {
 public:
  std::string to_config(const CLI::App*, bool, bool, std::string) const override {
    return "{}\n";
  }

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    json j = json::parse(input);
    std::vector<CLI::ConfigItem> items;
    walk(j, {}, items);
    return items;
  }

 private:
  static void walk(const json& j, std::vector<std::string> parents,
                   std::vector<CLI::ConfigItem>& items) {
    for (const auto& [key, value] : j.items()) {
      if (value.is_object()) {
        auto deeper = parents;
        deeper.push_back(key);
        walk(value, deeper, items);
        continue;
      }
      CLI::ConfigItem item;
      item.parents = parents;
      item.name = key;
      if (value.is_array()) {
        for (const auto& v : value) item.inputs.push_back(scalar_to_string(v));
      } else {
        item.inputs.push_back(scalar_to_string(value));
      }
      items.push_back(std::move(item));
    }
  }

  static std::string scalar_to_string(const json& v) {
    if (v.is_string()) return v.get<std::string>();
    return v.dump();
  }
};

struct GenDataArgs {
  std::string out_dir;
  std::size_t slides = 200;
  std::size_t tiles = 100;
  std::size_t dim = 64;
  std::size_t planted = 4;
  double pos_fraction = 0.1;
  double shift = 2.0;
  double sigma = 1.0;
  double test_fraction = 129.0 / 345.0;
  std::uint64_t seed = 42;
};

struct TrainArgs {
  std::string manifest;
  std::string out_model;
  std::string history;
  std::string arch = "minmax";
  std::size_t r = 5;
  std::size_t attn_hidden = 128;
  std::string attn_act = "tanh";
  std::vector<std::size_t> extractor_hidden;
  std::size_t epochs = 30;
  double lr = 1e-3;
  double l2 = 1e-4;
  std::size_t batch = 8;
  std::string optimizer = "adam";
  std::uint64_t seed = 42;
};

struct ExplainArgs {
  std::string manifest;
  std::string model;
  std::string out = "features.json";
  std::string split = "test";
  int class_index = -1;  // -1: all classes
  std::size_t top_positions = 0;  // 0: default M/2
  std::size_t top_features = 8;
  double quantile = 0.9;
};

struct HeatmapArgs {
  std::string manifest;
  std::string model;
  std::string features;
  std::string out = "heatmaps.csv";
  std::string split = "test";
  std::size_t class_index = 1;
};

struct EvalArgs {
  std::string manifest;
  std::string model;
  std::string heatmaps;
  std::string out = "report.json";
  std::string split = "test";
  std::size_t class_index = 1;
};

struct AscentArgs {
  std::string model;
  std::size_t feature = 0;
  std::string out = "ascent.json";
  double step = 0.1;
  std::size_t max_iters = 512;
  double tol = 1e-6;
  std::uint64_t seed = 42;
};

int run_gen_data(const GenDataArgs& a) {
  data::PlantedConfig cfg;
  cfg.n_slides = a.slides;
  cfg.tiles_per_slide = a.tiles;
  cfg.dim = a.dim;
  cfg.pos_tile_fraction = a.pos_fraction;
  cfg.signal_shift = a.shift;
  cfg.noise_sigma = a.sigma;
  cfg.seed = a.seed;
  if (a.planted == 0) throw UsageError("gen-data: --planted must be >= 1 (no signal otherwise)");
  if (a.planted > a.dim) throw UsageError("gen-data: more planted features than dimensions");
  cfg.planted_features = data::pick_planted_features(a.dim, a.planted, a.seed);

  auto manifest = data::generate_synthetic(cfg, a.out_dir);
  data::split_train_test(manifest, a.test_fraction, rng::derive_seed(a.seed, "split"));
  data::save_manifest(manifest, fs::path(a.out_dir) / "manifest.json");

  std::size_t n_train = manifest.split_entries("train").size();
  std::size_t n_test = manifest.split_entries("test").size();
  std::cout << "generated " << a.slides << " slides (" << n_train << " train / " << n_test
            << " test), " << a.tiles << " tiles x dim " << a.dim << "\nplanted features:";
  for (auto f : cfg.planted_features) std::cout << ' ' << f;
  std::cout << "\nmanifest: " << (fs::path(a.out_dir) / "manifest.json").string() << '\n';
  return 0;
}

model::ModelConfig model_config_from_args(const TrainArgs& a, std::size_t data_dim) {
  model::ModelConfig cfg;
  cfg.content_dim = data_dim;
  cfg.descriptor_dim = data_dim;
  cfg.classes = 2;
  cfg.aggregator = a.arch == "attention" ? model::AggregatorKind::Attention
                                         : model::AggregatorKind::MinMax;
  cfg.minmax_r = a.r;
  cfg.attention_hidden = a.attn_hidden;
  cfg.attention_nonlinearity = a.attn_act == "relu" ? model::AttentionNonlinearity::Relu
                                                    : model::AttentionNonlinearity::Tanh;
  cfg.identity_extractor = a.extractor_hidden.empty();
  cfg.extractor_hidden = a.extractor_hidden;
  cfg.init_seed = rng::derive_seed(a.seed, "model-init");
  return cfg;
}

int run_train(const TrainArgs& a) {
  auto manifest = data::load_manifest(a.manifest);
  auto train_bags = data::load_split(manifest, "train");
  auto test_bags = data::load_split(manifest, "test");
  if (train_bags.empty()) throw std::runtime_error("train: manifest has no train slides");

  auto m = model::WsiClassifier::create(model_config_from_args(a, manifest.dim));

  training::TrainConfig cfg;
  cfg.epochs = a.epochs;
  cfg.learning_rate = a.lr;
  cfg.l2_weight_decay = a.l2;
  cfg.batch_size = a.batch;
  cfg.seed = a.seed;
  cfg.optimizer = a.optimizer == "sgd" ? training::Optimizer::Sgd : training::Optimizer::Adam;

  auto history = training::train(m, train_bags, test_bags, cfg);
  m.save(a.out_model);
  if (!a.history.empty()) training::write_history_jsonl(history, a.history);

  if (!history.epochs.empty()) {
    const auto& last = history.epochs.back();
    std::cout << "final train AUC " << last.train_auc << ", test AUC " << last.test_auc << '\n';
  } else {
    std::cout << "no training epochs requested; saved the initialized model\n";
  }
  std::cout << "model: " << a.out_model << " (M = " << m.dims.slide << ")\n";
  return 0;
}

int run_explain(const ExplainArgs& a) {
  auto manifest = data::load_manifest(a.manifest);
  auto bags = data::load_split(manifest, a.split);
  if (bags.empty()) throw std::runtime_error("explain: split '" + a.split + "' is empty");
  auto m = model::WsiClassifier::load(a.model);

  if (a.class_index >= 0 && static_cast<std::size_t>(a.class_index) >= m.dims.classes) {
    throw UsageError("explain: --class " + std::to_string(a.class_index) + " out of range for a " +
                     std::to_string(m.dims.classes) + "-class model");
  }
  std::vector<std::size_t> classes;
  if (a.class_index >= 0) classes.push_back(static_cast<std::size_t>(a.class_index));
  else for (std::size_t c = 0; c < m.dims.classes; ++c) classes.push_back(c);

  const std::size_t top_positions = a.top_positions > 0 ? a.top_positions : m.dims.slide / 2;

  std::vector<interpret::ClassExplanation> explanations;
  for (std::size_t c : classes) {
    interpret::ClassExplanation e;
    e.slide = interpret::slide_attribution(m, bags, c, top_positions);
    auto tiles = interpret::select_contributing_tiles(m, bags, e.slide, a.quantile);
    e.tile = interpret::tile_attribution(m, bags, tiles, c, a.top_features);
    std::cout << "class " << c << ": " << e.slide.slide_ids.size() << " slides, "
              << "selected features:";
    for (auto f : e.tile.top_features) std::cout << ' ' << f;
    std::cout << '\n';
    explanations.push_back(std::move(e));
  }

  json echo{{"split", a.split},
            {"top_positions", top_positions},
            {"top_features", a.top_features},
            {"quantile", a.quantile},
            {"model", a.model}};
  interpret::write_features_json(explanations, echo, a.out);
  std::cout << "features: " << a.out << '\n';
  return 0;
}

int run_heatmap(const HeatmapArgs& a) {
  auto manifest = data::load_manifest(a.manifest);
  auto bags = data::load_split(manifest, a.split);
  if (bags.empty()) throw std::runtime_error("heatmap: split '" + a.split + "' is empty");
  auto m = model::WsiClassifier::load(a.model);

  auto features_by_class = interpret::read_features_json(a.features);
  const std::vector<std::size_t>* selected = nullptr;
  for (const auto& [cls, feats] : features_by_class) {
    if (cls == a.class_index) selected = &feats;
  }
  if (!selected) {
    throw std::runtime_error("heatmap: " + a.features + " has no entry for class " +
                             std::to_string(a.class_index));
  }

  std::vector<interpret::HeatMap> maps;
  maps.push_back(interpret::compute_heatmap(m, bags, *selected, a.class_index));
  maps.push_back(interpret::tile_score_heatmap(m, bags, a.class_index));
  interpret::write_heatmap_csv(maps, bags, a.out);

  std::size_t tiles = 0;
  for (const auto& b : bags) tiles += b.tile_count();
  std::cout << "heat-maps for class " << a.class_index << " over " << bags.size() << " slides ("
            << tiles << " tiles), methods: feature_based"
            << (maps[1].score_flipped ? ", tile_score (flipped)" : ", tile_score") << '\n'
            << "csv: " << a.out << '\n';
  return 0;
}

int run_eval(const EvalArgs& a) {
  auto manifest = data::load_manifest(a.manifest);
  auto bags = data::load_split(manifest, a.split);
  if (bags.empty()) throw std::runtime_error("eval: split '" + a.split + "' is empty");
  auto m = model::WsiClassifier::load(a.model);

  const double classification_auc = training::evaluate_classification(m, bags).roc.auc;

  auto rows = interpret::read_heatmap_csv(a.heatmaps);
  std::map<std::string, const data::SlideBag*> by_id;
  for (const auto& b : bags) by_id[b.slide_id] = &b;

  std::map<std::string, std::pair<std::vector<double>, std::vector<int>>> per_method;
  for (const auto& row : rows) {
    if (row.class_index != a.class_index) continue;
    auto it = by_id.find(row.slide_id);
    if (it == by_id.end()) {
      throw std::runtime_error("eval: heat-map references unknown slide " + row.slide_id);
    }
    const auto* bag = it->second;
    if (row.tile_index >= bag->tile_count()) {
      throw std::runtime_error("eval: heat-map references tile " +
                               std::to_string(row.tile_index) + " beyond " + row.slide_id);
    }
    auto& [values, labels] = per_method[row.method];
    values.push_back(row.value);
    labels.push_back(bag->tile_labels[row.tile_index]);
  }
  if (per_method.empty()) {
    throw std::runtime_error("eval: no heat-map rows for class " + std::to_string(a.class_index));
  }

  eval::RunSummary summary;
  summary.model = m.config.aggregator == model::AggregatorKind::MinMax ? "minmax" : "attention";
  summary.classification_auc = classification_auc;
  for (const auto& [method, data] : per_method) {
    const auto roc = eval::localization_auc(data.first, data.second);
    summary.methods.push_back({method, roc.auc});
    std::cout << method << " localization AUC " << roc.auc << '\n';
  }
  std::cout << "classification AUC " << classification_auc << '\n';

  auto report = eval::compare_report({summary});
  std::ofstream out(a.out, std::ios::trunc);
  if (!out) throw std::runtime_error("eval: cannot open " + a.out);
  out << report.dump(2) << '\n';
  std::cout << "report: " << a.out << '\n';
  return 0;
}

int run_ascent(const AscentArgs& a) {
  auto m = model::WsiClassifier::load(a.model);
  interpret::AscentConfig cfg{a.step, a.max_iters, a.tol, a.seed};
  auto res = interpret::max_activation_ascent(m, a.feature, cfg);

  json j{{"feature", res.feature}, {"input", res.input}, {"trace", res.trace}};
  std::ofstream out(a.out, std::ios::trunc);
  if (!out) throw std::runtime_error("ascent: cannot open " + a.out);
  out << j.dump(2) << '\n';
  std::cout << "feature " << a.feature << ": activation " << res.trace.front() << " -> "
            << res.trace.back() << " over " << res.trace.size() - 1 << " accepted steps\n"
            << "output: " << a.out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MIL slide classification and gradient-based interpretability toolkit"};
  app.require_subcommand(1);
  app.set_config("--config")->description("JSON config file (flags take precedence)");
  app.config_formatter(std::make_shared<JsonConfig>());

  std::size_t threads = 1;
  app.add_option("--threads", threads, "max worker threads for read-only passes")
      ->capture_default_str();

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate a planted-feature synthetic dataset");
  gen_cmd->add_option("--out", gen.out_dir, "output directory")->required();
  gen_cmd->add_option("--slides", gen.slides)->capture_default_str();
  gen_cmd->add_option("--tiles", gen.tiles)->capture_default_str();
  gen_cmd->add_option("--dim", gen.dim)->capture_default_str();
  gen_cmd->add_option("--planted", gen.planted, "number of planted features")
      ->capture_default_str();
  gen_cmd->add_option("--pos-fraction", gen.pos_fraction)->capture_default_str();
  gen_cmd->add_option("--shift", gen.shift)->capture_default_str();
  gen_cmd->add_option("--sigma", gen.sigma)->capture_default_str();
  gen_cmd->add_option("--test-fraction", gen.test_fraction)->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed)->capture_default_str();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "train a slide classifier on a manifest");
  train_cmd->add_option("--manifest", tr.manifest)->required();
  train_cmd->add_option("--out", tr.out_model, "model JSON output")->required();
  train_cmd->add_option("--history", tr.history, "per-epoch JSONL output");
  train_cmd->add_option("--arch", tr.arch)->check(CLI::IsMember({"minmax", "attention"}))
      ->capture_default_str();
  train_cmd->add_option("--r", tr.r, "top/bottom scores kept by the min-max layer")
      ->capture_default_str();
  train_cmd->add_option("--attn-hidden", tr.attn_hidden)->capture_default_str();
  train_cmd->add_option("--attn-act", tr.attn_act)->check(CLI::IsMember({"tanh", "relu"}))
      ->capture_default_str();
  train_cmd->add_option("--extractor-hidden", tr.extractor_hidden,
                        "MLP widths; omit for the identity extractor");
  train_cmd->add_option("--epochs", tr.epochs)->capture_default_str();
  train_cmd->add_option("--lr", tr.lr)->capture_default_str();
  train_cmd->add_option("--l2", tr.l2)->capture_default_str();
  train_cmd->add_option("--batch", tr.batch)->capture_default_str();
  train_cmd->add_option("--optimizer", tr.optimizer)->check(CLI::IsMember({"adam", "sgd"}))
      ->capture_default_str();
  train_cmd->add_option("--seed", tr.seed)->capture_default_str();

  ExplainArgs ex;
  auto* explain_cmd =
      app.add_subcommand("explain", "attribute slide positions and tile features per class");
  explain_cmd->add_option("--manifest", ex.manifest)->required();
  explain_cmd->add_option("--model", ex.model)->required();
  explain_cmd->add_option("--out", ex.out)->capture_default_str();
  explain_cmd->add_option("--split", ex.split)->capture_default_str();
  explain_cmd->add_option("--class", ex.class_index, "single class (default: all)");
  explain_cmd->add_option("--top-L", ex.top_positions,
                          "slide-descriptor positions kept (default M/2)");
  explain_cmd->add_option("--top-l", ex.top_features, "tile features kept")
      ->capture_default_str();
  explain_cmd->add_option("--quantile", ex.quantile, "tile selection extremity quantile")
      ->capture_default_str();

  HeatmapArgs hm;
  auto* heatmap_cmd =
      app.add_subcommand("heatmap", "emit feature-based and tile-score heat-maps as CSV");
  heatmap_cmd->add_option("--manifest", hm.manifest)->required();
  heatmap_cmd->add_option("--model", hm.model)->required();
  heatmap_cmd->add_option("--features", hm.features, "features.json from explain")->required();
  heatmap_cmd->add_option("--out", hm.out)->capture_default_str();
  heatmap_cmd->add_option("--split", hm.split)->capture_default_str();
  heatmap_cmd->add_option("--class", hm.class_index)->capture_default_str();

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "score heat-maps against tile ground truth");
  eval_cmd->add_option("--manifest", ev.manifest)->required();
  eval_cmd->add_option("--model", ev.model)->required();
  eval_cmd->add_option("--heatmaps", ev.heatmaps)->required();
  eval_cmd->add_option("--out", ev.out)->capture_default_str();
  eval_cmd->add_option("--split", ev.split)->capture_default_str();
  eval_cmd->add_option("--class", ev.class_index)->capture_default_str();

  AscentArgs as;
  auto* ascent_cmd =
      app.add_subcommand("ascent", "maximize one descriptor feature by gradient ascent");
  ascent_cmd->add_option("--model", as.model)->required();
  ascent_cmd->add_option("--feature", as.feature)->required();
  ascent_cmd->add_option("--out", as.out)->capture_default_str();
  ascent_cmd->add_option("--step", as.step)->capture_default_str();
  ascent_cmd->add_option("--iters", as.max_iters)->capture_default_str();
  ascent_cmd->add_option("--tol", as.tol)->capture_default_str();
  ascent_cmd->add_option("--seed", as.seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  parallel::set_max_threads(threads);

  try {
    if (gen_cmd->parsed()) return run_gen_data(gen);
    if (train_cmd->parsed()) return run_train(tr);
    if (explain_cmd->parsed()) return run_explain(ex);
    if (heatmap_cmd->parsed()) return run_heatmap(hm);
    if (eval_cmd->parsed()) return run_eval(ev);
    if (ascent_cmd->parsed()) return run_ascent(as);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
