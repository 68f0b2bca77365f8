#include "wsikit/model.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "wsikit/random.hpp"

namespace wsikit::model {

namespace {

ad::Tensor init_weight(std::mt19937_64& engine, std::size_t in, std::size_t out) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> values(in * out);
  for (double& v : values) v = dist(engine);
  return ad::Tensor::from({in, out}, std::move(values), /*requires_grad=*/true);
}

LinearLayer init_layer(std::mt19937_64& engine, std::size_t in, std::size_t out) {
  return {init_weight(engine, in, out), ad::Tensor::zeros({out}, /*requires_grad=*/true)};
}

// y = x W + b over bag rows, as a [T x out] tensor.
ad::Tensor linear(ad::Tape& tape, const LinearLayer& layer, const ad::Tensor& x) {
  return ad::add_rowvec(tape, ad::matmul(tape, x, layer.weight), layer.bias);
}

nlohmann::json tensor_to_json(const char* name, const ad::Tensor& t) {
  return nlohmann::json{{"name", name},
                        {"shape", t.shape()},
                        {"values", std::vector<double>(t.values().begin(), t.values().end())}};
}

ad::Tensor tensor_from_json(const nlohmann::json& j) {
  auto shape = j.at("shape").get<ad::Shape>();
  auto values = j.at("values").get<std::vector<double>>();
  return ad::Tensor::from(std::move(shape), std::move(values), /*requires_grad=*/true);
}

const char* aggregator_name(AggregatorKind k) {
  return k == AggregatorKind::MinMax ? "minmax" : "attention";
}

const char* nonlinearity_name(AttentionNonlinearity n) {
  return n == AttentionNonlinearity::Tanh ? "tanh" : "relu";
}

}  // namespace

WsiClassifier WsiClassifier::create(const ModelConfig& config) {
  if (config.classes < 2) throw std::invalid_argument("model: need at least 2 classes");
  if (config.identity_extractor && config.content_dim != config.descriptor_dim) {
    throw std::invalid_argument("model: identity extractor requires matching content/descriptor dims");
  }
  if (config.aggregator == AggregatorKind::MinMax && config.minmax_r == 0) {
    throw std::invalid_argument("model: min-max aggregator requires R >= 1");
  }
  if (config.aggregator == AggregatorKind::Attention && config.attention_hidden == 0) {
    throw std::invalid_argument("model: attention aggregator requires a hidden width");
  }

  WsiClassifier m;
  m.config = config;
  m.dims.content = config.content_dim;
  m.dims.descriptor = config.descriptor_dim;
  m.dims.classes = config.classes;
  m.dims.slide = config.aggregator == AggregatorKind::MinMax ? 2 * config.minmax_r
                                                             : config.descriptor_dim;

  std::mt19937_64 engine = rng::make_engine(config.init_seed, "model-init");

  if (!config.identity_extractor) {
    std::size_t in = config.content_dim;
    for (std::size_t width : config.extractor_hidden) {
      m.extractor.push_back(init_layer(engine, in, width));
      in = width;
    }
    m.extractor.push_back(init_layer(engine, in, config.descriptor_dim));
  }

  if (config.aggregator == AggregatorKind::MinMax) {
    m.scorer = init_layer(engine, config.descriptor_dim, 1);
    if (!config.scorer_bias) m.scorer.bias = ad::Tensor();
  } else {
    m.attention_pre = init_layer(engine, config.descriptor_dim, config.attention_hidden);
    m.attention_out = init_layer(engine, config.attention_hidden, 1);
  }

  m.decision.push_back(init_layer(engine, m.dims.slide, kDecisionHidden1));
  m.decision.push_back(init_layer(engine, kDecisionHidden1, kDecisionHidden2));
  m.decision.push_back(init_layer(engine, kDecisionHidden2, config.classes));
  return m;
}

std::vector<ad::Tensor> WsiClassifier::parameters() const {
  std::vector<ad::Tensor> params;
  auto push = [&params](const LinearLayer& l) {
    params.push_back(l.weight);
    if (l.bias.defined()) params.push_back(l.bias);
  };
  for (const auto& l : extractor) push(l);
  if (scorer.weight.defined()) push(scorer);
  if (attention_pre.weight.defined()) push(attention_pre);
  if (attention_out.weight.defined()) push(attention_out);
  for (const auto& l : decision) push(l);
  return params;
}

ad::Tensor encode_bag(ad::Tape& tape, const WsiClassifier& m, const ad::Tensor& content) {
  if (content.shape().size() != 2 || content.dim(1) != m.dims.content) {
    throw ad::ShapeError("encode_bag: content must be [tiles x " +
                         std::to_string(m.dims.content) + "]");
  }
  if (m.config.identity_extractor) return content;

  ad::Tensor h = content;
  for (std::size_t i = 0; i < m.extractor.size(); ++i) {
    h = linear(tape, m.extractor[i], h);
    if (i + 1 < m.extractor.size()) h = ad::relu(tape, h);
  }
  return h;
}

ad::Tensor score_bag(ad::Tape& tape, const WsiClassifier& m, const ad::Tensor& descriptors) {
  if (descriptors.shape().size() != 2 || descriptors.dim(1) != m.dims.descriptor) {
    throw ad::ShapeError("score_bag: descriptors must be [tiles x " +
                         std::to_string(m.dims.descriptor) + "]");
  }
  const std::size_t tiles = descriptors.dim(0);

  ad::Tensor logits;
  if (m.config.aggregator == AggregatorKind::MinMax) {
    logits = ad::matmul(tape, descriptors, m.scorer.weight);
    if (m.scorer.bias.defined()) {
      logits = ad::add_rowvec(tape, logits, m.scorer.bias);
    }
  } else {
    auto hidden = linear(tape, m.attention_pre, descriptors);
    hidden = m.config.attention_nonlinearity == AttentionNonlinearity::Tanh
                 ? ad::tanh(tape, hidden)
                 : ad::relu(tape, hidden);
    logits = linear(tape, m.attention_out, hidden);
  }
  return ad::reshape(tape, logits, {tiles});
}

std::vector<double> encode_tile(const WsiClassifier& m, std::span<const double> content) {
  if (content.size() != m.dims.content) {
    throw ad::ShapeError("encode_tile: content length must be " +
                         std::to_string(m.dims.content));
  }
  ad::Tape tape;
  auto x = ad::Tensor::from({1, m.dims.content}, {content.begin(), content.end()});
  auto d = encode_bag(tape, m, x);
  return {d.values().begin(), d.values().end()};
}

double score_tile(const WsiClassifier& m, std::span<const double> descriptor) {
  if (descriptor.size() != m.dims.descriptor) {
    throw ad::ShapeError("score_tile: descriptor length must be " +
                         std::to_string(m.dims.descriptor));
  }
  ad::Tape tape;
  auto d = ad::Tensor::from({1, m.dims.descriptor}, {descriptor.begin(), descriptor.end()});
  return score_bag(tape, m, d).item();
}

MinMaxAggregate aggregate_minmax(ad::Tape& tape, const ad::Tensor& scores, std::size_t r) {
  if (scores.shape().size() != 1) throw ad::ShapeError("aggregate_minmax: scores must be 1-D");
  if (r == 0) throw ad::ShapeError("aggregate_minmax: R must be >= 1");
  if (scores.size() < 2 * r) {
    throw ad::ShapeError("aggregate_minmax: bag has " + std::to_string(scores.size()) +
                         " tiles, needs at least " + std::to_string(2 * r));
  }

  auto top = ad::max_k(tape, scores, r);
  auto bottom = ad::min_k(tape, scores, r);
  std::vector<ad::Tensor> parts{top.values, bottom.values};

  MinMaxAggregate agg;
  agg.slide_descriptor = ad::concat(tape, parts);
  agg.selected_tiles = top.indices;
  agg.selected_tiles.insert(agg.selected_tiles.end(), bottom.indices.begin(),
                            bottom.indices.end());
  return agg;
}

AttentionAggregate aggregate_attention(ad::Tape& tape, const WsiClassifier& m,
                                       const ad::Tensor& descriptors) {
  const std::size_t tiles = descriptors.dim(0);
  auto logits = score_bag(tape, m, descriptors);
  auto weights = ad::softmax(tape, logits);

  AttentionAggregate agg;
  agg.weights = weights;
  auto weighted = ad::matmul(tape, ad::reshape(tape, weights, {1, tiles}), descriptors);
  agg.slide_descriptor = ad::reshape(tape, weighted, {m.dims.descriptor});
  return agg;
}

ad::Tensor decide(ad::Tape& tape, const WsiClassifier& m, const ad::Tensor& slide_descriptor) {
  if (slide_descriptor.shape().size() != 1 || slide_descriptor.size() != m.dims.slide) {
    throw ad::ShapeError("decide: slide descriptor must be 1-D of length " +
                         std::to_string(m.dims.slide));
  }
  ad::Tensor h = ad::reshape(tape, slide_descriptor, {1, m.dims.slide});
  for (std::size_t i = 0; i < m.decision.size(); ++i) {
    h = linear(tape, m.decision[i], h);
    if (i + 1 < m.decision.size()) h = ad::relu(tape, h);
  }
  auto logits = ad::reshape(tape, h, {m.dims.classes});
  return ad::softmax(tape, logits);
}

SlideForward forward_slide(const WsiClassifier& m, const data::SlideBag& bag) {
  if (bag.dim != m.dims.content) {
    throw ad::ShapeError("forward_slide: bag dimension " + std::to_string(bag.dim) +
                         " does not match model content dimension " +
                         std::to_string(m.dims.content));
  }
  const std::size_t tiles = bag.tile_count();
  if (tiles == 0) throw ad::ShapeError("forward_slide: empty bag");

  SlideForward fw;
  fw.tile_content =
      ad::Tensor::from({tiles, bag.dim}, bag.tiles, /*requires_grad=*/true);
  fw.descriptors = encode_bag(fw.tape, m, fw.tile_content);
  fw.scores = score_bag(fw.tape, m, fw.descriptors);

  if (m.config.aggregator == AggregatorKind::MinMax) {
    auto agg = aggregate_minmax(fw.tape, fw.scores, m.config.minmax_r);
    fw.slide_descriptor = agg.slide_descriptor;
    fw.selected_tiles = std::move(agg.selected_tiles);
  } else {
    auto agg = aggregate_attention(fw.tape, m, fw.descriptors);
    fw.slide_descriptor = agg.slide_descriptor;
    fw.attention_weights.assign(agg.weights.values().begin(), agg.weights.values().end());
  }

  fw.prediction = decide(fw.tape, m, fw.slide_descriptor);
  return fw;
}

void WsiClassifier::save(const std::filesystem::path& path) const {
  nlohmann::json j;
  j["format"] = "wsikit-model";
  j["version"] = 1;
  j["aggregator"] = aggregator_name(config.aggregator);
  j["minmax_r"] = config.minmax_r;
  j["attention_hidden"] = config.attention_hidden;
  j["attention_nonlinearity"] = nonlinearity_name(config.attention_nonlinearity);
  j["identity_extractor"] = config.identity_extractor;
  j["extractor_hidden"] = config.extractor_hidden;
  j["scorer_bias"] = config.scorer_bias;
  j["init_seed"] = config.init_seed;
  j["dims"] = {{"content", dims.content},
               {"descriptor", dims.descriptor},
               {"slide", dims.slide},
               {"classes", dims.classes}};

  auto params = nlohmann::json::array();
  auto dump_layer = [&params](const std::string& prefix, const LinearLayer& l) {
    params.push_back(tensor_to_json((prefix + ".weight").c_str(), l.weight));
    if (l.bias.defined()) params.push_back(tensor_to_json((prefix + ".bias").c_str(), l.bias));
  };
  for (std::size_t i = 0; i < extractor.size(); ++i) {
    dump_layer("extractor." + std::to_string(i), extractor[i]);
  }
  if (scorer.weight.defined()) dump_layer("scorer", scorer);
  if (attention_pre.weight.defined()) dump_layer("attention_pre", attention_pre);
  if (attention_out.weight.defined()) dump_layer("attention_out", attention_out);
  for (std::size_t i = 0; i < decision.size(); ++i) {
    dump_layer("decision." + std::to_string(i), decision[i]);
  }
  j["params"] = std::move(params);

  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("model save: cannot open " + path.string());
  out << j.dump(2) << '\n';
}

WsiClassifier WsiClassifier::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("model load: cannot open " + path.string());
  nlohmann::json j = nlohmann::json::parse(in);
  if (j.value("format", "") != "wsikit-model") {
    throw std::runtime_error("model load: not a wsikit model file: " + path.string());
  }

  ModelConfig cfg;
  const auto aggregator = j.at("aggregator").get<std::string>();
  if (aggregator == "minmax") cfg.aggregator = AggregatorKind::MinMax;
  else if (aggregator == "attention") cfg.aggregator = AggregatorKind::Attention;
  else throw std::runtime_error("model load: unknown aggregator " + aggregator);
  cfg.minmax_r = j.at("minmax_r").get<std::size_t>();
  cfg.attention_hidden = j.at("attention_hidden").get<std::size_t>();
  cfg.attention_nonlinearity = j.at("attention_nonlinearity").get<std::string>() == "relu"
                                   ? AttentionNonlinearity::Relu
                                   : AttentionNonlinearity::Tanh;
  cfg.identity_extractor = j.at("identity_extractor").get<bool>();
  cfg.extractor_hidden = j.at("extractor_hidden").get<std::vector<std::size_t>>();
  cfg.scorer_bias = j.at("scorer_bias").get<bool>();
  cfg.init_seed = j.at("init_seed").get<std::uint64_t>();
  const auto& dims = j.at("dims");
  cfg.content_dim = dims.at("content").get<std::size_t>();
  cfg.descriptor_dim = dims.at("descriptor").get<std::size_t>();
  cfg.classes = dims.at("classes").get<std::size_t>();

  WsiClassifier m = create(cfg);
  if (m.dims.slide != dims.at("slide").get<std::size_t>()) {
    throw std::runtime_error("model load: slide dimension disagrees with the architecture");
  }

  std::map<std::string, nlohmann::json> by_name;
  for (const auto& p : j.at("params")) by_name[p.at("name").get<std::string>()] = p;

  auto load_layer = [&by_name](const std::string& prefix, LinearLayer& l) {
    auto wit = by_name.find(prefix + ".weight");
    if (wit == by_name.end()) throw std::runtime_error("model load: missing " + prefix + ".weight");
    auto w = tensor_from_json(wit->second);
    if (w.shape() != l.weight.shape()) {
      throw std::runtime_error("model load: shape mismatch for " + prefix + ".weight");
    }
    l.weight = w;
    if (l.bias.defined()) {
      auto bit = by_name.find(prefix + ".bias");
      if (bit == by_name.end()) throw std::runtime_error("model load: missing " + prefix + ".bias");
      auto b = tensor_from_json(bit->second);
      if (b.shape() != l.bias.shape()) {
        throw std::runtime_error("model load: shape mismatch for " + prefix + ".bias");
      }
      l.bias = b;
    }
  };

  for (std::size_t i = 0; i < m.extractor.size(); ++i) {
    load_layer("extractor." + std::to_string(i), m.extractor[i]);
  }
  if (m.scorer.weight.defined()) load_layer("scorer", m.scorer);
  if (m.attention_pre.weight.defined()) load_layer("attention_pre", m.attention_pre);
  if (m.attention_out.weight.defined()) load_layer("attention_out", m.attention_out);
  for (std::size_t i = 0; i < m.decision.size(); ++i) {
    load_layer("decision." + std::to_string(i), m.decision[i]);
  }
  return m;
}

}  // namespace wsikit::model
