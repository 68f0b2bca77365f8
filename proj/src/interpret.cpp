#include "wsikit/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "wsikit/parallel.hpp"
#include "wsikit/random.hpp"
#include "wsikit/training.hpp"

namespace wsikit::interpret {

namespace {

// Largest-first positions of v, ties by lowest index.
std::vector<std::size_t> top_indices(std::span<const double> v, std::size_t count) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t k = std::min(count, v.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (v[a] != v[b]) return v[a] > v[b];
                      return a < b;
                    });
  order.resize(k);
  return order;
}

// Count kept by a "top (1-q) fraction" rule; always at least one.
std::size_t quantile_keep_count(double quantile, std::size_t n) {
  if (n == 0) return 0;
  const auto kept = static_cast<std::size_t>(
      std::ceil((1.0 - quantile) * static_cast<double>(n)));
  return std::clamp<std::size_t>(kept, 1, n);
}

std::vector<std::size_t> predicted_in_class(const model::WsiClassifier& m,
                                            const std::vector<data::SlideBag>& bags,
                                            std::size_t class_index) {
  if (class_index >= m.dims.classes) {
    throw std::invalid_argument("interpret: class " + std::to_string(class_index) +
                                " out of range for a " + std::to_string(m.dims.classes) +
                                "-class model");
  }
  std::vector<std::size_t> members(bags.size(), 0);
  parallel::for_each_index(bags.size(), [&](std::size_t i) {
    auto fw = model::forward_slide(m, bags[i]);
    auto p = fw.prediction.values();
    members[i] = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
  });
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < bags.size(); ++i) {
    if (members[i] == class_index) out.push_back(i);
  }
  return out;
}

// Descriptors of every tile in the split, computed without taping.
std::vector<std::vector<double>> split_descriptors(const model::WsiClassifier& m,
                                                   const std::vector<data::SlideBag>& bags) {
  std::vector<std::vector<double>> per_slide(bags.size());
  parallel::for_each_index(bags.size(), [&](std::size_t i) {
    ad::Tape tape;
    auto x = ad::Tensor::from({bags[i].tile_count(), bags[i].dim}, bags[i].tiles);
    auto d = model::encode_bag(tape, m, x);
    per_slide[i].assign(d.values().begin(), d.values().end());
  });
  return per_slide;
}

}  // namespace

SlideAttribution slide_attribution(const model::WsiClassifier& m,
                                   const std::vector<data::SlideBag>& bags,
                                   std::size_t class_index, std::size_t top_count) {
  SlideAttribution out;
  out.class_index = class_index;
  out.slide_indices = predicted_in_class(m, bags, class_index);
  if (out.slide_indices.empty()) {
    throw std::runtime_error("slide_attribution: no slides predicted in class " +
                             std::to_string(class_index));
  }

  out.attribution.assign(m.dims.slide, 0.0);
  for (std::size_t i : out.slide_indices) {
    auto fw = model::forward_slide(m, bags[i]);
    auto pc = ad::select(fw.tape, fw.prediction, class_index);
    fw.tape.backward(pc);
    auto g = fw.slide_descriptor.grad();
    for (std::size_t k = 0; k < g.size(); ++k) out.attribution[k] += std::fabs(g[k]);
    out.slide_ids.push_back(bags[i].slide_id);
  }
  out.top_positions = top_indices(out.attribution, top_count);
  return out;
}

std::vector<TileRef> select_contributing_tiles(const model::WsiClassifier& m,
                                               const std::vector<data::SlideBag>& bags,
                                               const SlideAttribution& attribution,
                                               double quantile) {
  if (!(quantile >= 0.0) || quantile >= 1.0) {
    throw std::invalid_argument("select_contributing_tiles: quantile must be in [0, 1)");
  }

  std::vector<TileRef> refs;
  if (m.config.aggregator == model::AggregatorKind::MinMax) {
    struct Entry {
      TileRef ref;
      double extremity;
    };
    std::vector<Entry> pool;
    for (std::size_t i : attribution.slide_indices) {
      auto fw = model::forward_slide(m, bags[i]);
      for (std::size_t slot : attribution.top_positions) {
        const std::size_t tile = fw.selected_tiles.at(slot);
        pool.push_back({{i, tile}, std::fabs(fw.scores.at(tile))});
      }
    }
    const std::size_t keep = quantile_keep_count(quantile, pool.size());
    std::stable_sort(pool.begin(), pool.end(), [](const Entry& a, const Entry& b) {
      if (a.extremity != b.extremity) return a.extremity > b.extremity;
      if (a.ref.slide != b.ref.slide) return a.ref.slide < b.ref.slide;
      return a.ref.tile < b.ref.tile;
    });
    pool.resize(keep);
    for (const auto& e : pool) refs.push_back(e.ref);
  } else {
    for (std::size_t i : attribution.slide_indices) {
      auto fw = model::forward_slide(m, bags[i]);
      const auto& w = fw.attention_weights;
      const std::size_t keep = quantile_keep_count(quantile, w.size());
      auto order = top_indices(w, keep);
      for (std::size_t tile : order) refs.push_back({i, tile});
    }
  }

  // Deduplicate (a tile can occupy several selected slots).
  std::sort(refs.begin(), refs.end(), [](const TileRef& a, const TileRef& b) {
    if (a.slide != b.slide) return a.slide < b.slide;
    return a.tile < b.tile;
  });
  refs.erase(std::unique(refs.begin(), refs.end()), refs.end());
  if (refs.empty()) {
    throw std::runtime_error("select_contributing_tiles: no contributing tiles for class " +
                             std::to_string(attribution.class_index));
  }
  return refs;
}

TileAttribution tile_attribution(const model::WsiClassifier& m,
                                 const std::vector<data::SlideBag>& bags,
                                 std::span<const TileRef> tiles, std::size_t class_index,
                                 std::size_t top_count) {
  if (tiles.empty()) throw std::invalid_argument("tile_attribution: empty tile set");

  TileAttribution out;
  out.class_index = class_index;
  out.tiles.assign(tiles.begin(), tiles.end());
  out.attribution.assign(m.dims.descriptor, 0.0);

  for (const auto& ref : tiles) {
    const auto& bag = bags.at(ref.slide);
    auto content = bag.tile(ref.tile);

    ad::Tape tape;
    auto x = ad::Tensor::from({1, bag.dim}, {content.begin(), content.end()},
                              /*requires_grad=*/true);
    auto d = model::encode_bag(tape, m, x);
    auto s = ad::select(tape, model::score_bag(tape, m, d), 0);
    tape.backward(s);
    auto g = d.grad();
    for (std::size_t k = 0; k < g.size(); ++k) out.attribution[k] += std::fabs(g[k]);
  }
  out.top_features = top_indices(out.attribution, top_count);
  return out;
}

AscentResult max_activation_ascent(const model::WsiClassifier& m, std::size_t feature,
                                   const AscentConfig& cfg) {
  if (m.config.identity_extractor) {
    throw std::invalid_argument("max_activation_ascent: undefined for the identity extractor");
  }
  if (feature >= m.dims.descriptor) {
    throw std::invalid_argument("max_activation_ascent: feature index out of range");
  }
  if (!(cfg.tol > 0.0)) throw std::invalid_argument("max_activation_ascent: tol must be > 0");

  std::mt19937_64 engine = rng::make_engine(cfg.seed, "activation-ascent");
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::vector<double> x(m.dims.content);
  for (double& v : x) v = uniform(engine);

  // Activation and input-gradient of f_e(x)[feature].
  auto probe = [&](const std::vector<double>& point, std::vector<double>* grad_out) {
    ad::Tape tape;
    auto in = ad::Tensor::from({1, m.dims.content}, point, grad_out != nullptr);
    auto d = model::encode_bag(tape, m, in);
    auto act = ad::select(tape, d, feature);
    if (grad_out) {
      tape.backward(act);
      grad_out->assign(in.grad().begin(), in.grad().end());
    }
    return act.item();
  };

  AscentResult res;
  res.feature = feature;
  double activation = probe(x, nullptr);
  res.trace.push_back(activation);

  std::vector<double> grad;
  for (std::size_t iter = 0; iter < cfg.max_iters; ++iter) {
    probe(x, &grad);
    std::vector<double> candidate = x;
    for (std::size_t i = 0; i < candidate.size(); ++i) candidate[i] += cfg.step * grad[i];
    const double next = probe(candidate, nullptr);
    if (!std::isfinite(next)) {
      throw ad::NumericError("max_activation_ascent: activation diverged to non-finite");
    }
    if (next - activation < cfg.tol) break;  // no acceptable improvement
    x = std::move(candidate);
    activation = next;
    res.trace.push_back(activation);
  }
  res.input = std::move(x);
  return res;
}

HeatMap compute_heatmap(const model::WsiClassifier& m, const std::vector<data::SlideBag>& bags,
                        std::span<const std::size_t> features, std::size_t class_index) {
  if (features.empty()) throw std::invalid_argument("compute_heatmap: empty feature set");
  if (bags.empty()) throw std::invalid_argument("compute_heatmap: no slides");
  for (std::size_t f : features) {
    if (f >= m.dims.descriptor) {
      throw std::invalid_argument("compute_heatmap: feature index out of range");
    }
  }

  const auto descriptors = split_descriptors(m, bags);
  const std::size_t n = m.dims.descriptor;

  HeatMap map;
  map.class_index = class_index;
  map.method = "feature_based";

  // Normalization statistics over all tiles of all slides in the split.
  for (std::size_t f : features) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < bags.size(); ++i) {
      const std::size_t tiles = bags[i].tile_count();
      for (std::size_t t = 0; t < tiles; ++t) {
        const double v = descriptors[i][t * n + f];
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
    if (hi - lo < 1e-12) {
      std::cerr << "compute_heatmap: feature " << f
                << " is constant over the split; dropping it\n";
      continue;
    }
    map.features.push_back(f);
    map.stats.push_back({f, lo, hi});
  }
  if (map.features.empty()) {
    throw std::runtime_error("compute_heatmap: every requested feature is constant");
  }

  const auto used = static_cast<double>(map.features.size());
  map.values.resize(bags.size());
  for (std::size_t i = 0; i < bags.size(); ++i) {
    const std::size_t tiles = bags[i].tile_count();
    map.values[i].resize(tiles);
    for (std::size_t t = 0; t < tiles; ++t) {
      double acc = 0.0;
      for (const auto& st : map.stats) {
        acc += (descriptors[i][t * n + st.feature] - st.min) / (st.max - st.min);
      }
      map.values[i][t] = acc / used;
    }
  }
  return map;
}

HeatMap tile_score_heatmap(const model::WsiClassifier& m,
                           const std::vector<data::SlideBag>& bags, std::size_t class_index) {
  if (bags.empty()) throw std::invalid_argument("tile_score_heatmap: no slides");

  HeatMap map;
  map.class_index = class_index;
  map.method = "tile_score";

  // Orientation: when the class's strongest slide-attribution position is a
  // minimum-score slot, low scores are the class evidence, so flip. Slots
  // [0, R) hold the maxima, [R, 2R) the minima.
  if (m.config.aggregator == model::AggregatorKind::MinMax) {
    try {
      auto attr = slide_attribution(m, bags, class_index, 1);
      map.score_flipped = attr.top_positions.at(0) >= m.config.minmax_r;
    } catch (const std::runtime_error&) {
      map.score_flipped = false;  // class never predicted: keep raw orientation
    }
  }

  map.values.resize(bags.size());
  parallel::for_each_index(bags.size(), [&](std::size_t i) {
    ad::Tape tape;
    auto x = ad::Tensor::from({bags[i].tile_count(), bags[i].dim}, bags[i].tiles);
    auto scores = model::score_bag(tape, m, model::encode_bag(tape, m, x));
    map.values[i].assign(scores.values().begin(), scores.values().end());
    if (map.score_flipped) {
      for (double& v : map.values[i]) v = -v;
    }
  });
  return map;
}

std::vector<RankedTile> top_activating_tiles(const model::WsiClassifier& m,
                                             const std::vector<data::SlideBag>& bags,
                                             std::size_t feature, std::size_t count) {
  if (feature >= m.dims.descriptor) {
    throw std::invalid_argument("top_activating_tiles: feature index out of range");
  }
  const auto descriptors = split_descriptors(m, bags);
  const std::size_t n = m.dims.descriptor;

  std::vector<RankedTile> all;
  for (std::size_t i = 0; i < bags.size(); ++i) {
    const std::size_t tiles = bags[i].tile_count();
    for (std::size_t t = 0; t < tiles; ++t) {
      all.push_back({{i, t}, descriptors[i][t * n + feature]});
    }
  }
  std::stable_sort(all.begin(), all.end(), [&](const RankedTile& a, const RankedTile& b) {
    if (a.activation != b.activation) return a.activation > b.activation;
    if (bags[a.ref.slide].slide_id != bags[b.ref.slide].slide_id) {
      return bags[a.ref.slide].slide_id < bags[b.ref.slide].slide_id;
    }
    return a.ref.tile < b.ref.tile;
  });
  if (count < all.size()) all.resize(count);
  return all;
}

// ---------------------------------------------------------------------------
// File formats

void write_features_json(const std::vector<ClassExplanation>& classes,
                         const nlohmann::json& config_echo, const std::filesystem::path& path) {
  nlohmann::json j;
  j["format"] = "wsikit-features";
  j["version"] = 1;
  auto arr = nlohmann::json::array();
  for (const auto& c : classes) {
    nlohmann::json entry;
    entry["class"] = c.slide.class_index;
    entry["slide_attribution"] = c.slide.attribution;
    entry["selected_positions"] = c.slide.top_positions;
    entry["slide_ids"] = c.slide.slide_ids;
    entry["tile_attribution"] = c.tile.attribution;
    entry["selected_features"] = c.tile.top_features;
    auto tiles = nlohmann::json::array();
    for (const auto& ref : c.tile.tiles) {
      tiles.push_back({{"slide", ref.slide}, {"tile", ref.tile}});
    }
    entry["contributing_tiles"] = std::move(tiles);
    arr.push_back(std::move(entry));
  }
  j["classes"] = std::move(arr);
  j["config"] = config_echo;

  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("write_features_json: cannot open " + path.string());
  out << j.dump(2) << '\n';
}

std::vector<std::pair<std::size_t, std::vector<std::size_t>>> read_features_json(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_features_json: cannot open " + path.string());
  nlohmann::json j = nlohmann::json::parse(in);
  if (j.value("format", "") != "wsikit-features") {
    throw std::runtime_error("read_features_json: not a wsikit features file: " + path.string());
  }
  std::vector<std::pair<std::size_t, std::vector<std::size_t>>> out;
  for (const auto& c : j.at("classes")) {
    out.emplace_back(c.at("class").get<std::size_t>(),
                     c.at("selected_features").get<std::vector<std::size_t>>());
  }
  return out;
}

void write_heatmap_csv(const std::vector<HeatMap>& maps,
                       const std::vector<data::SlideBag>& bags,
                       const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("write_heatmap_csv: cannot open " + path.string());
  out << "slide_id,tile_index,x,y,value,method,class\n";
  out << std::setprecision(17);
  for (const auto& map : maps) {
    if (map.values.size() != bags.size()) {
      throw std::invalid_argument("write_heatmap_csv: map does not cover the bag list");
    }
    for (std::size_t i = 0; i < bags.size(); ++i) {
      for (std::size_t t = 0; t < map.values[i].size(); ++t) {
        out << bags[i].slide_id << ',' << t << ',' << bags[i].coords[t][0] << ','
            << bags[i].coords[t][1] << ',' << map.values[i][t] << ',' << map.method << ','
            << map.class_index << '\n';
      }
    }
  }

  nlohmann::json meta;
  meta["format"] = "wsikit-heatmap-meta";
  auto arr = nlohmann::json::array();
  for (const auto& map : maps) {
    nlohmann::json entry;
    entry["method"] = map.method;
    entry["class"] = map.class_index;
    entry["score_flipped"] = map.score_flipped;
    auto stats = nlohmann::json::array();
    for (const auto& st : map.stats) {
      stats.push_back({{"feature", st.feature}, {"min", st.min}, {"max", st.max}});
    }
    entry["normalization"] = std::move(stats);
    arr.push_back(std::move(entry));
  }
  meta["maps"] = std::move(arr);
  std::ofstream mout(path.string() + ".meta.json", std::ios::trunc);
  if (mout) mout << meta.dump(2) << '\n';
}

std::vector<HeatmapRow> read_heatmap_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_heatmap_csv: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "slide_id,tile_index,x,y,value,method,class") {
    throw std::runtime_error("read_heatmap_csv: unexpected header in " + path.string());
  }

  std::vector<HeatmapRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    HeatmapRow row;
    std::getline(ss, row.slide_id, ',');
    std::getline(ss, field, ',');
    row.tile_index = std::stoul(field);
    std::getline(ss, field, ',');  // x, unused here
    std::getline(ss, field, ',');  // y
    std::getline(ss, field, ',');
    row.value = std::stod(field);
    std::getline(ss, row.method, ',');
    std::getline(ss, field, ',');
    row.class_index = std::stoul(field);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace wsikit::interpret
