#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "wsikit/data.hpp"
#include "wsikit/model.hpp"

namespace wsikit::interpret {

// Which slide-descriptor positions drive the prediction of class c:
// attribution = sum over predicted-c slides of |d P_c / d D|.
struct SlideAttribution {
  std::size_t class_index = 0;
  std::vector<double> attribution;        // size M, nonnegative
  std::vector<std::size_t> top_positions; // K_c: largest entries, ties by lowest index
  std::vector<std::size_t> slide_indices; // I_c as indices into the bag list
  std::vector<std::string> slide_ids;
};

struct TileRef {
  std::size_t slide = 0;  // index into the bag list
  std::size_t tile = 0;
  bool operator==(const TileRef&) const = default;
};

// Which tile-descriptor features feed the selected slide positions:
// attribution = sum over contributing tiles of |d s / d d|.
struct TileAttribution {
  std::size_t class_index = 0;
  std::vector<double> attribution;       // size N, nonnegative
  std::vector<std::size_t> top_features; // k_c
  std::vector<TileRef> tiles;            // J_c
};

SlideAttribution slide_attribution(const model::WsiClassifier& m,
                                   const std::vector<data::SlideBag>& bags,
                                   std::size_t class_index, std::size_t top_count);

// J_c. Min-max: the tiles occupying the selected slots across predicted-c
// slides, keeping the top (1-q) fraction by |score| (q = 0 keeps all), then
// deduplicated. Attention: per slide, the top (1-q) fraction of tiles by
// attention weight.
std::vector<TileRef> select_contributing_tiles(const model::WsiClassifier& m,
                                               const std::vector<data::SlideBag>& bags,
                                               const SlideAttribution& attribution,
                                               double quantile);

TileAttribution tile_attribution(const model::WsiClassifier& m,
                                 const std::vector<data::SlideBag>& bags,
                                 std::span<const TileRef> tiles, std::size_t class_index,
                                 std::size_t top_count);

struct AscentConfig {
  double step = 0.1;
  std::size_t max_iters = 512;
  double tol = 1e-6;
  std::uint64_t seed = 42;
};

struct AscentResult {
  std::size_t feature = 0;
  std::vector<double> input;  // final X
  std::vector<double> trace;  // activation per accepted step, non-decreasing
};

// Gradient ascent on the extractor input to maximize one descriptor
// feature, from a Uniform(0,1) start. Undefined for the identity extractor.
AscentResult max_activation_ascent(const model::WsiClassifier& m, std::size_t feature,
                                   const AscentConfig& cfg);

struct FeatureStats {
  std::size_t feature = 0;
  double min = 0.0;
  double max = 0.0;
};

struct HeatMap {
  std::size_t class_index = 0;
  std::string method;  // "feature_based" | "tile_score"
  bool score_flipped = false;
  std::vector<std::size_t> features;       // features actually used
  std::vector<FeatureStats> stats;         // per used feature, over the split
  std::vector<std::vector<double>> values; // per slide, per tile
};

// Average of per-feature min-max-normalized activations over `features`,
// in [0, 1]. Features with a degenerate range over the split are dropped
// with a warning; all-degenerate is an error.
HeatMap compute_heatmap(const model::WsiClassifier& m, const std::vector<data::SlideBag>& bags,
                        std::span<const std::size_t> features, std::size_t class_index);

// Baseline: raw tile scores, sign-flipped when slide attribution says the
// class is described by minimum scores (min-max models only).
HeatMap tile_score_heatmap(const model::WsiClassifier& m,
                           const std::vector<data::SlideBag>& bags, std::size_t class_index);

struct RankedTile {
  TileRef ref;
  double activation = 0.0;
};

// Global top tiles by one descriptor feature, ties by (slide_id, tile).
std::vector<RankedTile> top_activating_tiles(const model::WsiClassifier& m,
                                             const std::vector<data::SlideBag>& bags,
                                             std::size_t feature, std::size_t count);

// ---------------------------------------------------------------------------
// File formats

struct ClassExplanation {
  SlideAttribution slide;
  TileAttribution tile;
};

void write_features_json(const std::vector<ClassExplanation>& classes,
                         const nlohmann::json& config_echo, const std::filesystem::path& path);
// Returns the per-class selected features, keyed by class index.
std::vector<std::pair<std::size_t, std::vector<std::size_t>>> read_features_json(
    const std::filesystem::path& path);

// heatmaps.csv: slide_id,tile_index,x,y,value,method,class. A sidecar
// <path>.meta.json records normalization stats and score orientation.
void write_heatmap_csv(const std::vector<HeatMap>& maps,
                       const std::vector<data::SlideBag>& bags,
                       const std::filesystem::path& path);

struct HeatmapRow {
  std::string slide_id;
  std::size_t tile_index = 0;
  double value = 0.0;
  std::string method;
  std::size_t class_index = 0;
};
std::vector<HeatmapRow> read_heatmap_csv(const std::filesystem::path& path);

}  // namespace wsikit::interpret
