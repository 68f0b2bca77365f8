#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace wsikit::data {

class BagIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// File does not start with the KBAG magic.
class BadMagicError : public BagIoError {
 public:
  using BagIoError::BagIoError;
};

// File ends before the sizes declared in its header.
class TruncatedFileError : public BagIoError {
 public:
  using BagIoError::BagIoError;
};

// Header dimensions are inconsistent with each other or with the payload.
class DimensionError : public BagIoError {
 public:
  using BagIoError::BagIoError;
};

// One slide: a bag of tiles. `tiles` holds either raw tile content or
// precomputed descriptors, T x dim row-major. Labels use -1 for unknown.
struct SlideBag {
  std::string slide_id;
  std::size_t dim = 0;
  std::vector<double> tiles;
  std::vector<std::array<float, 2>> coords;  // grid (x, y) per tile
  int slide_label = -1;
  std::vector<int> tile_labels;

  std::size_t tile_count() const { return dim == 0 ? 0 : tiles.size() / dim; }
  std::span<const double> tile(std::size_t j) const {
    return std::span<const double>(tiles).subspan(j * dim, dim);
  }
};

// Planted-feature generator settings. Positive slides get `signal_shift`
// added to every planted feature on a fraction of their tiles; everything
// else is Normal(0, noise_sigma) noise. signal_shift = 0 is the degenerate
// control where both classes are identically distributed.
struct PlantedConfig {
  std::size_t n_slides = 200;
  std::size_t tiles_per_slide = 100;
  std::size_t dim = 64;
  std::vector<std::size_t> planted_features;
  double pos_tile_fraction = 0.1;
  double signal_shift = 2.0;
  double noise_sigma = 1.0;
  std::uint64_t seed = 42;
};

struct ManifestEntry {
  std::string path;  // relative to the manifest location
  std::string slide_id;
  std::string split;  // "train" | "test"
  int label = -1;
};

struct DatasetManifest {
  std::size_t dim = 0;
  std::vector<ManifestEntry> entries;
  std::optional<PlantedConfig> ground_truth;
  std::filesystem::path base_dir;

  std::vector<const ManifestEntry*> split_entries(std::string_view split) const;
};

// `count` distinct feature indices drawn without replacement from [0, dim),
// sorted; the seed-derived choice the CLI uses for --planted.
std::vector<std::size_t> pick_planted_features(std::size_t dim, std::size_t count,
                                               std::uint64_t seed);

// Writes one .kbag file per slide into out_dir and returns the manifest
// (all entries initially in the train split). Deterministic: the same
// config yields byte-identical files.
DatasetManifest generate_synthetic(const PlantedConfig& cfg,
                                   const std::filesystem::path& out_dir);

void save_bag(const SlideBag& bag, const std::filesystem::path& path);
SlideBag load_bag(const std::filesystem::path& path);

// Stratified by slide label, deterministic under the seed. Throws when any
// class cannot appear in both splits.
void split_train_test(DatasetManifest& manifest, double test_fraction, std::uint64_t seed);

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest load_manifest(const std::filesystem::path& path);

std::vector<SlideBag> load_split(const DatasetManifest& manifest, std::string_view split);

}  // namespace wsikit::data
