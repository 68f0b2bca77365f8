#include "wsikit/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "wsikit/random.hpp"

namespace wsikit::data {

namespace {

constexpr char kMagic[4] = {'K', 'B', 'A', 'G'};
constexpr std::uint32_t kBagVersion = 1;

// All multi-byte fields are little-endian regardless of host order.
void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_i32(std::string& buf, std::int32_t v) { put_u32(buf, static_cast<std::uint32_t>(v)); }

void put_f32(std::string& buf, float v) { put_u32(buf, std::bit_cast<std::uint32_t>(v)); }

void put_f64(std::string& buf, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::span<const char> data) : data_(data) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(byte()) << (8 * i);
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(byte()) << (8 * i);
    return std::bit_cast<double>(v);
  }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  unsigned char byte() { return static_cast<unsigned char>(data_[pos_++]); }
  void need(std::size_t n) {
    if (remaining() < n) throw TruncatedFileError("bag file ends before its declared payload");
  }
  std::span<const char> data_;
  std::size_t pos_ = 0;
};

void validate_config(const PlantedConfig& cfg) {
  if (cfg.n_slides < 2) throw std::invalid_argument("generate_synthetic: need at least 2 slides");
  if (cfg.tiles_per_slide == 0) throw std::invalid_argument("generate_synthetic: zero tiles");
  if (cfg.dim == 0) throw std::invalid_argument("generate_synthetic: zero dimension");
  if (cfg.planted_features.empty()) {
    throw std::invalid_argument("generate_synthetic: no planted features (no signal)");
  }
  for (std::size_t f : cfg.planted_features) {
    if (f >= cfg.dim) throw std::invalid_argument("generate_synthetic: planted feature out of range");
  }
  if (!(cfg.pos_tile_fraction > 0.0) || cfg.pos_tile_fraction > 1.0) {
    throw std::invalid_argument("generate_synthetic: pos_tile_fraction must be in (0, 1]");
  }
  if (cfg.signal_shift < 0.0) {
    throw std::invalid_argument("generate_synthetic: negative signal_shift");
  }
  if (!(cfg.noise_sigma > 0.0)) {
    throw std::invalid_argument("generate_synthetic: noise_sigma must be positive");
  }
}

nlohmann::json config_to_json(const PlantedConfig& cfg) {
  return nlohmann::json{{"n_slides", cfg.n_slides},
                        {"tiles_per_slide", cfg.tiles_per_slide},
                        {"dim", cfg.dim},
                        {"planted_features", cfg.planted_features},
                        {"pos_tile_fraction", cfg.pos_tile_fraction},
                        {"signal_shift", cfg.signal_shift},
                        {"noise_sigma", cfg.noise_sigma},
                        {"seed", cfg.seed}};
}

PlantedConfig config_from_json(const nlohmann::json& j) {
  PlantedConfig cfg;
  cfg.n_slides = j.at("n_slides").get<std::size_t>();
  cfg.tiles_per_slide = j.at("tiles_per_slide").get<std::size_t>();
  cfg.dim = j.at("dim").get<std::size_t>();
  cfg.planted_features = j.at("planted_features").get<std::vector<std::size_t>>();
  cfg.pos_tile_fraction = j.at("pos_tile_fraction").get<double>();
  cfg.signal_shift = j.at("signal_shift").get<double>();
  cfg.noise_sigma = j.at("noise_sigma").get<double>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  return cfg;
}

}  // namespace

std::vector<const ManifestEntry*> DatasetManifest::split_entries(std::string_view split) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : entries) {
    if (e.split == split) out.push_back(&e);
  }
  return out;
}

std::vector<std::size_t> pick_planted_features(std::size_t dim, std::size_t count,
                                               std::uint64_t seed) {
  if (count == 0) throw std::invalid_argument("pick_planted_features: count must be >= 1");
  if (count > dim) throw std::invalid_argument("pick_planted_features: count exceeds dimension");
  std::vector<std::size_t> all(dim);
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::mt19937_64 engine = rng::make_engine(seed, "planted-features");
  std::shuffle(all.begin(), all.end(), engine);
  all.resize(count);
  std::sort(all.begin(), all.end());
  return all;
}

DatasetManifest generate_synthetic(const PlantedConfig& cfg,
                                   const std::filesystem::path& out_dir) {
  validate_config(cfg);
  std::filesystem::create_directories(out_dir);

  std::mt19937_64 engine = rng::make_engine(cfg.seed, "synthetic-data");
  std::normal_distribution<double> noise(0.0, cfg.noise_sigma);

  const std::size_t tiles = cfg.tiles_per_slide;
  const std::size_t n_pos_tiles =
      static_cast<std::size_t>(std::ceil(cfg.pos_tile_fraction * static_cast<double>(tiles)));
  const std::size_t grid_side =
      static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(tiles))));

  DatasetManifest manifest;
  manifest.dim = cfg.dim;
  manifest.ground_truth = cfg;
  manifest.base_dir = out_dir;

  for (std::size_t s = 0; s < cfg.n_slides; ++s) {
    SlideBag bag;
    {
      std::ostringstream id;
      id << "slide_" << std::setw(4) << std::setfill('0') << s;
      bag.slide_id = id.str();
    }
    bag.dim = cfg.dim;
    bag.slide_label = static_cast<int>(s % 2);  // alternate: balanced classes
    bag.tiles.resize(tiles * cfg.dim);
    for (double& v : bag.tiles) v = noise(engine);
    bag.coords.resize(tiles);
    for (std::size_t t = 0; t < tiles; ++t) {
      bag.coords[t] = {static_cast<float>(t % grid_side), static_cast<float>(t / grid_side)};
    }
    bag.tile_labels.assign(tiles, 0);

    if (bag.slide_label == 1) {
      std::vector<std::size_t> order(tiles);
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), engine);
      order.resize(n_pos_tiles);
      std::sort(order.begin(), order.end());
      for (std::size_t t : order) {
        bag.tile_labels[t] = 1;
        for (std::size_t f : cfg.planted_features) {
          bag.tiles[t * cfg.dim + f] += cfg.signal_shift;
        }
      }
    }

    const std::string filename = bag.slide_id + ".kbag";
    save_bag(bag, out_dir / filename);
    manifest.entries.push_back({filename, bag.slide_id, "train", bag.slide_label});
  }
  return manifest;
}

void save_bag(const SlideBag& bag, const std::filesystem::path& path) {
  const std::size_t t = bag.tile_count();
  if (bag.dim == 0 || t == 0) throw DimensionError("save_bag: empty bag");
  if (bag.tiles.size() != t * bag.dim || bag.coords.size() != t || bag.tile_labels.size() != t) {
    throw DimensionError("save_bag: inconsistent bag fields");
  }

  std::string buf;
  buf.reserve(20 + t * 12 + t * bag.dim * 8);
  buf.append(kMagic, 4);
  put_u32(buf, kBagVersion);
  put_u32(buf, static_cast<std::uint32_t>(t));
  put_u32(buf, static_cast<std::uint32_t>(bag.dim));
  put_i32(buf, bag.slide_label);
  for (std::size_t j = 0; j < t; ++j) {
    put_i32(buf, bag.tile_labels[j]);
    put_f32(buf, bag.coords[j][0]);
    put_f32(buf, bag.coords[j][1]);
  }
  for (double v : bag.tiles) put_f64(buf, v);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw BagIoError("save_bag: cannot open " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw BagIoError("save_bag: write failed for " + path.string());
}

SlideBag load_bag(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw BagIoError("load_bag: cannot open " + path.string());
  std::string raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (raw.size() < 4 || std::memcmp(raw.data(), kMagic, 4) != 0) {
    throw BadMagicError("load_bag: not a KBAG file: " + path.string());
  }
  Reader r(std::span<const char>(raw).subspan(4));
  const std::uint32_t version = r.u32();
  if (version != kBagVersion) {
    throw BagIoError("load_bag: unsupported KBAG version " + std::to_string(version));
  }
  const std::uint32_t t = r.u32();
  const std::uint32_t dim = r.u32();
  if (t == 0 || dim == 0) throw DimensionError("load_bag: zero tile count or dimension");

  SlideBag bag;
  bag.slide_id = path.stem().string();
  bag.dim = dim;
  bag.slide_label = r.i32();

  const std::size_t expected = std::size_t{t} * 12 + std::size_t{t} * dim * 8;
  if (r.remaining() < expected) {
    throw TruncatedFileError("load_bag: header declares more data than the file holds");
  }
  if (r.remaining() > expected) {
    throw DimensionError("load_bag: trailing bytes beyond the declared payload");
  }

  bag.tile_labels.resize(t);
  bag.coords.resize(t);
  for (std::uint32_t j = 0; j < t; ++j) {
    bag.tile_labels[j] = r.i32();
    bag.coords[j][0] = r.f32();
    bag.coords[j][1] = r.f32();
  }
  bag.tiles.resize(std::size_t{t} * dim);
  for (double& v : bag.tiles) v = r.f64();
  return bag;
}

void split_train_test(DatasetManifest& manifest, double test_fraction, std::uint64_t seed) {
  if (manifest.entries.size() < 2) {
    throw std::invalid_argument("split_train_test: need at least 2 slides");
  }
  if (!(test_fraction > 0.0) || !(test_fraction < 1.0)) {
    throw std::invalid_argument("split_train_test: test_fraction must be in (0, 1)");
  }

  std::map<int, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    by_label[manifest.entries[i].label].push_back(i);
  }

  std::mt19937_64 engine = rng::make_engine(seed, "train-test-split");
  for (auto& [label, members] : by_label) {
    const auto n = static_cast<double>(members.size());
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * n));
    if (n_test == 0 || n_test >= members.size()) {
      throw std::runtime_error("split_train_test: class " + std::to_string(label) +
                               " cannot appear in both splits at this fraction");
    }
    std::shuffle(members.begin(), members.end(), engine);
    for (std::size_t k = 0; k < members.size(); ++k) {
      manifest.entries[members[k]].split = k < n_test ? "test" : "train";
    }
  }
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  nlohmann::json j;
  j["format"] = "wsikit-manifest";
  j["version"] = 1;
  j["dim"] = manifest.dim;
  auto slides = nlohmann::json::array();
  for (const auto& e : manifest.entries) {
    slides.push_back({{"path", e.path},
                      {"slide_id", e.slide_id},
                      {"split", e.split},
                      {"label", e.label}});
  }
  j["slides"] = std::move(slides);
  if (manifest.ground_truth) {
    j["ground_truth"] = config_to_json(*manifest.ground_truth);
  }

  std::ofstream out(path, std::ios::trunc);
  if (!out) throw BagIoError("save_manifest: cannot open " + path.string());
  out << j.dump(2) << '\n';
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw BagIoError("load_manifest: cannot open " + path.string());
  nlohmann::json j = nlohmann::json::parse(in);
  if (j.value("format", "") != "wsikit-manifest") {
    throw BagIoError("load_manifest: not a wsikit manifest: " + path.string());
  }

  DatasetManifest manifest;
  manifest.dim = j.at("dim").get<std::size_t>();
  manifest.base_dir = path.parent_path();
  std::set<std::string> seen_ids;
  for (const auto& s : j.at("slides")) {
    manifest.entries.push_back({s.at("path").get<std::string>(),
                                s.at("slide_id").get<std::string>(),
                                s.at("split").get<std::string>(), s.at("label").get<int>()});
    if (!seen_ids.insert(manifest.entries.back().slide_id).second) {
      throw BagIoError("load_manifest: duplicate slide_id " +
                       manifest.entries.back().slide_id);
    }
  }
  if (j.contains("ground_truth")) {
    manifest.ground_truth = config_from_json(j.at("ground_truth"));
  }
  return manifest;
}

std::vector<SlideBag> load_split(const DatasetManifest& manifest, std::string_view split) {
  std::vector<SlideBag> bags;
  for (const auto* e : manifest.split_entries(split)) {
    SlideBag bag = load_bag(manifest.base_dir / e->path);
    if (bag.dim != manifest.dim) {
      throw DimensionError("load_split: bag dimension disagrees with the manifest: " + e->path);
    }
    bag.slide_id = e->slide_id;
    bags.push_back(std::move(bag));
  }
  return bags;
}

}  // namespace wsikit::data
