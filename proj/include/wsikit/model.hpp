#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "wsikit/data.hpp"
#include "wsikit/tensor.hpp"

namespace wsikit::model {

enum class AggregatorKind { MinMax, Attention };
enum class AttentionNonlinearity { Tanh, Relu };

struct Dims {
  std::size_t content = 0;     // P: tile content length
  std::size_t descriptor = 0;  // N: tile descriptor length
  std::size_t slide = 0;       // M: slide descriptor length (2R or N)
  std::size_t classes = 0;     // C
};

struct ModelConfig {
  std::size_t content_dim = 64;
  std::size_t descriptor_dim = 64;
  std::size_t classes = 2;
  AggregatorKind aggregator = AggregatorKind::MinMax;
  std::size_t minmax_r = 5;
  std::size_t attention_hidden = 128;
  AttentionNonlinearity attention_nonlinearity = AttentionNonlinearity::Tanh;
  // Identity extractor passes descriptors through (requires P == N). A
  // non-identity extractor is an MLP with these hidden widths (may be
  // empty: a single linear map).
  bool identity_extractor = true;
  std::vector<std::size_t> extractor_hidden;
  bool scorer_bias = true;
  std::uint64_t init_seed = 42;
};

struct LinearLayer {
  ad::Tensor weight;  // [in x out]
  ad::Tensor bias;    // [out]
};

// The four blocks: extractor f_e, tile scorer f_s, aggregator f_a and the
// decision head, plus the dimensions tying them together. For the
// attention aggregator the tile score is the attention logit (a small MLP
// on the descriptor); for min-max it is a linear map.
struct WsiClassifier {
  ModelConfig config;
  Dims dims;

  std::vector<LinearLayer> extractor;  // empty when identity
  LinearLayer scorer;                  // min-max: N -> 1
  LinearLayer attention_pre;           // attention: N -> hidden
  LinearLayer attention_out;           // attention: hidden -> 1
  std::vector<LinearLayer> decision;   // M -> 200 -> 100 -> C

  static WsiClassifier create(const ModelConfig& config);

  // Every trainable tensor, in a fixed order.
  std::vector<ad::Tensor> parameters() const;

  void save(const std::filesystem::path& path) const;
  static WsiClassifier load(const std::filesystem::path& path);
};

// Decision head hidden widths.
inline constexpr std::size_t kDecisionHidden1 = 200;
inline constexpr std::size_t kDecisionHidden2 = 100;

// f_e over a whole bag; content is [T x P], result [T x N]. The identity
// extractor returns its input tensor, so gradients reach the raw tiles.
ad::Tensor encode_bag(ad::Tape& tape, const WsiClassifier& m, const ad::Tensor& content);

// f_s per bag: tile scores as a 1-D [T] tensor.
ad::Tensor score_bag(ad::Tape& tape, const WsiClassifier& m, const ad::Tensor& descriptors);

// Single-tile conveniences evaluated on a throwaway tape.
std::vector<double> encode_tile(const WsiClassifier& m, std::span<const double> content);
double score_tile(const WsiClassifier& m, std::span<const double> descriptor);

struct MinMaxAggregate {
  ad::Tensor slide_descriptor;             // [2R]: top-R descending, bottom-R ascending
  std::vector<std::size_t> selected_tiles; // tile index feeding each slot
};
MinMaxAggregate aggregate_minmax(ad::Tape& tape, const ad::Tensor& scores, std::size_t r);

struct AttentionAggregate {
  ad::Tensor slide_descriptor;  // [N]: weighted sum of descriptors
  ad::Tensor weights;           // [T]: softmax over attention logits
};
AttentionAggregate aggregate_attention(ad::Tape& tape, const WsiClassifier& m,
                                       const ad::Tensor& descriptors);

// Decision head on a 1-D [M] slide descriptor; returns [C] probabilities.
ad::Tensor decide(ad::Tape& tape, const WsiClassifier& m, const ad::Tensor& slide_descriptor);

// One slide through all four blocks, taped end to end so backward reaches
// the prediction's ancestry down to the raw tile content.
struct SlideForward {
  ad::Tape tape;
  ad::Tensor tile_content;      // [T x P] leaf
  ad::Tensor descriptors;       // [T x N]
  ad::Tensor scores;            // [T]
  ad::Tensor slide_descriptor;  // [M]
  ad::Tensor prediction;        // [C]
  std::vector<std::size_t> selected_tiles;  // min-max slots
  std::vector<double> attention_weights;    // attention weights
};
SlideForward forward_slide(const WsiClassifier& m, const data::SlideBag& bag);

}  // namespace wsikit::model
