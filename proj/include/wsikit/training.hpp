#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "wsikit/data.hpp"
#include "wsikit/eval.hpp"
#include "wsikit/model.hpp"
#include "wsikit/tensor.hpp"

namespace wsikit::training {

enum class Optimizer { Sgd, Adam };

struct TrainConfig {
  std::size_t epochs = 30;
  double learning_rate = 1e-3;
  double l2_weight_decay = 1e-4;
  std::size_t batch_size = 8;  // slides per step
  std::uint64_t seed = 42;
  Optimizer optimizer = Optimizer::Adam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
};

// -log P[label], with the probability floored at 1e-12 before the log.
double cross_entropy_loss(std::span<const double> probabilities, std::size_t label);
ad::Tensor cross_entropy_loss(ad::Tape& tape, const ad::Tensor& probabilities,
                              std::size_t label);

struct EpochStats {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double train_auc = 0.0;
  double test_auc = 0.0;  // NaN when the test split is empty or single-class
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
};

// Slide-level supervised training with only bag labels. Deterministic under
// the config seed: fixed shuffle order, ordered gradient accumulation.
TrainHistory train(model::WsiClassifier& m, const std::vector<data::SlideBag>& train_bags,
                   const std::vector<data::SlideBag>& test_bags, const TrainConfig& cfg);

struct ClassificationEval {
  eval::RocResult roc;  // on the positive-class (index 1) probability
  std::vector<std::size_t> predicted_class;
  std::vector<std::vector<double>> probabilities;
  std::vector<std::vector<std::size_t>> class_members;  // I_c per class
};

ClassificationEval evaluate_classification(const model::WsiClassifier& m,
                                           const std::vector<data::SlideBag>& bags);

// One JSON object per line: {"epoch", "mean_loss", "train_auc", "test_auc"}.
void write_history_jsonl(const TrainHistory& history, const std::filesystem::path& path);

}  // namespace wsikit::training
