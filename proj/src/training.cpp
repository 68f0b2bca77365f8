#include "wsikit/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

#include <json.hpp>

#include "wsikit/parallel.hpp"
#include "wsikit/random.hpp"

namespace wsikit::training {

namespace {

constexpr double kProbFloor = 1e-12;

void check_labels(const std::vector<data::SlideBag>& bags, std::size_t classes,
                  const char* where) {
  for (const auto& bag : bags) {
    if (bag.slide_label < 0 || static_cast<std::size_t>(bag.slide_label) >= classes) {
      throw std::invalid_argument(std::string(where) + ": slide " + bag.slide_id +
                                  " has no usable label");
    }
  }
}

double auc_or_nan(const model::WsiClassifier& m, const std::vector<data::SlideBag>& bags) {
  if (bags.empty()) return std::numeric_limits<double>::quiet_NaN();
  try {
    return evaluate_classification(m, bags).roc.auc;
  } catch (const std::invalid_argument&) {
    return std::numeric_limits<double>::quiet_NaN();  // single-class split
  }
}

}  // namespace

double cross_entropy_loss(std::span<const double> probabilities, std::size_t label) {
  if (label >= probabilities.size()) {
    throw std::invalid_argument("cross_entropy_loss: label out of range");
  }
  return -std::log(std::max(probabilities[label], kProbFloor));
}

ad::Tensor cross_entropy_loss(ad::Tape& tape, const ad::Tensor& probabilities,
                              std::size_t label) {
  if (label >= probabilities.size()) {
    throw std::invalid_argument("cross_entropy_loss: label out of range");
  }
  auto p = ad::select(tape, probabilities, label);
  auto logp = ad::log(tape, ad::clamp_min(tape, p, kProbFloor));
  return ad::mul(tape, logp, ad::Tensor::scalar(-1.0));
}

TrainHistory train(model::WsiClassifier& m, const std::vector<data::SlideBag>& train_bags,
                   const std::vector<data::SlideBag>& test_bags, const TrainConfig& cfg) {
  if (train_bags.empty()) throw std::invalid_argument("train: empty train split");
  if (cfg.batch_size == 0) throw std::invalid_argument("train: batch_size must be >= 1");
  if (!(cfg.learning_rate >= 0.0)) throw std::invalid_argument("train: negative learning rate");
  check_labels(train_bags, m.dims.classes, "train");

  auto params = m.parameters();
  std::vector<std::vector<double>> accum(params.size());
  std::vector<std::vector<double>> adam_m(params.size()), adam_v(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    accum[p].assign(params[p].size(), 0.0);
    adam_m[p].assign(params[p].size(), 0.0);
    adam_v[p].assign(params[p].size(), 0.0);
  }

  std::mt19937_64 shuffle_rng = rng::make_engine(cfg.seed, "train-shuffle");
  std::vector<std::size_t> order(train_bags.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainHistory history;
  std::size_t step = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;

    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(start + cfg.batch_size, order.size());
      const auto batch = static_cast<double>(stop - start);
      for (auto& a : accum) std::fill(a.begin(), a.end(), 0.0);

      for (std::size_t k = start; k < stop; ++k) {
        const auto& bag = train_bags[order[k]];
        try {
          auto fw = model::forward_slide(m, bag);
          auto loss =
              cross_entropy_loss(fw.tape, fw.prediction, static_cast<std::size_t>(bag.slide_label));
          fw.tape.backward(loss);
          loss_sum += loss.item();
        } catch (const ad::NumericError& e) {
          throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) +
                                   ", slide " + bag.slide_id + " (" + e.what() + ")");
        }
        for (std::size_t p = 0; p < params.size(); ++p) {
          auto g = params[p].grad();
          for (std::size_t i = 0; i < g.size(); ++i) accum[p][i] += g[i];
        }
      }

      ++step;
      for (std::size_t p = 0; p < params.size(); ++p) {
        auto w = params[p].values_mut();
        for (std::size_t i = 0; i < w.size(); ++i) {
          double g = accum[p][i] / batch + cfg.l2_weight_decay * w[i];
          if (cfg.optimizer == Optimizer::Sgd) {
            w[i] -= cfg.learning_rate * g;
          } else {
            adam_m[p][i] = cfg.adam_beta1 * adam_m[p][i] + (1.0 - cfg.adam_beta1) * g;
            adam_v[p][i] = cfg.adam_beta2 * adam_v[p][i] + (1.0 - cfg.adam_beta2) * g * g;
            const double m_hat =
                adam_m[p][i] / (1.0 - std::pow(cfg.adam_beta1, static_cast<double>(step)));
            const double v_hat =
                adam_v[p][i] / (1.0 - std::pow(cfg.adam_beta2, static_cast<double>(step)));
            w[i] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.adam_epsilon);
          }
        }
      }
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.mean_loss = loss_sum / static_cast<double>(train_bags.size());
    stats.train_auc = auc_or_nan(m, train_bags);
    stats.test_auc = auc_or_nan(m, test_bags);
    history.epochs.push_back(stats);
  }
  return history;
}

ClassificationEval evaluate_classification(const model::WsiClassifier& m,
                                           const std::vector<data::SlideBag>& bags) {
  if (bags.empty()) throw std::invalid_argument("evaluate_classification: no slides");
  check_labels(bags, m.dims.classes, "evaluate_classification");

  ClassificationEval out;
  out.probabilities.resize(bags.size());
  out.predicted_class.resize(bags.size());

  // Forward passes are independent; slots keep the reduction ordered.
  parallel::for_each_index(bags.size(), [&](std::size_t i) {
    auto fw = model::forward_slide(m, bags[i]);
    out.probabilities[i].assign(fw.prediction.values().begin(), fw.prediction.values().end());
  });

  std::vector<double> pos_scores(bags.size());
  std::vector<int> labels(bags.size());
  out.class_members.assign(m.dims.classes, {});
  for (std::size_t i = 0; i < bags.size(); ++i) {
    const auto& p = out.probabilities[i];
    out.predicted_class[i] = static_cast<std::size_t>(
        std::max_element(p.begin(), p.end()) - p.begin());
    out.class_members[out.predicted_class[i]].push_back(i);
    pos_scores[i] = p[1];
    labels[i] = bags[i].slide_label;
  }
  out.roc = eval::roc_auc(pos_scores, labels);
  return out;
}

void write_history_jsonl(const TrainHistory& history, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("write_history_jsonl: cannot open " + path.string());
  for (const auto& e : history.epochs) {
    nlohmann::json j{{"epoch", e.epoch}, {"mean_loss", e.mean_loss}};
    j["train_auc"] = std::isfinite(e.train_auc) ? nlohmann::json(e.train_auc) : nullptr;
    j["test_auc"] = std::isfinite(e.test_auc) ? nlohmann::json(e.test_auc) : nullptr;
    out << j.dump() << '\n';
  }
}

}  // namespace wsikit::training
