#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace wsikit::eval {

struct RocResult {
  double auc = 0.0;
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
};

// Rank-based AUC with ties counted half: P(s_pos > s_neg) + 0.5 P(equal).
// Labels must be 0/1 and both classes present.
RocResult roc_auc(std::span<const double> scores, std::span<const int> labels);

enum class MwuMethod { Exact, NormalApprox };

struct MwuResult {
  double u = 0.0;        // U statistic of sample A
  double p_value = 1.0;  // two-sided
  MwuMethod method = MwuMethod::NormalApprox;
};

// Exact null distribution when n1 + n2 <= 20 and the pooled sample is
// tie-free; otherwise normal approximation with tie and continuity
// corrections.
MwuResult mann_whitney_u(std::span<const double> sample_a, std::span<const double> sample_b);

// AUC of per-tile heat values against tile ground truth, pooled over
// slides. Tiles labeled -1 are excluded.
RocResult localization_auc(std::span<const double> tile_values, std::span<const int> tile_labels);

struct MethodScore {
  std::string method;
  double localization_auc = 0.0;
};

struct RunSummary {
  std::string model;
  double classification_auc = 0.0;
  std::vector<MethodScore> methods;
};

// One row per (model, method): {model, classification_auc, method,
// localization_auc, relative_improvement}. Improvement is measured against
// the run's "tile_score" row as (new - old) / old * 100.
nlohmann::json compare_report(const std::vector<RunSummary>& runs);

}  // namespace wsikit::eval
