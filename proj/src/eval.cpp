#include "wsikit/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace wsikit::eval {

namespace {

// Midranks (1-based) of the input values; tied values share the average of
// the rank block they occupy.
std::vector<double> midranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });

  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double shared = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = shared;
    i = j + 1;
  }
  return ranks;
}

// Exact null CDF of the Mann-Whitney U statistic: count(m, n, u) is the
// number of rank arrangements of m A-items among n B-items with exactly u
// A-over-B wins. Recurrence on whether the largest pooled element belongs
// to A (contributes n wins) or to B.
double exact_two_sided_p(std::size_t n1, std::size_t n2, double u_stat) {
  const std::size_t full = n1 * n2;
  const auto u_min = static_cast<std::size_t>(
      std::llround(std::min(u_stat, static_cast<double>(full) - u_stat)));

  // count[m][u] for the current n; build up n from 0.
  std::vector<std::vector<double>> count(n1 + 1, std::vector<double>(full + 1, 0.0));
  for (std::size_t m = 0; m <= n1; ++m) count[m][0] = 1.0;  // n = 0
  for (std::size_t n = 1; n <= n2; ++n) {
    std::vector<std::vector<double>> next(n1 + 1, std::vector<double>(full + 1, 0.0));
    next[0][0] = 1.0;
    for (std::size_t m = 1; m <= n1; ++m) {
      for (std::size_t u = 0; u <= m * n; ++u) {
        double ways = count[m][u];  // largest is from B: n shrinks, u unchanged
        if (u >= n) ways += next[m - 1][u - n];  // largest is from A: beats all n B's
        next[m][u] = ways;
      }
    }
    count = std::move(next);
  }

  double total = 0.0, tail = 0.0;
  for (std::size_t u = 0; u <= full; ++u) {
    total += count[n1][u];
    if (u <= u_min) tail += count[n1][u];
  }
  return std::min(1.0, 2.0 * tail / total);
}

double normal_two_sided_p(double z) {
  return std::erfc(std::fabs(z) / std::sqrt(2.0));
}

}  // namespace

RocResult roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    throw std::invalid_argument("roc_auc: scores and labels must have equal length");
  }
  RocResult res;
  for (int l : labels) {
    if (l == 1) ++res.n_pos;
    else if (l == 0) ++res.n_neg;
    else throw std::invalid_argument("roc_auc: labels must be 0 or 1");
  }
  if (res.n_pos == 0 || res.n_neg == 0) {
    throw std::invalid_argument("roc_auc: both classes must be present");
  }

  const auto ranks = midranks(scores);
  double rank_sum_pos = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) rank_sum_pos += ranks[i];
  }
  const auto np = static_cast<double>(res.n_pos);
  const auto nn = static_cast<double>(res.n_neg);
  const double u = rank_sum_pos - np * (np + 1.0) / 2.0;
  res.auc = u / (np * nn);
  return res;
}

MwuResult mann_whitney_u(std::span<const double> sample_a, std::span<const double> sample_b) {
  if (sample_a.empty() || sample_b.empty()) {
    throw std::invalid_argument("mann_whitney_u: both samples must be non-empty");
  }
  const std::size_t n1 = sample_a.size();
  const std::size_t n2 = sample_b.size();
  const std::size_t n = n1 + n2;

  std::vector<double> pooled(sample_a.begin(), sample_a.end());
  pooled.insert(pooled.end(), sample_b.begin(), sample_b.end());
  const auto ranks = midranks(pooled);

  double rank_sum_a = 0.0;
  for (std::size_t i = 0; i < n1; ++i) rank_sum_a += ranks[i];
  const auto d1 = static_cast<double>(n1);
  const auto d2 = static_cast<double>(n2);
  const double u1 = rank_sum_a - d1 * (d1 + 1.0) / 2.0;

  // Tie profile over the pooled sample.
  std::vector<double> sorted = pooled;
  std::sort(sorted.begin(), sorted.end());
  double tie_term = 0.0;  // sum of t^3 - t over tie groups
  bool has_ties = false;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && sorted[j + 1] == sorted[i]) ++j;
    const auto t = static_cast<double>(j - i + 1);
    if (t > 1.0) {
      has_ties = true;
      tie_term += t * t * t - t;
    }
    i = j + 1;
  }

  MwuResult res;
  res.u = u1;
  if (n <= 20 && !has_ties) {
    res.method = MwuMethod::Exact;
    res.p_value = exact_two_sided_p(n1, n2, u1);
    return res;
  }

  res.method = MwuMethod::NormalApprox;
  const double mu = d1 * d2 / 2.0;
  const double dn = static_cast<double>(n);
  const double variance =
      d1 * d2 / 12.0 * ((dn + 1.0) - tie_term / (dn * (dn - 1.0)));
  if (variance <= 0.0) {
    res.p_value = 1.0;  // every observation tied: no evidence either way
    return res;
  }
  const double z = (std::fabs(u1 - mu) - 0.5) / std::sqrt(variance);  // continuity-corrected
  res.p_value = std::clamp(normal_two_sided_p(std::max(z, 0.0)),
                           std::numeric_limits<double>::min(), 1.0);
  return res;
}

RocResult localization_auc(std::span<const double> tile_values,
                           std::span<const int> tile_labels) {
  if (tile_values.size() != tile_labels.size()) {
    throw std::invalid_argument("localization_auc: values and labels must have equal length");
  }
  std::vector<double> values;
  std::vector<int> labels;
  for (std::size_t i = 0; i < tile_values.size(); ++i) {
    if (tile_labels[i] < 0) continue;  // unknown ground truth
    values.push_back(tile_values[i]);
    labels.push_back(tile_labels[i]);
  }
  if (values.empty()) throw std::invalid_argument("localization_auc: no labeled tiles");
  return roc_auc(values, labels);
}

nlohmann::json compare_report(const std::vector<RunSummary>& runs) {
  if (runs.empty()) throw std::invalid_argument("compare_report: no runs");

  auto rows = nlohmann::json::array();
  for (const auto& run : runs) {
    double baseline = std::numeric_limits<double>::quiet_NaN();
    for (const auto& m : run.methods) {
      if (m.method == "tile_score") baseline = m.localization_auc;
    }
    for (const auto& m : run.methods) {
      nlohmann::json row{{"model", run.model},
                         {"classification_auc", run.classification_auc},
                         {"method", m.method},
                         {"localization_auc", m.localization_auc}};
      if (m.method != "tile_score" && std::isfinite(baseline) && baseline > 0.0) {
        row["relative_improvement"] =
            (m.localization_auc - baseline) / baseline * 100.0;
      } else {
        row["relative_improvement"] = nullptr;
      }
      rows.push_back(std::move(row));
    }
  }
  return nlohmann::json{{"format", "wsikit-report"}, {"rows", std::move(rows)}};
}

}  // namespace wsikit::eval
