#pragma once

// Independent reference implementations used as test oracles. Everything in
// here is deliberately brute force and shares no code with the library.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace oracle {

// Triple-loop matrix product, a: m x k, b: k x n.
inline std::vector<double> matmul(std::span<const double> a, std::span<const double> b,
                                  std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) out[i * n + j] += a[i * k + p] * b[p * n + j];
  return out;
}

// Head/tail of the fully sorted vector; stable on ties by input index.
inline std::vector<double> sorted_smallest(std::span<const double> x, std::size_t k) {
  std::vector<double> s(x.begin(), x.end());
  std::stable_sort(s.begin(), s.end());
  s.resize(k);
  return s;
}

inline std::vector<double> sorted_largest(std::span<const double> x, std::size_t k) {
  std::vector<double> s(x.begin(), x.end());
  std::stable_sort(s.begin(), s.end(), std::greater<>());
  s.resize(k);
  return s;
}

// AUC by explicit pairwise comparison: P(pos > neg) + 0.5 P(pos == neg).
inline double pairwise_auc(std::span<const double> scores, std::span<const int> labels) {
  double wins = 0.0;
  std::size_t n_pos = 0, n_neg = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    ++n_pos;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      if (scores[i] > scores[j]) wins += 1.0;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  for (int l : labels) n_neg += (l == 0) ? 1 : 0;
  return wins / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// Exact two-sided Mann-Whitney p-value by enumerating every assignment of
// n1 pooled ranks to sample A: p = min(1, 2 * P(U <= min(U1, U2))).
// Tie-free inputs only.
inline double mwu_exact_p(std::span<const double> a, std::span<const double> b) {
  const std::size_t n1 = a.size();
  const std::size_t n2 = b.size();

  // Observed U for sample A: wins of A values over B values.
  long long u_obs = 0;
  for (double x : a)
    for (double y : b) u_obs += (x > y) ? 1 : 0;
  const long long full = static_cast<long long>(n1 * n2);
  const long long u_min = std::min(u_obs, full - u_obs);

  // Enumerate subsets of pooled rank positions assigned to A.
  std::vector<bool> mask(n1 + n2, false);
  std::fill(mask.begin(), mask.begin() + static_cast<std::ptrdiff_t>(n1), true);
  std::sort(mask.begin(), mask.end());
  std::size_t total = 0, lower_tail = 0;
  do {
    long long u = 0;
    long long b_seen = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (mask[i]) u += b_seen;
      else ++b_seen;
    }
    ++total;
    if (u <= u_min) ++lower_tail;
  } while (std::next_permutation(mask.begin(), mask.end()));

  const double p = 2.0 * static_cast<double>(lower_tail) / static_cast<double>(total);
  return std::min(1.0, p);
}

// Central finite differences of a scalar function at x.
inline std::vector<double> fd_gradient(const std::function<double(std::span<const double>)>& f,
                                       std::vector<double> x, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double hi = f(x);
    x[i] = saved - h;
    const double lo = f(x);
    x[i] = saved;
    g[i] = (hi - lo) / (2.0 * h);
  }
  return g;
}

inline double fd_partial(const std::function<double(std::span<const double>)>& f,
                         std::vector<double>& x, std::size_t i, double h) {
  const double saved = x[i];
  x[i] = saved + h;
  const double hi = f(x);
  x[i] = saved - h;
  const double lo = f(x);
  x[i] = saved;
  return (hi - lo) / (2.0 * h);
}

// Relative error with a floor, so near-zero gradients compare absolutely.
inline double rel_err(double analytic, double numeric, double floor = 1e-4) {
  const double scale = std::max({std::fabs(analytic), std::fabs(numeric), floor});
  return std::fabs(analytic - numeric) / scale;
}

inline double max_grad_err(std::span<const double> analytic, std::span<const double> numeric) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    worst = std::max(worst, rel_err(analytic[i], numeric[i]));
  }
  return worst;
}

// Central differences against the analytic gradient, excluding
// non-differentiability neighborhoods: a coordinate failing at `h` is
// retried at h/100. A kink inside the wide stencil converges on retry; a
// wrong gradient stays wrong.
inline double robust_grad_err(const std::function<double(std::span<const double>)>& f,
                              std::vector<double> x, std::span<const double> analytic,
                              double h = 1e-5, double tol = 1e-4) {
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double e = rel_err(analytic[i], fd_partial(f, x, i, h));
    if (e >= tol) {
      e = std::min(e, rel_err(analytic[i], fd_partial(f, x, i, h / 100.0)));
    }
    worst = std::max(worst, e);
  }
  return worst;
}

}  // namespace oracle
