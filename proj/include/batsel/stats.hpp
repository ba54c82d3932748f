#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "batsel/common.hpp"

namespace batsel {

inline double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Unbiased sample variance (n − 1 denominator).
inline double variance(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

inline double standard_error(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  return std::sqrt(variance(v) / static_cast<double>(v.size()));
}

/// 1-based ranks, ties receive the average of the ranks they span.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw InputError("correlation needs two equal series of length >= 2");
  const double ma = mean(a), mb = mean(b);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  return pearson(average_ranks(a), average_ranks(b));
}

/// P(X ≥ k) for X ~ Binomial(n, 1/2).
inline double binomial_upper_tail(int k, int n) {
  if (k <= 0) return 1.0;
  if (k > n) return 0.0;
  double p = 0.0;
  for (int i = k; i <= n; ++i)
    p += std::exp(std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0) -
                  n * std::log(2.0));
  return std::min(1.0, p);
}

struct SignTest {
  int wins = 0;    // pairs with a < b
  int losses = 0;  // pairs with a > b
  int ties = 0;
  double p_value = 1.0;  // one-sided, H1: a tends to be smaller
};

/// Paired one-sided sign test that `a` is smaller than `b`; ties are dropped.
inline SignTest sign_test_less(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw InputError("sign test needs paired samples");
  SignTest t;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] < b[i]) ++t.wins;
    else if (a[i] > b[i]) ++t.losses;
    else ++t.ties;
  }
  t.p_value = binomial_upper_tail(t.wins, t.wins + t.losses);
  return t;
}

}  // namespace batsel
