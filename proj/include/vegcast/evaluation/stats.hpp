#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "vegcast/core/tensor.hpp"

namespace vegcast::eval {

enum class WilcoxonMethod { Auto, Exact, Normal };

struct WilcoxonResult {
  bool defined = false;
  std::string reason;  // why the test is undefined
  int n = 0;           // nonzero differences
  double statistic = std::nan("");  // W = min(W+, W-)
  double w_plus = std::nan("");
  double p_two_sided = std::nan("");
  bool exact = false;
};

inline constexpr int kWilcoxonExactMaxN = 20;
inline constexpr int kWilcoxonMinN = 5;

/// Average ranks of |d| (1-based), ties sharing the mean rank.
inline std::vector<double> average_ranks(const std::vector<double>& absd) {
  const std::size_t n = absd.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return absd[a] < absd[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && absd[idx[j + 1]] == absd[idx[i]]) ++j;
    const double r = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = r;
    i = j + 1;
  }
  return rank;
}

/// Wilcoxon signed-rank test on paired differences. Zeros are dropped, ties get
/// average ranks. Up to 20 nonzero differences the null distribution of W+ is
/// counted exactly over all 2^n sign assignments; above that a normal
/// approximation with tie and continuity corrections is used.
inline WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& diffs, WilcoxonMethod method = WilcoxonMethod::Auto) {
  WilcoxonResult r;
  std::vector<double> d;
  for (double x : diffs) {
    require(std::isfinite(x), "wilcoxon_signed_rank: differences must be finite");
    if (x != 0) d.push_back(x);
  }
  r.n = static_cast<int>(d.size());
  if (r.n == 0) {
    r.reason = "all differences are zero";
    return r;
  }
  if (r.n < kWilcoxonMinN) {
    r.reason = "fewer than 5 nonzero differences";
    return r;
  }
  std::vector<double> absd(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) absd[i] = std::abs(d[i]);
  const auto rank = average_ranks(absd);
  double wp = 0, total = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    total += rank[i];
    if (d[i] > 0) wp += rank[i];
  }
  r.w_plus = wp;
  r.statistic = std::min(wp, total - wp);
  r.defined = true;
  const bool exact = method == WilcoxonMethod::Exact || (method == WilcoxonMethod::Auto && r.n <= kWilcoxonExactMaxN);
  if (exact) {
    require(r.n <= 30, "wilcoxon_signed_rank: exact distribution limited to 30 differences");
    // counts of sign patterns by doubled W+ (ranks are multiples of 1/2)
    std::vector<int> twice(d.size());
    int max_sum = 0;
    for (std::size_t i = 0; i < d.size(); ++i) max_sum += twice[i] = static_cast<int>(std::lround(2 * rank[i]));
    std::vector<double> count(max_sum + 1, 0.0);
    count[0] = 1;
    int reach = 0;
    for (int t : twice) {
      for (int s = reach; s >= 0; --s)
        if (count[s] != 0) count[s + t] += count[s];
      reach += t;
    }
    const int obs = static_cast<int>(std::lround(2 * r.statistic));
    double tail = 0, all = 0;
    for (int s = 0; s <= max_sum; ++s) {
      all += count[s];
      if (s <= obs) tail += count[s];
    }
    r.p_two_sided = std::min(1.0, 2 * tail / all);
    r.exact = true;
  } else {
    const double n = r.n;
    double tie = 0;
    std::vector<double> sorted = absd;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size();) {
      std::size_t j = i;
      while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
      const double t = static_cast<double>(j - i + 1);
      tie += t * t * t - t;
      i = j + 1;
    }
    const double mean = n * (n + 1) / 4;
    const double var = n * (n + 1) * (2 * n + 1) / 24 - tie / 48;
    if (var <= 0) {
      r.p_two_sided = 1.0;
    } else {
      const double z = std::min(0.0, r.statistic - mean + 0.5) / std::sqrt(var);
      r.p_two_sided = std::min(1.0, std::erfc(-z / std::sqrt(2.0)));
    }
  }
  return r;
}

struct GppFit {
  double slope = 0, intercept = 0, r2 = 0;
};

/// Ordinary least squares gpp = slope * ndvi + intercept over pairs where both are finite.
inline GppFit gpp_fit(const std::vector<double>& ndvi, const std::vector<double>& gpp) {
  require(ndvi.size() == gpp.size(), "gpp_fit: series lengths differ");
  double n = 0, mx = 0, my = 0;
  for (std::size_t i = 0; i < ndvi.size(); ++i)
    if (std::isfinite(ndvi[i]) && std::isfinite(gpp[i])) {
      n += 1;
      mx += ndvi[i];
      my += gpp[i];
    }
  require(n >= 2, "gpp_fit: need at least two paired points");
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < ndvi.size(); ++i)
    if (std::isfinite(ndvi[i]) && std::isfinite(gpp[i])) {
      sxx += (ndvi[i] - mx) * (ndvi[i] - mx);
      sxy += (ndvi[i] - mx) * (gpp[i] - my);
      syy += (gpp[i] - my) * (gpp[i] - my);
    }
  require(sxx > 0, "gpp_fit: NDVI has zero variance");
  GppFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  f.r2 = syy > 0 ? (sxy * sxy) / (sxx * syy) : 1.0;
  return f;
}

inline std::vector<double> gpp_predict(const GppFit& fit, const std::vector<double>& ndvi) {
  std::vector<double> out(ndvi.size());
  for (std::size_t i = 0; i < ndvi.size(); ++i) out[i] = fit.slope * ndvi[i] + fit.intercept;
  return out;
}

}  // namespace vegcast::eval
