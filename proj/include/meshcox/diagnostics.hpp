#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include <boost/math/special_functions/erf.hpp>

#include "meshcox/common.hpp"
#include "meshcox/kernel.hpp"
#include "meshcox/sampler.hpp"

namespace meshcox {

/// Posterior summary of one correlation curve with pointwise 95% bands.
struct CorrelationCurve {
  int r = 0, s = 0;
  std::vector<double> h_um, mean, lo95, hi95;
  int excluded_draws = 0;
};

namespace detail {

inline double quantile_sorted(const std::vector<double>& sorted, double p) {
  const std::size_t n = sorted.size();
  if (n == 1) return sorted[0];
  const double pos = p * static_cast<double>(n - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, n - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

inline CorrelationCurve summarize_curve_draws(const std::vector<std::vector<double>>& per_draw,
                                              int r, int s, const std::vector<double>& h_um,
                                              int excluded) {
  if (per_draw.empty()) throw numerical_error("curve summary: no usable draws");
  CorrelationCurve out;
  out.r = r;
  out.s = s;
  out.h_um = h_um;
  out.excluded_draws = excluded;
  const std::size_t nh = h_um.size();
  out.mean.resize(nh);
  out.lo95.resize(nh);
  out.hi95.resize(nh);
  std::vector<double> col(per_draw.size());
  for (std::size_t m = 0; m < nh; ++m) {
    double acc = 0.0;
    bool constant = true;
    for (std::size_t d = 0; d < per_draw.size(); ++d) {
      col[d] = per_draw[d][m];
      acc += col[d];
      constant = constant && col[d] == col[0];
    }
    if (constant) {
      // keeps exact values (e.g. 1 at h = 0 for marginal curves)
      out.mean[m] = out.lo95[m] = out.hi95[m] = col[0];
      continue;
    }
    out.mean[m] = acc / static_cast<double>(col.size());
    std::sort(col.begin(), col.end());
    out.lo95[m] = quantile_sorted(col, 0.025);
    out.hi95[m] = quantile_sorted(col, 0.975);
  }
  return out;
}

inline std::vector<std::vector<double>> curve_draws(const DrawsStore& draws, int r, int s,
                                                    const std::vector<double>& h_unit,
                                                    int* excluded) {
  std::vector<std::vector<double>> per_draw;
  per_draw.reserve(draws.n_draws());
  for (int d = 0; d < draws.n_draws(); ++d) {
    try {
      per_draw.push_back(cross_corr(draws.loadings_at(d), draws.decay_at(d), r, s, h_unit));
    } catch (const degenerate_loadings_error&) {
      ++*excluded;
    }
  }
  return per_draw;
}

}  // namespace detail

/// Evaluate the correlation curve of pair (r, s) at every stored draw and
/// summarize with the pointwise mean and central 95% interval. Draws with a
/// degenerate loadings row are excluded and counted.
inline CorrelationCurve xcorr_summary(const DrawsStore& draws, int r, int s,
                                      const std::vector<double>& h_um) {
  if (draws.n_draws() < 1) throw validation_error("xcorr_summary: empty draws store");
  std::vector<double> h_unit(h_um.size());
  for (std::size_t t = 0; t < h_um.size(); ++t) h_unit[t] = h_um[t] / draws.scale_um;
  int excluded = 0;
  auto per_draw = detail::curve_draws(draws, r, s, h_unit, &excluded);
  return detail::summarize_curve_draws(per_draw, r, s, h_um, excluded);
}

/// Difference of the pair-(r, s) curves of two independent fits, paired by
/// draw index (cycled when the stores hold different draw counts).
inline CorrelationCurve diff_curves(const DrawsStore& group_a, const DrawsStore& group_b, int r,
                                    int s, const std::vector<double>& h_um) {
  if (group_a.labels != group_b.labels)
    throw validation_error("diff_curves: mismatched cell-type sets");
  if (group_a.n_draws() < 1 || group_b.n_draws() < 1)
    throw validation_error("diff_curves: empty draws store");
  std::vector<double> ha(h_um.size()), hb(h_um.size());
  for (std::size_t t = 0; t < h_um.size(); ++t) {
    ha[t] = h_um[t] / group_a.scale_um;
    hb[t] = h_um[t] / group_b.scale_um;
  }
  int excluded = 0;
  auto da = detail::curve_draws(group_a, r, s, ha, &excluded);
  auto db = detail::curve_draws(group_b, r, s, hb, &excluded);
  if (da.empty() || db.empty()) throw numerical_error("diff_curves: no usable draws");
  const std::size_t n = std::max(da.size(), db.size());
  std::vector<std::vector<double>> per_draw(n);
  for (std::size_t t = 0; t < n; ++t) {
    const auto& ca = da[t % da.size()];
    const auto& cb = db[t % db.size()];
    per_draw[t].resize(h_um.size());
    for (std::size_t m = 0; m < h_um.size(); ++m) per_draw[t][m] = ca[m] - cb[m];
  }
  return detail::summarize_curve_draws(per_draw, r, s, h_um, excluded);
}

struct WaicResult {
  double lppd = 0.0, p_waic = 0.0, waic = 0.0;
};

/// WAIC = -2 (lppd - p_waic) from an S x n_obs matrix of pointwise
/// log-likelihood draws; the log-mean-exp is computed against the per-column
/// maximum for stability.
inline WaicResult waic(const Mat& loglik) {
  const long s_draws = loglik.rows(), n_obs = loglik.cols();
  if (s_draws < 2) throw validation_error("waic: need at least 2 draws");
  if (!loglik.allFinite()) throw numerical_error("waic: non-finite log-likelihood draws");
  WaicResult out;
  for (long o = 0; o < n_obs; ++o) {
    const auto col = loglik.col(o);
    const double mx = col.maxCoeff();
    const double lme = mx + std::log((col.array() - mx).exp().mean());
    out.lppd += lme;
    const double mean = col.mean();
    out.p_waic += (col.array() - mean).square().sum() / static_cast<double>(s_draws - 1);
  }
  out.waic = -2.0 * (out.lppd - out.p_waic);
  return out;
}

namespace detail {

inline double inv_normal_cdf(double p) { return -std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * p); }

/// Split every chain in half and rank-normalize the pooled draws.
inline std::vector<Vec> split_rank_normalize(const std::vector<Vec>& chains) {
  std::vector<Vec> split;
  for (const auto& c : chains) {
    const long half = c.size() / 2;
    split.push_back(c.head(half));
    split.push_back(c.tail(half));
  }
  long total = 0;
  for (const auto& c : split) total += c.size();
  std::vector<std::pair<double, long>> pool;
  pool.reserve(total);
  long off = 0;
  for (const auto& c : split) {
    for (long t = 0; t < c.size(); ++t) pool.emplace_back(c(t), off + t);
    off += c.size();
  }
  std::sort(pool.begin(), pool.end());
  std::vector<double> rank(total);
  std::size_t a = 0;
  while (a < pool.size()) {
    std::size_t b = a;
    while (b + 1 < pool.size() && pool[b + 1].first == pool[a].first) ++b;
    const double avg = 0.5 * static_cast<double>(a + b) + 1.0;  // average rank, 1-based
    for (std::size_t t = a; t <= b; ++t) rank[pool[t].second] = avg;
    a = b + 1;
  }
  off = 0;
  for (auto& c : split) {
    for (long t = 0; t < c.size(); ++t)
      c(t) = inv_normal_cdf((rank[off + t] - 0.375) / (static_cast<double>(total) + 0.25));
    off += c.size();
  }
  return split;
}

struct ChainMoments {
  double w = 0.0;       // mean within-chain variance
  double var_plus = 0.0;
  bool degenerate = false;
};

inline ChainMoments chain_moments(const std::vector<Vec>& split) {
  ChainMoments cm;
  const long m = static_cast<long>(split.size());
  const long n = split.front().size();
  Vec means(m), vars(m);
  for (long c = 0; c < m; ++c) {
    means(c) = split[c].mean();
    vars(c) = (split[c].array() - means(c)).square().sum() / static_cast<double>(n - 1);
  }
  cm.w = vars.mean();
  const double b_over_n =
      m > 1 ? (means.array() - means.mean()).square().sum() / static_cast<double>(m - 1) : 0.0;
  cm.var_plus = cm.w * static_cast<double>(n - 1) / static_cast<double>(n) + b_over_n;
  cm.degenerate = !(cm.var_plus > 0.0);
  return cm;
}

}  // namespace detail

/// Rank-normalized split-Rhat. NaN for constant chains.
inline double rhat(const std::vector<Vec>& chains) {
  if (chains.empty()) throw validation_error("rhat: no chains");
  for (const auto& c : chains)
    if (c.size() < 100) throw validation_error("rhat: need at least 100 draws per chain");
  auto split = detail::split_rank_normalize(chains);
  auto cm = detail::chain_moments(split);
  if (cm.degenerate || !(cm.w > 0.0)) return std::numeric_limits<double>::quiet_NaN();
  return std::sqrt(cm.var_plus / cm.w);
}

/// Rank-normalized bulk effective sample size with Geyer initial-monotone
/// truncation of the autocorrelation sum. NaN for constant chains.
inline double bulk_ess(const std::vector<Vec>& chains) {
  if (chains.empty()) throw validation_error("bulk_ess: no chains");
  for (const auto& c : chains)
    if (c.size() < 100) throw validation_error("bulk_ess: need at least 100 draws per chain");
  auto split = detail::split_rank_normalize(chains);
  auto cm = detail::chain_moments(split);
  if (cm.degenerate || !(cm.w > 0.0)) return std::numeric_limits<double>::quiet_NaN();
  const long m = static_cast<long>(split.size());
  const long n = split.front().size();

  std::vector<Vec> centered;
  for (const auto& c : split) centered.push_back(c.array() - c.mean());
  auto acov = [&](long lag) {
    double total = 0.0;
    for (const auto& c : centered) {
      double s = 0.0;
      for (long t = 0; t + lag < n; ++t) s += c(t) * c(t + lag);
      total += s / static_cast<double>(n);
    }
    return total / static_cast<double>(m);
  };

  // rho_t = 1 - (W - mean autocovariance_t) / var_plus, summed over Geyer
  // initial positive monotone pairs
  double tau = 0.0;
  double prev_pair = std::numeric_limits<double>::infinity();
  long t = 0;
  while (t + 1 < n) {
    const double rho_even = 1.0 - (cm.w - acov(t)) / cm.var_plus;
    const double rho_odd = 1.0 - (cm.w - acov(t + 1)) / cm.var_plus;
    double pair = rho_even + rho_odd;
    if (pair < 0.0) break;
    pair = std::min(pair, prev_pair);
    prev_pair = pair;
    tau += pair;
    t += 2;
  }
  tau = std::max(2.0 * tau - 1.0, 1e-12);
  return static_cast<double>(m * n) / tau;
}

/// Median absolute deviation between two curves sampled on the same grid.
inline double mad_curves(const std::vector<double>& fitted, const std::vector<double>& truth) {
  if (fitted.size() != truth.size()) throw validation_error("mad_curves: length mismatch");
  if (fitted.empty()) throw validation_error("mad_curves: empty curves");
  std::vector<double> dev(fitted.size());
  for (std::size_t t = 0; t < fitted.size(); ++t) dev[t] = std::abs(fitted[t] - truth[t]);
  std::sort(dev.begin(), dev.end());
  const std::size_t n = dev.size();
  return n % 2 == 1 ? dev[n / 2] : 0.5 * (dev[n / 2 - 1] + dev[n / 2]);
}

}  // namespace meshcox
