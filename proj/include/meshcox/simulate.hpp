#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "meshcox/common.hpp"
#include "meshcox/kernel.hpp"
#include "meshcox/preprocess.hpp"
#include "meshcox/rng.hpp"

namespace meshcox {

/// Ground-truth generator settings. Grids are kept small enough for dense
/// Cholesky simulation, which keeps the generator independent of the mesh
/// approximation used for fitting.
struct SimConfig {
  int q = 4, k_star = 2, n_images = 20, n_x = 16, n_y = 16;
  double phi_low = 1.0, phi_high = 3.0;
  double alpha = -2.0;
  double diag_low = 0.5, diag_high = 1.0;
  double offdiag_low = -0.7, offdiag_high = 0.7;
  double l_star_um = 3000.0;
  std::uint64_t seed = 1;
  int curve_points = 60;

  void validate() const {
    if (q < 1 || k_star < 1 || k_star > q)
      throw validation_error("simulate: need 1 <= k* <= q");
    if (n_images < 1) throw validation_error("simulate: need at least one image");
    if (n_x < 1 || n_y < 1) throw validation_error("simulate: empty grid");
    if (n_x * n_y > 48 * 48)
      throw validation_error("simulate: dense simulation is limited to 48x48 pixels");
    if (!(phi_low > 0.0) || !(phi_high > phi_low))
      throw validation_error("simulate: need 0 < phi_low < phi_high");
    if (!(l_star_um > 0.0)) throw validation_error("simulate: scale must be positive");
    if (curve_points < 2) throw validation_error("simulate: need at least 2 curve points");
  }

  /// Simulated domain is [0,1] x [0, n_y/n_x] so pixels are square.
  GridSpec grid() const {
    GridSpec g;
    g.n_x = n_x;
    g.n_y = n_y;
    g.scale_um = l_star_um;
    g.extent_x_um = l_star_um;
    g.extent_y_um = l_star_um * static_cast<double>(n_y) / static_cast<double>(n_x);
    return g;
  }
};

/// Everything the generator drew, plus the implied true correlation curves.
struct TruthRecord {
  FactorLoadings A;
  DecayParams decay;
  double l_star_um = 1.0;
  std::vector<double> h_grid_um;
  std::vector<std::array<int, 2>> pairs;        // (r, s) with r <= s
  std::vector<std::vector<double>> curves;      // per pair, over h_grid
  std::vector<Mat> V;                           // per image, n_px x k
  std::vector<Mat> W;                           // per image, n_px x q
};

/// Distance grid from 0 to half the scaled domain diagonal, in microns.
inline std::vector<double> default_h_grid(double unit_extent_x, double unit_extent_y,
                                          double scale_um, int n_points) {
  const double half_diag =
      0.5 * std::sqrt(unit_extent_x * unit_extent_x + unit_extent_y * unit_extent_y);
  std::vector<double> h(n_points);
  for (int t = 0; t < n_points; ++t)
    h[t] = half_diag * scale_um * static_cast<double>(t) / static_cast<double>(n_points - 1);
  return h;
}

inline std::vector<std::array<int, 2>> all_pairs(int q) {
  std::vector<std::array<int, 2>> out;
  for (int r = 0; r < q; ++r)
    for (int s = r; s < q; ++s) out.push_back({r, s});
  return out;
}

/// Draw a dataset from the generative model: decay rates uniform on
/// [phi_low, phi_high], lower-trapezoidal loadings with uniform entries,
/// latent fields via dense Cholesky of the exponential-correlation Gram
/// matrix, Poisson counts of exp(V A^T + alpha).
inline std::pair<std::vector<CountGrid>, TruthRecord> simulate_dataset(const SimConfig& cfg) {
  cfg.validate();
  const GridSpec grid = cfg.grid();
  const int n = grid.n_px(), q = cfg.q, k = cfg.k_star;
  const Mat coords = grid.unit_coords();

  CounterRng param_rng = CounterRng::stream(cfg.seed, 101);
  TruthRecord truth;
  truth.l_star_um = cfg.l_star_um;
  truth.decay.phi = Vec(k);
  for (int j = 0; j < k; ++j) truth.decay.phi(j) = param_rng.uniform(cfg.phi_low, cfg.phi_high);
  Mat a = Mat::Zero(q, k);
  for (int j = 0; j < std::min(q, k); ++j)
    a(j, j) = param_rng.uniform(cfg.diag_low, cfg.diag_high);
  for (int r = 0; r < q; ++r)
    for (int j = 0; j < std::min(r, k); ++j)
      a(r, j) = param_rng.uniform(cfg.offdiag_low, cfg.offdiag_high);
  truth.A = FactorLoadings(std::move(a));

  Mat dist(n, n);
  for (int u = 0; u < n; ++u)
    for (int v = 0; v < n; ++v) dist(u, v) = (coords.row(u) - coords.row(v)).norm();
  std::vector<Mat> chol(k);
  for (int j = 0; j < k; ++j) {
    Mat c = (-truth.decay.phi(j) * dist.array()).exp().matrix();
    Eigen::LLT<Mat> llt(c);
    if (llt.info() != Eigen::Success)
      throw numerical_error("simulate: covariance Cholesky failed (duplicate coordinates?)");
    chol[j] = llt.matrixL();
  }

  std::vector<CountGrid> grids(cfg.n_images);
  truth.V.resize(cfg.n_images);
  truth.W.resize(cfg.n_images);
  for (int i = 0; i < cfg.n_images; ++i) {
    Mat vi(n, k);
    for (int j = 0; j < k; ++j) {
      CounterRng eps_rng = CounterRng::stream(cfg.seed, 202, i, j);
      Vec eps(n);
      for (int t = 0; t < n; ++t) eps(t) = eps_rng.normal();
      vi.col(j) = chol[j].triangularView<Eigen::Lower>() * eps;
    }
    Mat wi = vi * truth.A.A.transpose();
    wi.array() += cfg.alpha;

    CounterRng y_rng = CounterRng::stream(cfg.seed, 303, i);
    CountGrid g;
    char buf[16];
    std::snprintf(buf, sizeof(buf), "sim_%03d", i);
    g.image_id = buf;
    g.grid = grid;
    g.counts = IMat(n, q);
    g.mask.assign(n, 1);
    g.unit_coords = coords;
    for (int t = 0; t < n; ++t)
      for (int j = 0; j < q; ++j)
        g.counts(t, j) = static_cast<int>(y_rng.poisson(std::exp(wi(t, j))));
    grids[i] = std::move(g);
    truth.V[i] = std::move(vi);
    truth.W[i] = std::move(wi);
  }

  truth.h_grid_um = default_h_grid(grid.unit_extent_x(), grid.unit_extent_y(), cfg.l_star_um,
                                   cfg.curve_points);
  truth.pairs = all_pairs(q);
  std::vector<double> h_unit(truth.h_grid_um.size());
  for (std::size_t t = 0; t < h_unit.size(); ++t) h_unit[t] = truth.h_grid_um[t] / cfg.l_star_um;
  for (const auto& pr : truth.pairs) {
    try {
      truth.curves.push_back(cross_corr(truth.A, truth.decay, pr[0], pr[1], h_unit));
    } catch (const degenerate_loadings_error&) {
      // a type with an all-zero loadings row has no defined correlation curve
      truth.curves.emplace_back(h_unit.size(), std::numeric_limits<double>::quiet_NaN());
    }
  }
  return {std::move(grids), std::move(truth)};
}

/// Aggregate neighboring pixels: each coarse pixel sums its factor x factor
/// fine pixels. A coarse pixel is observed only if all its fine pixels are.
inline std::vector<CountGrid> coarsen_grid(const std::vector<CountGrid>& grids, int factor) {
  if (factor < 1) throw validation_error("coarsen_grid: factor must be >= 1");
  if (factor == 1) return grids;
  std::vector<CountGrid> out;
  out.reserve(grids.size());
  for (const auto& g : grids) {
    if (g.grid.n_x % factor != 0 || g.grid.n_y % factor != 0)
      throw validation_error("coarsen_grid: factor must divide the grid dimensions");
    GridSpec cg = g.grid;
    cg.n_x = g.grid.n_x / factor;
    cg.n_y = g.grid.n_y / factor;
    CountGrid c;
    c.image_id = g.image_id;
    c.grid = cg;
    c.counts = IMat::Zero(cg.n_px(), g.q());
    c.mask.assign(cg.n_px(), 1);
    c.unit_coords = cg.unit_coords();
    for (int iy = 0; iy < g.grid.n_y; ++iy)
      for (int ix = 0; ix < g.grid.n_x; ++ix) {
        const int fine = iy * g.grid.n_x + ix;
        const int coarse = (iy / factor) * cg.n_x + (ix / factor);
        c.counts.row(coarse) += g.counts.row(fine);
        if (!g.mask[fine]) c.mask[coarse] = 0;
      }
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace meshcox
