// Acceptance suite: one pass/fail line per criterion. Exits nonzero when any
// criterion fails. Criteria can be selected by name on the command line,
// e.g. `meshcox_acceptance A1 A7`.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "meshcox/meshcox.hpp"
#include "oracles.hpp"

using namespace meshcox;

namespace {

struct Criterion {
  std::string name, description;
  std::function<std::string()> body;  // returns detail text; throws on failure
};

struct Failure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require(bool ok, const std::string& what) {
  if (!ok) throw Failure(what);
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// shared desk-scale fixtures

SimConfig a3_sim(std::uint64_t seed) {
  SimConfig sc;
  sc.q = 4;
  sc.k_star = 2;
  sc.n_images = 20;
  sc.n_x = sc.n_y = 16;
  sc.phi_low = 1.0;
  sc.phi_high = 3.0;
  sc.alpha = -2.0;
  sc.seed = seed;
  return sc;
}

SamplerConfig a3_fit(int k, std::uint64_t seed) {
  SamplerConfig cfg;
  cfg.n_iter = 4000;
  cfg.n_burn = 2000;
  cfg.thin = 5;
  cfg.k = k;
  cfg.seed = seed;
  cfg.tile_x = cfg.tile_y = 5;
  return cfg;
}

std::vector<std::string> sim_labels(int q) {
  std::vector<std::string> labels;
  for (int j = 0; j < q; ++j) labels.push_back("type_" + std::to_string(j));
  return labels;
}

/// Median over all pairs and distances of |posterior-mean curve - truth|.
double aggregate_mad(const DrawsStore& draws, const TruthRecord& truth) {
  std::vector<double> fitted_all, truth_all;
  for (std::size_t pi = 0; pi < truth.pairs.size(); ++pi) {
    const auto curve =
        xcorr_summary(draws, truth.pairs[pi][0], truth.pairs[pi][1], truth.h_grid_um);
    fitted_all.insert(fitted_all.end(), curve.mean.begin(), curve.mean.end());
    truth_all.insert(truth_all.end(), truth.curves[pi].begin(), truth.curves[pi].end());
  }
  return mad_curves(fitted_all, truth_all);
}

struct FitResult {
  double mad = 0.0;
  double waic = 0.0;
  double phi_accept_post = 0.0;
};

FitResult fit_and_score(const Dataset& ds, const TruthRecord& truth, int k,
                        std::uint64_t fit_seed) {
  Sampler sampler(ds, a3_fit(k, fit_seed));
  const long n_burn = sampler.config().n_burn;
  const DrawsStore draws = sampler.run([n_burn](Sampler& s, long iter) {
    if (iter == n_burn - 1) s.reset_counters();
  });
  FitResult out;
  out.mad = aggregate_mad(draws, truth);
  out.waic = waic(draws.loglik_draws).waic;
  out.phi_accept_post = sampler.stats().accept_phi;
  return out;
}

// ---------------------------------------------------------------------------

std::string a1_mgp_exactness() {
  CounterRng rng(2024);
  double worst = 0.0;
  int done = 0;
  while (done < 100) {
    const int n_x = 2 + static_cast<int>(rng.uniform01() * 3.0);       // 2..4
    const int n_y = 2 + static_cast<int>(rng.uniform01() * 2.0);       // 2..3
    if (n_x * n_y > 12) continue;
    GridSpec grid;
    grid.n_x = n_x;
    grid.n_y = n_y;
    grid.scale_um = 1000.0;
    grid.extent_x_um = 1000.0;
    grid.extent_y_um = 1000.0 * n_y / n_x;
    const Mat coords = grid.unit_coords();
    const auto mesh = MeshGraph::full_parent(n_x * n_y);
    const double phi = rng.uniform(0.1, 10.0);
    const auto factors = compute_factors(mesh, coords, phi);
    const Mat cov = oracles::exp_corr_gram(coords, phi);
    Vec v(n_x * n_y);
    for (int t = 0; t < v.size(); ++t) v(t) = rng.normal() * 2.0;
    const double got = mgp_logdensity(v, factors, mesh);
    const double want = oracles::dense_mvn_logpdf(v, cov);
    worst = std::max(worst, std::abs(got - want));
    ++done;
  }
  require(worst < 1e-8, "max |density error| = " + fmt(worst));
  return "100 instances, max |density error| = " + fmt(worst);
}

std::string a2_gradients() {
  CounterRng rng(77);
  double worst = 0.0;
  for (int rep = 0; rep < 50; ++rep) {
    const int n = 3 + static_cast<int>(rng.uniform01() * 3.0);
    const int q = 2 + static_cast<int>(rng.uniform01() * 2.0);
    const int k = 1 + static_cast<int>(rng.uniform01() * 2.0);
    const int p = rep % 2 == 0 ? 2 : 1;
    Mat x_mat(n, p), v_mat(n, k), a_mat = Mat::Zero(q, k), b_mat(p, q);
    Vec alpha(q);
    for (int t = 0; t < n; ++t) {
      for (int c = 0; c < p; ++c) x_mat(t, c) = rng.uniform(-1.0, 1.0);
      for (int c = 0; c < k; ++c) v_mat(t, c) = rng.normal() * 0.6;
    }
    for (int r = 0; r < q; ++r)
      for (int c = 0; c <= std::min(r, k - 1); ++c) a_mat(r, c) = rng.uniform(-0.8, 0.8);
    for (int r = 0; r < p; ++r)
      for (int c = 0; c < q; ++c) b_mat(r, c) = rng.uniform(-0.4, 0.4);
    for (int j = 0; j < q; ++j) alpha(j) = rng.uniform(-1.5, 0.5);

    const Mat w_mat = log_intensity(alpha, b_mat, x_mat, v_mat, a_mat);
    Mat y(n, q), lg(n, q);
    for (int t = 0; t < n; ++t)
      for (int j = 0; j < q; ++j) {
        y(t, j) = static_cast<double>(rng.poisson(std::exp(w_mat(t, j))));
        lg(t, j) = std::lgamma(y(t, j) + 1.0);
      }
    std::vector<std::uint8_t> mask(n, 1);
    mask[0] = rep % 3 == 0 ? 0 : 1;

    // d/dW
    const Mat g = loglik_grad_W(y, mask, w_mat);
    auto f_w = [&](const Vec& f) {
      const Mat wm = Eigen::Map<const Mat>(f.data(), n, q);
      return poisson_loglik(y, mask, wm, lg).value;
    };
    Vec wflat = Eigen::Map<const Vec>(w_mat.data(), w_mat.size());
    worst = std::max(worst, oracles::max_rel_err(Eigen::Map<const Vec>(g.data(), g.size()),
                                                 oracles::central_fd(f_w, wflat)));

    // d/dV
    const Mat base = w_mat - v_mat * a_mat.transpose();
    auto f_v = [&](const Vec& f) {
      const Mat vm = Eigen::Map<const Mat>(f.data(), n, k);
      return poisson_loglik(y, mask, base + vm * a_mat.transpose(), lg).value;
    };
    const Mat gv = grad_latent(g, a_mat);
    Vec vflat = Eigen::Map<const Vec>(v_mat.data(), v_mat.size());
    worst = std::max(worst, oracles::max_rel_err(Eigen::Map<const Vec>(gv.data(), gv.size()),
                                                 oracles::central_fd(f_v, vflat)));

    std::vector<Mat> gs{g}, vs{v_mat}, xs{x_mat};
    for (int j = 0; j < q; ++j) {
      // d/dA row
      auto f_a = [&](const Vec& row) {
        Mat w2 = w_mat;
        for (int t = 0; t < n; ++t) {
          double delta = 0.0;
          for (int c = 0; c < k; ++c) delta += v_mat(t, c) * (row(c) - a_mat(j, c));
          w2(t, j) += delta;
        }
        return poisson_loglik(y, mask, w2, lg).value;
      };
      worst = std::max(worst, oracles::max_rel_err(
                                  grad_loading_row(gs, vs, j),
                                  oracles::central_fd(f_a, a_mat.row(j).transpose())));
      // d/dB column
      auto f_b = [&](const Vec& col) {
        Mat w2 = w_mat;
        w2.col(j) += x_mat * col;
        return poisson_loglik(y, mask, w2, lg).value;
      };
      worst = std::max(worst, oracles::max_rel_err(grad_coef_col(gs, xs, j),
                                                   oracles::central_fd(f_b, Vec::Zero(p))));
    }
    // d/dalpha
    auto f_alpha = [&](const Vec& a) {
      Mat w2 = w_mat;
      w2.rowwise() += a.transpose();
      return poisson_loglik(y, mask, w2, lg).value;
    };
    worst = std::max(worst, oracles::max_rel_err(grad_intercepts(g),
                                                 oracles::central_fd(f_alpha, Vec::Zero(q))));
  }
  require(worst < 1e-5, "max relative gradient error = " + fmt(worst));
  return "50 instances, max relative gradient error = " + fmt(worst);
}

std::string a3_simulation_recovery() {
  auto [grids, truth] = simulate_dataset(a3_sim(1000));
  Dataset ds = Dataset::from_grids(grids, sim_labels(4));
  const auto res = fit_and_score(ds, truth, 2, 500);
  require(res.mad < 0.15, "aggregate MAD = " + fmt(res.mad) + " (limit 0.15)");
  require(res.phi_accept_post >= 0.34 && res.phi_accept_post <= 0.54,
          "post-burn-in decay acceptance = " + fmt(res.phi_accept_post) +
              " outside [0.34, 0.54]");
  return "aggregate MAD = " + fmt(res.mad) + ", post-burn-in decay acceptance = " +
         fmt(res.phi_accept_post);
}

struct ReplicateScores {
  std::vector<double> mad1, mad2, waic1, waic2, waic3;
};

ReplicateScores& replicate_scores() {
  static ReplicateScores scores;
  if (!scores.mad1.empty()) return scores;
  for (int rep = 0; rep < 10; ++rep) {
    auto [grids, truth] = simulate_dataset(a3_sim(1000 + rep));
    Dataset ds = Dataset::from_grids(grids, sim_labels(4));
    const auto r1 = fit_and_score(ds, truth, 1, 500 + rep);
    const auto r2 = fit_and_score(ds, truth, 2, 500 + rep);
    const auto r3 = fit_and_score(ds, truth, 3, 500 + rep);
    scores.mad1.push_back(r1.mad);
    scores.mad2.push_back(r2.mad);
    scores.waic1.push_back(r1.waic);
    scores.waic2.push_back(r2.waic);
    scores.waic3.push_back(r3.waic);
    std::printf("   replicate %d: MAD k1=%.3f k2=%.3f | WAIC k1=%.0f k2=%.0f k3=%.0f\n", rep,
                r1.mad, r2.mad, r1.waic, r2.waic, r3.waic);
    std::fflush(stdout);
  }
  return scores;
}

std::string a4_k_misspecification() {
  const auto& s = replicate_scores();
  int wins = 0;
  for (int rep = 0; rep < 10; ++rep) wins += s.mad1[rep] > s.mad2[rep];
  require(wins >= 8, "k=1 recovery worse than k=2 in only " + std::to_string(wins) + "/10");
  return "k=1 MAD exceeds k=2 MAD in " + std::to_string(wins) + "/10 replicates";
}

std::string a5_waic_ordering() {
  const auto& s = replicate_scores();
  int wins = 0;
  double m2 = 0.0, m3 = 0.0;
  for (int rep = 0; rep < 10; ++rep) {
    wins += s.waic1[rep] > s.waic2[rep];
    m2 += s.waic2[rep] / 10.0;
    m3 += s.waic3[rep] / 10.0;
  }
  require(wins >= 8, "WAIC(k=1) > WAIC(k=2) in only " + std::to_string(wins) + "/10");
  const double rel = std::abs(m3 - m2) / std::abs(m2);
  require(rel <= 0.05, "mean WAIC(k=3) deviates from WAIC(k=2) by " + fmt(100.0 * rel) + "%");
  return "WAIC(k=1) > WAIC(k=2) in " + std::to_string(wins) + "/10; mean WAIC k3 vs k2 differs by " +
         fmt(100.0 * rel) + "%";
}

std::string a6_grid_robustness() {
  SimConfig sc = a3_sim(3000);
  sc.n_x = sc.n_y = 24;
  auto [fine, truth] = simulate_dataset(sc);
  const auto coarse = coarsen_grid(fine, 2);
  Dataset ds_fine = Dataset::from_grids(fine, sim_labels(4));
  Dataset ds_coarse = Dataset::from_grids(coarse, sim_labels(4));
  const auto r_fine = fit_and_score(ds_fine, truth, 2, 600);
  const auto r_coarse = fit_and_score(ds_coarse, truth, 2, 601);
  const double diff = std::abs(r_fine.mad - r_coarse.mad);
  require(diff < 0.05, "MAD difference between resolutions = " + fmt(diff));
  return "MAD 24x24 = " + fmt(r_fine.mad) + ", MAD 12x12 = " + fmt(r_coarse.mad) +
         ", difference = " + fmt(diff);
}

std::string a7_invariances() {
  CounterRng rng(55);
  // sign-flip / permutation invariance of cross_cov and cross_corr
  for (int rep = 0; rep < 25; ++rep) {
    Mat a = Mat::Zero(4, 3);
    for (int r = 0; r < 4; ++r)
      for (int j = 0; j <= std::min(r, 2); ++j) a(r, j) = rng.uniform(-1.0, 1.0);
    FactorLoadings fl(a);
    DecayParams d;
    d.phi = Vec{{rng.uniform(0.2, 5.0), rng.uniform(0.2, 5.0), rng.uniform(0.2, 5.0)}};
    FactorLoadings flipped = fl;
    flipped.A.col(2) = -flipped.A.col(2);
    for (double h : {0.0, 0.13, 0.7}) {
      require((cross_cov(fl, d, h) - cross_cov(flipped, d, h)).cwiseAbs().maxCoeff() == 0.0,
              "sign-flip invariance violated");
    }
    DecayParams dp = d;
    std::swap(dp.phi(0), dp.phi(1));
    Mat permuted = fl.A;
    permuted.col(0).swap(permuted.col(1));
    for (double h : {0.0, 0.13, 0.7}) {
      Mat direct = Mat::Zero(4, 4);
      for (int j = 0; j < 3; ++j)
        direct += std::exp(-dp.phi(j) * h) * (permuted.col(j) * permuted.col(j).transpose());
      require((cross_cov(fl, d, h) - direct).cwiseAbs().maxCoeff() < 1e-14,
              "permutation invariance violated");
    }
  }

  // exact binning mass conservation
  for (int rep = 0; rep < 10; ++rep) {
    PointPattern p;
    p.image_id = "x";
    p.extent_x = 1.0;
    p.extent_y = rng.uniform(0.4, 1.0);
    std::vector<long> per_type(3, 0);
    const int n_points = 200 + static_cast<int>(rng.uniform01() * 800.0);
    for (int m = 0; m < n_points; ++m) {
      p.x.push_back(rng.uniform(0.0, p.extent_x));
      p.y.push_back(rng.uniform(0.0, p.extent_y));
      const int t = static_cast<int>(rng.uniform01() * 3.0);
      p.type.push_back(t);
      ++per_type[t];
    }
    GridSpec g;
    g.n_x = 3 + rep;
    g.n_y = 2 + rep % 4;
    g.scale_um = 700.0;
    g.extent_x_um = p.extent_x * 700.0;
    g.extent_y_um = p.extent_y * 700.0;
    const auto grid = bin_pattern(p, g, 3);
    for (int j = 0; j < 3; ++j)
      require(grid.counts.col(j).sum() == per_type[j], "binning mass conservation violated");
  }

  // masking linearity
  for (int rep = 0; rep < 10; ++rep) {
    const int n = 40, q = 3;
    Mat y(n, q), w(n, q), lg(n, q);
    for (int t = 0; t < n; ++t)
      for (int j = 0; j < q; ++j) {
        w(t, j) = rng.uniform(-2.0, 2.0);
        y(t, j) = static_cast<double>(rng.poisson(std::exp(w(t, j))));
        lg(t, j) = std::lgamma(y(t, j) + 1.0);
      }
    std::vector<std::uint8_t> full(n, 1), half(n, 0), other(n, 0);
    for (int t = 0; t < n; ++t) (rng.uniform01() < 0.5 ? half : other)[t] = 1;
    const double lhs = poisson_loglik(y, full, w, lg).value;
    const double rhs =
        poisson_loglik(y, half, w, lg).value + poisson_loglik(y, other, w, lg).value;
    require(std::abs(lhs - rhs) <= 1e-9 * std::max(1.0, std::abs(lhs)),
            "masking linearity violated: |delta| = " + fmt(std::abs(lhs - rhs)));
  }
  return "sign flips exact, permutations < 1e-14, binning and masking splits exact";
}

std::string a8_diagnostics_calibration() {
  std::vector<Vec> iid;
  for (int c = 0; c < 4; ++c) iid.push_back(oracles::iid_chain(2500, 900 + c));
  const double r = rhat(iid);
  require(r >= 0.999 && r <= 1.01, "iid Rhat = " + fmt(r));
  const double ess = bulk_ess(iid);
  require(ess >= 8000.0 && ess <= 12000.0, "iid bulk ESS = " + fmt(ess));

  const Vec ar = oracles::ar1_chain(10000, 0.9, 41);
  const double ess_ar = bulk_ess({ar});
  const double theory = 10000.0 * 0.1 / 1.9;
  require(ess_ar >= theory / 1.5 && ess_ar <= theory * 1.5,
          "AR(1) ESS = " + fmt(ess_ar) + " vs theory " + fmt(theory));

  Mat l2(2, 2);
  l2 << std::log(0.5), std::log(0.5), std::log(0.25), std::log(0.25);
  const auto w = waic(l2);
  const double lppd = 2.0 * std::log(0.375);
  const double p_waic = 2.0 * std::pow(std::log(2.0), 2) / 2.0;
  require(std::abs(w.lppd - lppd) < 1e-10 && std::abs(w.p_waic - p_waic) < 1e-10 &&
              std::abs(w.waic - (-2.0 * (lppd - p_waic))) < 1e-10,
          "WAIC hand-arithmetic oracle violated");
  return "iid Rhat = " + fmt(r) + ", iid ESS = " + fmt(ess) + ", AR(1) ESS = " + fmt(ess_ar) +
         " (theory " + fmt(theory) + "), WAIC oracle exact";
}

std::string a9_thread_determinism() {
#ifndef _OPENMP
  return "OpenMP disabled; single-threaded build is trivially deterministic";
#else
  SimConfig sc;
  sc.q = 3;
  sc.k_star = 2;
  sc.n_images = 4;
  sc.n_x = sc.n_y = 8;
  sc.seed = 77;
  auto [grids, truth] = simulate_dataset(sc);
  Dataset ds = Dataset::from_grids(grids, sim_labels(3));
  SamplerConfig cfg;
  cfg.n_iter = 300;
  cfg.n_burn = 100;
  cfg.thin = 2;
  cfg.k = 2;
  cfg.tile_x = cfg.tile_y = 3;
  cfg.seed = 5;
  cfg.config_hash = "a9";

  namespace fs = std::filesystem;
  const fs::path base = fs::temp_directory_path() / "meshcox_a9";
  fs::remove_all(base);
  std::vector<std::string> dirs;
  const int saved = omp_get_max_threads();
  for (int threads : {1, 2, 8}) {
    omp_set_num_threads(threads);
    Sampler sampler(ds, cfg);
    const auto draws = sampler.run();
    const std::string dir = (base / ("t" + std::to_string(threads))).string();
    save_draws(dir, draws);
    dirs.push_back(dir);
  }
  omp_set_num_threads(saved);
  auto slurp = [](const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  for (const char* file : {"/draws.csv", "/loglik.bin", "/meta.json"}) {
    const auto ref = slurp(dirs[0] + file);
    require(!ref.empty(), std::string("missing file ") + file);
    for (std::size_t t = 1; t < dirs.size(); ++t)
      require(slurp(dirs[t] + file) == ref,
              std::string(file) + " differs between thread counts");
  }
  fs::remove_all(base);
  return "draw stores byte-identical across 1, 2, and 8 worker threads";
#endif
}

std::string a10_prior_recovery() {
  // fully masked 3x3 image: every update sees an empty likelihood
  SimConfig sc;
  sc.q = 2;
  sc.k_star = 1;
  sc.n_images = 1;
  sc.n_x = sc.n_y = 3;
  sc.seed = 12;
  auto [grids, truth] = simulate_dataset(sc);
  std::vector<int> all_px(grids[0].n_px());
  for (int p = 0; p < grids[0].n_px(); ++p) all_px[p] = p;
  grids[0] = apply_mask(grids[0], all_px);
  Dataset ds = Dataset::from_grids(grids, sim_labels(2));

  SamplerConfig cfg;
  cfg.n_iter = 55000;
  cfg.n_burn = 5000;
  cfg.thin = 1;
  cfg.k = 1;
  cfg.tile_x = cfg.tile_y = 2;
  cfg.seed = 31;
  cfg.store_loglik = false;
  Sampler sampler(ds, cfg);
  const auto draws = sampler.run();
  const long s_draws = draws.n_draws();
  require(s_draws == 50000, "expected 50000 stored draws");

  auto column_var = [&](const Mat& m, int col) {
    const double mean = m.col(col).mean();
    return (m.col(col).array() - mean).square().sum() / static_cast<double>(m.rows() - 1);
  };
  std::string detail;
  for (int idx : {0, 1}) {  // the two free loadings (rows 0 and 1 of A, k = 1)
    const double var = column_var(draws.A_draws, idx);
    require(std::abs(var - 1000.0) / 1000.0 < 0.10,
            "loadings prior variance " + fmt(var) + " deviates from 1000");
    detail += "var(F_" + std::to_string(idx) + ") = " + fmt(var) + ", ";
  }
  for (int idx : {0, 1}) {
    const double var = column_var(draws.alpha_draws, idx);
    require(std::abs(var - 1000.0) / 1000.0 < 0.10,
            "intercept prior variance " + fmt(var) + " deviates from 1000");
  }
  detail += "var(alpha) ok, ";

  // latent fields against the dense mesh prior covariance at fixed decay
  SamplerConfig lat_cfg = cfg;
  lat_cfg.n_iter = 2;  // construction only; sweeps are driven manually below
  lat_cfg.n_burn = 1;
  Sampler lat(ds, lat_cfg);
  const auto prior =
      oracles::assemble_precision(lat.mesh(), lat.factors()[0]);
  const Mat prior_cov = prior.Q.llt().solve(Mat::Identity(9, 9));
  Mat acc = Mat::Zero(9, 9);
  const long lat_burn = 5000, lat_draws = 50000;
  for (long iter = 0; iter < lat_burn + lat_draws; ++iter) {
    if (iter == lat_burn)
      for (auto& t : lat.state().latent_step[0]) t.frozen = true;
    for (const auto& cls : lat.mesh().color_classes)
      for (int s : cls)
        lat.update_latent_block(0, s, CounterRng::stream(lat_cfg.seed, iter, 3, 0, s));
    if (iter >= lat_burn) {
      const Vec v = lat.state().V[0].col(0);
      acc.noalias() += v * v.transpose();
    }
  }
  acc /= static_cast<double>(lat_draws);
  const double rel = (acc - prior_cov).norm() / prior_cov.norm();
  require(rel < 0.10, "latent covariance deviates from the mesh prior by " + fmt(rel));
  detail += "latent prior covariance rel. error = " + fmt(rel);
  return detail;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<std::string> selected;
  for (int a = 1; a < argc; ++a) selected.insert(argv[a]);

  const std::vector<Criterion> criteria{
      {"A1", "meshed-GP exactness against the dense density", a1_mgp_exactness},
      {"A2", "analytic gradients against central finite differences", a2_gradients},
      {"A3", "cross-correlation recovery on simulated data (k = k* = 2)",
       a3_simulation_recovery},
      {"A4", "underspecified k has worse curve recovery", a4_k_misspecification},
      {"A5", "WAIC ordering across k", a5_waic_ordering},
      {"A6", "recovery is robust to the grid resolution", a6_grid_robustness},
      {"A7", "exact invariances: signs, permutations, binning mass, masking", a7_invariances},
      {"A8", "diagnostics calibration (Rhat, ESS, WAIC oracle)", a8_diagnostics_calibration},
      {"A9", "byte-identical draws across 1/2/8 worker threads", a9_thread_determinism},
      {"A10", "prior recovery under fully masked data", a10_prior_recovery},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.name)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    std::string detail;
    bool ok = true;
    try {
      detail = c.body();
    } catch (const std::exception& e) {
      ok = false;
      detail = e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%-4s %-4s %s — %s [%.1fs]\n", c.name.c_str(), ok ? "PASS" : "FAIL",
                c.description.c_str(), detail.c_str(), secs);
    std::fflush(stdout);
    failures += !ok;
  }
  if (failures > 0) std::printf("%d criterion(s) failed\n", failures);
  return failures == 0 ? 0 : 1;
}
