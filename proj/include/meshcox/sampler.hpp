#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "meshcox/common.hpp"
#include "meshcox/kernel.hpp"
#include "meshcox/likelihood.hpp"
#include "meshcox/mesh.hpp"
#include "meshcox/preprocess.hpp"
#include "meshcox/rng.hpp"

namespace meshcox {

enum class OutcomeModel { poisson, gaussian_debug };

struct SamplerConfig {
  long n_iter = 4000;
  long n_burn = 2000;
  long thin = 5;
  std::uint64_t seed = 1;
  int k = 2;
  int tile_x = 5, tile_y = 5;
  double target_accept_phi = 0.44;
  double target_accept_mala = 0.57;
  int row_hmc_steps = 10;  // leapfrog steps of the loadings/coefficients update
  double prior_variance = 1e3;
  double phi_lower = 0.1, phi_upper = 10.0;
  double phi_init = 1.0;
  double w_clamp = 30.0;
  bool store_loglik = true;
  OutcomeModel outcome = OutcomeModel::poisson;
  double debug_noise_sd = 1.0;
  std::string config_hash;

  void validate() const {
    if (n_iter <= 0) throw validation_error("sampler: n_iter must be positive");
    if (n_burn < 0 || n_burn >= n_iter) throw validation_error("sampler: need 0 <= n_burn < n_iter");
    if (thin < 1) throw validation_error("sampler: thin must be >= 1");
    if (k < 1) throw validation_error("sampler: k must be >= 1");
    if (tile_x < 1 || tile_y < 1) throw validation_error("sampler: tile sides must be >= 1");
    if (!(prior_variance > 0.0)) throw validation_error("sampler: prior variance must be positive");
    if (!(phi_lower > 0.0) || !(phi_upper > phi_lower))
      throw validation_error("sampler: need 0 < phi_lower < phi_upper");
    if (phi_init < phi_lower || phi_init > phi_upper)
      throw validation_error("sampler: phi_init outside prior support");
    if (row_hmc_steps < 1) throw validation_error("sampler: row_hmc_steps must be >= 1");
    if (outcome == OutcomeModel::gaussian_debug && !(debug_noise_sd > 0.0))
      throw validation_error("sampler: debug noise sd must be positive");
  }
};

/// Fit-ready view of a group of count grids sharing one GridSpec. Per-image
/// masks gate the likelihood only: the latent field is still sampled at
/// masked pixels (prior-only) so the mesh and its factors stay shared across
/// subjects. `drop_unobserved` additionally removes pixels that are missing
/// in every image from the model domain, shrinking or removing mesh blocks.
struct Dataset {
  GridSpec grid;
  std::vector<std::string> labels;
  std::vector<std::string> image_ids;
  std::vector<std::uint8_t> model_observed;  // grid-pixel space, pixels in the model
  Mat coords;                                // n_model x 2
  std::vector<int> model_to_grid;
  std::vector<Mat> y;                        // per subject, n_model x q
  std::vector<Mat> lgamma_y;
  std::vector<std::vector<std::uint8_t>> obs;
  std::vector<Mat> X;                        // per subject, n_model x p (p may be 0)

  int n_subjects() const { return static_cast<int>(y.size()); }
  int q() const { return static_cast<int>(labels.size()); }
  int p() const { return X.empty() ? 0 : static_cast<int>(X.front().cols()); }
  int n_model() const { return static_cast<int>(coords.rows()); }

  static Dataset from_grids(const std::vector<CountGrid>& grids,
                            std::vector<std::string> labels,
                            std::vector<Mat> covariates = {},
                            bool drop_unobserved = false) {
    if (grids.empty()) throw validation_error("Dataset: no images");
    Dataset d;
    d.grid = grids.front().grid;
    d.labels = std::move(labels);
    const int q = static_cast<int>(d.labels.size());
    const int n_px = d.grid.n_px();
    if (!covariates.empty() && covariates.size() != grids.size())
      throw validation_error("Dataset: covariate count does not match image count");
    d.model_observed.assign(n_px, drop_unobserved ? 0 : 1);
    for (const auto& g : grids) {
      if (!(g.grid == d.grid))
        throw validation_error("Dataset: image " + g.image_id + " does not share the GridSpec");
      if (g.q() != q) throw validation_error("Dataset: image " + g.image_id + " has wrong type count");
      if (g.counts.minCoeff() < 0)
        throw validation_error("Dataset: negative count in image " + g.image_id);
      if (g.counts.maxCoeff() > 1000000)
        throw validation_error("Dataset: implausible count above 1e6 in image " + g.image_id);
      if (drop_unobserved)
        for (int p = 0; p < n_px; ++p)
          if (g.mask[p]) d.model_observed[p] = 1;
    }
    for (int p = 0; p < n_px; ++p)
      if (d.model_observed[p]) d.model_to_grid.push_back(p);
    const int n_model = static_cast<int>(d.model_to_grid.size());
    if (n_model == 0) throw validation_error("Dataset: every pixel is masked in every image");
    const Mat full_coords = d.grid.unit_coords();
    d.coords.resize(n_model, 2);
    for (int t = 0; t < n_model; ++t) d.coords.row(t) = full_coords.row(d.model_to_grid[t]);
    for (std::size_t i = 0; i < grids.size(); ++i) {
      const auto& g = grids[i];
      d.image_ids.push_back(g.image_id);
      Mat yi(n_model, q);
      std::vector<std::uint8_t> oi(n_model);
      for (int t = 0; t < n_model; ++t) {
        const int p = d.model_to_grid[t];
        oi[t] = g.mask[p];
        for (int j = 0; j < q; ++j) yi(t, j) = g.counts(p, j);
      }
      d.lgamma_y.push_back((yi.array() + 1.0).unaryExpr([](double v) { return std::lgamma(v); }).matrix());
      d.y.push_back(std::move(yi));
      d.obs.push_back(std::move(oi));
      if (!covariates.empty()) {
        const Mat& xf = covariates[i];
        if (xf.rows() != n_px)
          throw validation_error("Dataset: covariates of image " + g.image_id + " have wrong rows");
        Mat xi(n_model, xf.cols());
        for (int t = 0; t < n_model; ++t) xi.row(t) = xf.row(d.model_to_grid[t]);
        d.X.push_back(std::move(xi));
      } else {
        d.X.push_back(Mat(n_model, 0));
      }
    }
    return d;
  }
};

/// Robbins-Monro tuner on the log scale, driven toward a target acceptance
/// probability during burn-in and frozen afterwards.
struct StepSizeTuner {
  double log_value = std::log(0.1);
  double target = 0.57;
  double lo = std::log(1e-8), hi = std::log(1e4);
  long n = 0;
  bool frozen = false;

  double value() const { return std::exp(log_value); }
  void adapt(double accept_prob) {
    if (frozen) return;
    ++n;
    log_value += (accept_prob - target) / std::pow(static_cast<double>(n), 0.6);
    log_value = std::clamp(log_value, lo, hi);
  }
};

struct AcceptCounter {
  long tried = 0, accepted = 0, clamped = 0;
  void record(bool acc, bool clamp = false) {
    ++tried;
    accepted += acc;
    clamped += clamp;
  }
  double rate() const { return tried > 0 ? static_cast<double>(accepted) / tried : 0.0; }
};

struct ChainState {
  FactorLoadings A;
  Mat B;      // p x q
  Mat alpha;  // N x q
  DecayParams decay;
  std::vector<Mat> V;  // per subject, n_model x k
  std::vector<Mat> W;  // cached log-intensity per subject
  std::vector<StepSizeTuner> row_step, intercept_step, phi_step;
  std::vector<std::vector<StepSizeTuner>> latent_step;
  std::vector<AcceptCounter> acc_row, acc_phi, acc_intercept;
  std::vector<std::vector<AcceptCounter>> acc_latent;
  long iteration = 0;
};

/// Posterior draws plus the layout metadata needed to reuse them.
struct DrawsStore {
  int q = 0, k = 0, p = 0, n_subjects = 0;
  std::vector<std::string> labels;
  std::uint64_t seed = 0;
  std::string config_hash;
  double scale_um = 1.0;
  double unit_extent_x = 1.0, unit_extent_y = 1.0;
  std::vector<long> iterations;
  Mat A_draws;       // S x (q*k), row-major flatten (r*k + j)
  Mat B_draws;       // S x (p*q), row-major flatten
  Mat alpha_draws;   // S x (N*q), row-major flatten
  Mat phi_draws;     // S x k
  Mat loglik_draws;  // S x n_obs, or 0 x 0 when not stored
  std::vector<int> obs_per_subject;  // loglik column layout, subject-major

  int n_draws() const { return static_cast<int>(iterations.size()); }

  /// Stored draws are returned as-is (no pattern re-enforcement), so curve
  /// summaries stay invariant under column sign flips and permutations of
  /// the stored loadings.
  FactorLoadings loadings_at(int s) const {
    FactorLoadings out;
    out.A.resize(q, k);
    for (int r = 0; r < q; ++r)
      for (int j = 0; j < k; ++j) out.A(r, j) = A_draws(s, r * k + j);
    return out;
  }

  DecayParams decay_at(int s) const {
    DecayParams d;
    d.phi = phi_draws.row(s).transpose();
    return d;
  }

  bool same_draws(const DrawsStore& o) const {
    auto eq = [](const Mat& a, const Mat& b) {
      return a.rows() == b.rows() && a.cols() == b.cols() && (a.array() == b.array()).all();
    };
    return iterations == o.iterations && eq(A_draws, o.A_draws) && eq(B_draws, o.B_draws) &&
           eq(alpha_draws, o.alpha_draws) && eq(phi_draws, o.phi_draws) &&
           eq(loglik_draws, o.loglik_draws);
  }
};

/// Gaussian-regression conjugate posterior for coefficients with prior
/// N(0, V_B) and noise sd d: Sigma = (V_B^{-1} + X^T X / d^2)^{-1},
/// mu = Sigma X^T y / d^2. Serves as the closed-form oracle for the
/// loadings/coefficients update in the Gaussian debug outcome.
struct ConjugateUpdate {
  Vec mean;
  Mat cov;
};

inline ConjugateUpdate conjugate_gaussian_update(const Mat& Xtilde, const Vec& y, const Mat& V_B,
                                                 double noise_sd) {
  if (!(noise_sd > 0.0)) throw validation_error("conjugate_gaussian_update: noise sd must be positive");
  const int m = static_cast<int>(Xtilde.cols());
  if (V_B.rows() != m || V_B.cols() != m || y.size() != Xtilde.rows())
    throw validation_error("conjugate_gaussian_update: inconsistent shapes");
  Eigen::LLT<Mat> prior_llt(V_B);
  if (prior_llt.info() != Eigen::Success)
    throw numerical_error("conjugate_gaussian_update: prior covariance is not SPD");
  const double d2 = noise_sd * noise_sd;
  Mat prec = prior_llt.solve(Mat::Identity(m, m));
  prec.noalias() += Xtilde.transpose() * Xtilde / d2;
  Eigen::LLT<Mat> post_llt(prec);
  if (post_llt.info() != Eigen::Success)
    throw numerical_error("conjugate_gaussian_update: singular system");
  ConjugateUpdate out;
  out.cov = post_llt.solve(Mat::Identity(m, m));
  out.mean = post_llt.solve(Xtilde.transpose() * y / d2);
  return out;
}

/// Record of one MALA transition, for detailed-balance checks.
struct MalaDiag {
  Vec x, x_prop, grad_x, grad_prop;
  double logpi_x = 0, logpi_prop = 0, logq_fwd = 0, logq_rev = 0, log_accept = 0;
  double step = 0;
  bool accepted = false, clamped = false;
  bool valid = false;
};

struct RunStats {
  double accept_loadings = 0, accept_phi = 0, accept_latent = 0, accept_intercept = 0;
  long clamp_events = 0;
  long jitter_events = 0;
};

/// Metropolis-within-Gibbs engine. One sweep updates, in order, the
/// per-type loadings/coefficient rows, the decay parameters, the latent
/// blocks of every subject, and the per-subject intercepts. Every update
/// draws from a stream keyed by (seed, iteration, kind, indices), so the
/// chain is reproducible for any worker-thread count.
class Sampler {
 public:
  Sampler(const Dataset& data, SamplerConfig cfg)
      : data_(data), cfg_(std::move(cfg)) {
    cfg_.validate();
    if (cfg_.k > data_.q())
      throw validation_error("sampler: k must not exceed the number of cell types");
    if (data_.n_subjects() == 0) throw validation_error("sampler: no subjects");
    mesh_ = MeshGraph::tiled(data_.grid, cfg_.tile_x, cfg_.tile_y, data_.model_observed);
    if (mesh_.model_to_grid != data_.model_to_grid)
      throw numerical_error("sampler: mesh/model pixel mapping mismatch");
    dist_ = MeshDistances(mesh_, data_.coords);
    init_state();
  }

  const Dataset& data() const { return data_; }
  const SamplerConfig& config() const { return cfg_; }
  const MeshGraph& mesh() const { return mesh_; }
  const std::vector<BlockFactors>& factors() const { return factors_; }
  ChainState& state() { return state_; }
  const ChainState& state() const { return state_; }
  long jitter_events() const {
    long t = 0;
    for (const auto& f : factors_) t += f.jitter_events;
    return t + extra_jitter_;
  }

  // ----- step 1: joint row update of B_{.j} and the free entries of A_{j.}

  struct TargetVal {
    double value = 0.0;
    Vec grad;
    bool clamped = false;
  };

  int step1_dim(int j) const { return data_.p() + state_.A.free_in_row(j); }

  Vec step1_current(int j) const {
    const int p = data_.p(), f = state_.A.free_in_row(j);
    Vec x(p + f);
    for (int t = 0; t < p; ++t) x(t) = state_.B(t, j);
    for (int t = 0; t < f; ++t) x(p + t) = state_.A.A(j, t);
    return x;
  }

  TargetVal step1_target(int j, const Vec& theta) const {
    const int p = data_.p(), f = state_.A.free_in_row(j);
    TargetVal out;
    out.value = -theta.squaredNorm() / (2.0 * cfg_.prior_variance);
    out.grad = -theta / cfg_.prior_variance;
    const bool gaussian = cfg_.outcome == OutcomeModel::gaussian_debug;
    const double d2 = cfg_.debug_noise_sd * cfg_.debug_noise_sd;
    for (int i = 0; i < data_.n_subjects(); ++i) {
      const Mat& Vi = state_.V[i];
      const Mat& Xi = data_.X[i];
      const auto& oi = data_.obs[i];
      const Vec& yj = data_.y[i].col(j);
      for (int t = 0; t < data_.n_model(); ++t) {
        if (!oi[t]) continue;
        double w = state_.alpha(i, j);
        for (int c = 0; c < p; ++c) w += Xi(t, c) * theta(c);
        for (int c = 0; c < f; ++c) w += Vi(t, c) * theta(p + c);
        double g;
        if (gaussian) {
          const double resid = yj(t) - w;
          out.value += -resid * resid / (2.0 * d2);
          g = resid / d2;
        } else {
          if (w > cfg_.w_clamp) {
            out.clamped = true;
            w = cfg_.w_clamp;
          }
          const double ew = std::exp(w);
          out.value += yj(t) * w - ew;
          g = yj(t) - ew;
        }
        for (int c = 0; c < p; ++c) out.grad(c) += g * Xi(t, c);
        for (int c = 0; c < f; ++c) out.grad(p + c) += g * Vi(t, c);
      }
    }
    return out;
  }

  void update_loadings_row(int j, CounterRng rng, MalaDiag* diag = nullptr) {
    Vec x = step1_current(j);
    const bool accepted = hmc_step(
        x, [&](const Vec& t) { return step1_target(j, t); }, state_.row_step[j],
        state_.acc_row[j], cfg_.row_hmc_steps, rng, diag);
    if (accepted) {
      const int p = data_.p(), f = state_.A.free_in_row(j);
      for (int t = 0; t < p; ++t) state_.B(t, j) = x(t);
      for (int t = 0; t < f; ++t) state_.A.A(j, t) = x(p + t);
      refresh_w_column(j);
    }
  }

  // ----- step 3: decay parameter of one factor

  void update_phi(int r, CounterRng rng) {
    const double sd = state_.phi_step[r].value();
    const double cur = state_.decay.phi(r);
    const double prop = std::exp(std::log(cur) + sd * rng.normal());
    const double u = rng.uniform01();
    apply_phi_proposal(r, prop, u);
  }

  /// Hastings decision for a concrete proposed decay; split out so tests can
  /// drive proposals directly. Returns whether the proposal was accepted.
  bool apply_phi_proposal(int r, double phi_prop, double u_accept) {
    double alpha_prob = 0.0;
    bool accept = false;
    if (phi_prop >= cfg_.phi_lower && phi_prop <= cfg_.phi_upper) {
      BlockFactors cand = compute_factors(mesh_, dist_, phi_prop);
      const double dens_prop = factor_density_sum(r, cand);
      const double dens_cur = factor_density_sum(r, factors_[r]);
      const double log_ratio =
          dens_prop - dens_cur + std::log(phi_prop) - std::log(state_.decay.phi(r));
      alpha_prob = std::min(1.0, std::exp(log_ratio));
      accept = u_accept < alpha_prob;
      if (accept) {
        extra_jitter_ += factors_[r].jitter_events;
        factors_[r] = std::move(cand);
        state_.decay.phi(r) = phi_prop;
      } else {
        extra_jitter_ += cand.jitter_events;
      }
    }
    state_.acc_phi[r].record(accept);
    state_.phi_step[r].adapt(alpha_prob);
    return accept;
  }

  // ----- step 4: latent block update, all factors jointly

  void update_latent_block(int i, int s, CounterRng rng, MalaDiag* diag = nullptr) {
    const auto& px = mesh_.blocks[s].pixels;
    const int ns = static_cast<int>(px.size());
    const int k = cfg_.k;
    Vec x(k * ns);
    for (int r = 0; r < k; ++r)
      for (int t = 0; t < ns; ++t) x(r * ns + t) = state_.V[i](px[t], r);

    // base log-intensity minus the latent contribution, fixed during the move
    Mat base(ns, data_.q());
    for (int t = 0; t < ns; ++t)
      base.row(t) = state_.W[i].row(px[t]) -
                    state_.V[i].row(px[t]) * state_.A.A.transpose();

    auto target = [&](const Vec& v) { return latent_target(i, s, v, base); };
    const bool accepted =
        mala_step(x, target, state_.latent_step[i][s], state_.acc_latent[i][s], rng, diag);
    if (accepted) {
      for (int r = 0; r < k; ++r)
        for (int t = 0; t < ns; ++t) state_.V[i](px[t], r) = x(r * ns + t);
      for (int t = 0; t < ns; ++t)
        state_.W[i].row(px[t]) = base.row(t) + state_.V[i].row(px[t]) * state_.A.A.transpose();
    }
  }

  // ----- intercept update for one subject

  void update_intercepts(int i, CounterRng rng, MalaDiag* diag = nullptr) {
    Vec x = state_.alpha.row(i).transpose();
    const Vec alpha_old = x;
    auto target = [&](const Vec& a) { return intercept_target(i, a, alpha_old); };
    const bool accepted =
        mala_step(x, target, state_.intercept_step[i], state_.acc_intercept[i], rng, diag);
    if (accepted) {
      const Vec delta = x - alpha_old;
      state_.alpha.row(i) = x.transpose();
      state_.W[i].rowwise() += delta.transpose();
    }
  }

  // ----- schedule

  void sweep(long iter) {
    state_.iteration = iter;
    set_frozen(iter >= cfg_.n_burn);
    const int q = data_.q(), n = data_.n_subjects();
#pragma omp parallel for schedule(static)
    for (int j = 0; j < q; ++j)
      update_loadings_row(j, CounterRng::stream(cfg_.seed, iter, 1, j));
    for (int r = 0; r < cfg_.k; ++r)
      update_phi(r, CounterRng::stream(cfg_.seed, iter, 2, r));
    for (const auto& cls : mesh_.color_classes) {
      const long tasks = static_cast<long>(cls.size()) * n;
#pragma omp parallel for schedule(static)
      for (long t = 0; t < tasks; ++t) {
        const int i = static_cast<int>(t / cls.size());
        const int s = cls[t % cls.size()];
        update_latent_block(i, s, CounterRng::stream(cfg_.seed, iter, 3, i, s));
      }
    }
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i)
      update_intercepts(i, CounterRng::stream(cfg_.seed, iter, 4, i));
  }

  /// Reset acceptance/clamp counters (e.g. at the burn-in boundary, to
  /// measure post-adaptation rates).
  void reset_counters() {
    for (auto& c : state_.acc_row) c = {};
    for (auto& c : state_.acc_phi) c = {};
    for (auto& c : state_.acc_intercept) c = {};
    for (auto& vi : state_.acc_latent)
      for (auto& c : vi) c = {};
  }

  DrawsStore run(const std::function<void(Sampler&, long)>& after_sweep = {}) {
    DrawsStore out;
    out.q = data_.q();
    out.k = cfg_.k;
    out.p = data_.p();
    out.n_subjects = data_.n_subjects();
    out.labels = data_.labels;
    out.seed = cfg_.seed;
    out.config_hash = cfg_.config_hash;
    out.scale_um = data_.grid.scale_um;
    out.unit_extent_x = data_.grid.unit_extent_x();
    out.unit_extent_y = data_.grid.unit_extent_y();
    long n_obs = 0;
    for (int i = 0; i < data_.n_subjects(); ++i) {
      int c = 0;
      for (auto o : data_.obs[i]) c += o;
      out.obs_per_subject.push_back(c);
      n_obs += static_cast<long>(c) * data_.q();
    }
    const long n_store = (cfg_.n_iter - 1 - cfg_.n_burn) / cfg_.thin + 1;
    out.A_draws.resize(n_store, data_.q() * cfg_.k);
    out.B_draws.resize(n_store, data_.p() * data_.q());
    out.alpha_draws.resize(n_store, data_.n_subjects() * data_.q());
    out.phi_draws.resize(n_store, cfg_.k);
    if (cfg_.store_loglik) out.loglik_draws.resize(n_store, n_obs);

    long row = 0;
    for (long iter = 0; iter < cfg_.n_iter; ++iter) {
      sweep(iter);
      if (after_sweep) after_sweep(*this, iter);
      if (iter >= cfg_.n_burn && (iter - cfg_.n_burn) % cfg_.thin == 0) {
        store_draw(out, row);
        ++row;
      }
    }
    out.iterations.resize(row);
    for (long t = 0; t < row; ++t) out.iterations[t] = cfg_.n_burn + t * cfg_.thin;
    return out;
  }

  RunStats stats() const {
    RunStats st;
    auto avg = [](const std::vector<AcceptCounter>& v) {
      double s = 0;
      for (const auto& c : v) s += c.rate();
      return v.empty() ? 0.0 : s / static_cast<double>(v.size());
    };
    st.accept_loadings = avg(state_.acc_row);
    st.accept_phi = avg(state_.acc_phi);
    st.accept_intercept = avg(state_.acc_intercept);
    double s = 0;
    long m = 0;
    for (const auto& vi : state_.acc_latent)
      for (const auto& c : vi) {
        s += c.rate();
        ++m;
      }
    st.accept_latent = m > 0 ? s / static_cast<double>(m) : 0.0;
    for (const auto& v : {state_.acc_row, state_.acc_intercept})
      for (const auto& c : v) st.clamp_events += c.clamped;
    for (const auto& vi : state_.acc_latent)
      for (const auto& c : vi) st.clamp_events += c.clamped;
    st.jitter_events = jitter_events();
    return st;
  }

  /// Pointwise log-likelihood of the current state over observed cells,
  /// laid out subject-major, pixel-major, type-minor.
  Vec loglik_pointwise() const {
    std::vector<Vec> parts(data_.n_subjects());
#pragma omp parallel for schedule(static)
    for (int i = 0; i < data_.n_subjects(); ++i) {
      int c = 0;
      for (auto o : data_.obs[i]) c += o;
      Vec part(static_cast<long>(c) * data_.q());
      long idx = 0;
      for (int t = 0; t < data_.n_model(); ++t) {
        if (!data_.obs[i][t]) continue;
        for (int j = 0; j < data_.q(); ++j) {
          const double w = std::min(state_.W[i](t, j), cfg_.w_clamp);
          part(idx++) = data_.y[i](t, j) * w - std::exp(w) - data_.lgamma_y[i](t, j);
        }
      }
      parts[i] = std::move(part);
    }
    long total = 0;
    for (const auto& p : parts) total += p.size();
    Vec out(total);
    long off = 0;
    for (const auto& p : parts) {
      out.segment(off, p.size()) = p;
      off += p.size();
    }
    return out;
  }

  /// Full log posterior density up to additive constants; used by tests.
  double log_posterior() const {
    double v = 0;
    for (int i = 0; i < data_.n_subjects(); ++i)
      v += poisson_loglik(data_.y[i], data_.obs[i], state_.W[i], data_.lgamma_y[i], cfg_.w_clamp)
               .value;
    for (int j = 0; j < data_.q(); ++j)
      v += -step1_current(j).squaredNorm() / (2.0 * cfg_.prior_variance);
    v += -state_.alpha.squaredNorm() / (2.0 * cfg_.prior_variance);
    for (int r = 0; r < cfg_.k; ++r)
      for (int i = 0; i < data_.n_subjects(); ++i)
        v += mgp_logdensity(state_.V[i].col(r), factors_[r], mesh_);
    return v;
  }

 private:
  void init_state() {
    const int q = data_.q(), n = data_.n_subjects(), k = cfg_.k, p = data_.p();
    Mat a = Mat::Zero(q, k);
    for (int j = 0; j < std::min(q, k); ++j) a(j, j) = 0.5;
    state_.A = FactorLoadings(std::move(a));
    state_.B = Mat::Zero(p, q);
    state_.alpha.resize(n, q);
    for (int i = 0; i < n; ++i) {
      long n_obs_i = 0;
      for (auto o : data_.obs[i]) n_obs_i += o;
      for (int j = 0; j < q; ++j) {
        double mean = 0.0;
        if (n_obs_i > 0) {
          double tot = 0.0;
          for (int t = 0; t < data_.n_model(); ++t)
            if (data_.obs[i][t]) tot += data_.y[i](t, j);
          mean = tot / static_cast<double>(n_obs_i);
        }
        state_.alpha(i, j) = std::log(mean + 1.0 / static_cast<double>(data_.n_model()));
      }
    }
    state_.decay.phi = Vec::Constant(k, cfg_.phi_init);
    state_.decay.lower = cfg_.phi_lower;
    state_.decay.upper = cfg_.phi_upper;

    factors_.clear();
    for (int r = 0; r < k; ++r) factors_.push_back(compute_factors(mesh_, dist_, cfg_.phi_init));

    init_latents();
    state_.W.resize(n);
    for (int i = 0; i < n; ++i)
      state_.W[i] = log_intensity(state_.alpha.row(i).transpose(), state_.B, data_.X[i],
                                  state_.V[i], state_.A.A);

    auto tuner = [&](double init, double target) {
      StepSizeTuner t;
      t.log_value = std::log(init);
      t.target = target;
      return t;
    };
    state_.row_step.assign(q, tuner(0.05, cfg_.target_accept_mala));
    state_.intercept_step.assign(n, tuner(0.05, cfg_.target_accept_mala));
    state_.phi_step.assign(k, tuner(0.3, cfg_.target_accept_phi));
    state_.latent_step.assign(n, std::vector<StepSizeTuner>(
                                     mesh_.n_blocks(), tuner(0.1, cfg_.target_accept_mala)));
    state_.acc_row.assign(q, {});
    state_.acc_phi.assign(k, {});
    state_.acc_intercept.assign(n, {});
    state_.acc_latent.assign(n, std::vector<AcceptCounter>(mesh_.n_blocks()));
  }

  /// Factor slot r starts at type r's smoothed, standardized log-count
  /// residual field, so each slot opens anchored to the type the
  /// lower-trapezoidal pattern ties it to. Starting at exactly zero is
  /// degenerate (a perfectly smooth field drives the first decay updates to
  /// the lower prior bound, where tiny conditional variances freeze the
  /// chain), and starting all slots at noise invites slot misassignment that
  /// the constrained pattern cannot rotate out of cheaply. Slots without any
  /// data fall back to a prior draw under phi_init.
  void init_latents() {
    const int n = data_.n_subjects(), k = cfg_.k;
    const int n_model = data_.n_model();
    state_.V.assign(n, Mat::Zero(n_model, k));

    // grid neighbors within the model pixel set, for box smoothing
    std::vector<int> grid_to_model(data_.grid.n_px(), -1);
    for (int t = 0; t < n_model; ++t) grid_to_model[data_.model_to_grid[t]] = t;
    std::vector<std::vector<int>> nbr(n_model);
    for (int t = 0; t < n_model; ++t) {
      const int p = data_.model_to_grid[t];
      const int ix = p % data_.grid.n_x, iy = p / data_.grid.n_x;
      nbr[t].push_back(t);
      for (auto [dx, dy] : {std::pair{-1, 0}, {1, 0}, {0, -1}, {0, 1}}) {
        const int jx = ix + dx, jy = iy + dy;
        if (jx < 0 || jx >= data_.grid.n_x || jy < 0 || jy >= data_.grid.n_y) continue;
        const int m = grid_to_model[jy * data_.grid.n_x + jx];
        if (m >= 0) nbr[t].push_back(m);
      }
    }

    for (int r = 0; r < k; ++r) {
      std::vector<Vec> fields(n);
      double sq_sum = 0.0;
      long count = 0;
      for (int i = 0; i < n; ++i) {
        Vec z = Vec::Zero(n_model);
        for (int t = 0; t < n_model; ++t)
          if (data_.obs[i][t])
            z(t) = std::log(data_.y[i](t, r) + 0.5) -
                   std::log(std::exp(state_.alpha(i, r)) + 0.5);
        for (int pass = 0; pass < 2; ++pass) {
          Vec sm(n_model);
          for (int t = 0; t < n_model; ++t) {
            double acc = 0.0;
            for (int m : nbr[t]) acc += z(m);
            sm(t) = acc / static_cast<double>(nbr[t].size());
          }
          z.swap(sm);
        }
        sq_sum += z.squaredNorm();
        count += n_model;
        fields[i] = std::move(z);
      }
      const double sd = std::sqrt(sq_sum / static_cast<double>(count));
      if (sd > 1e-8) {
        for (int i = 0; i < n; ++i) state_.V[i].col(r) = fields[i] / sd;
      } else {
        for (int i = 0; i < n; ++i) {
          CounterRng rng = CounterRng::stream(cfg_.seed, 0, 5, i, r);
          state_.V[i].col(r) = mgp_sample_prior(factors_[r], mesh_, rng);
        }
      }
    }
  }

  void set_frozen(bool frozen) {
    for (auto& t : state_.row_step) t.frozen = frozen;
    for (auto& t : state_.intercept_step) t.frozen = frozen;
    for (auto& t : state_.phi_step) t.frozen = frozen;
    for (auto& vi : state_.latent_step)
      for (auto& t : vi) t.frozen = frozen;
  }

  /// Generic MALA transition. Rejects outright when the proposal clamps the
  /// log-intensity or is non-finite; a zero step size degenerates to the
  /// identity move.
  template <class Target>
  bool mala_step(Vec& x, Target&& target, StepSizeTuner& tuner, AcceptCounter& counter,
                 CounterRng& rng, MalaDiag* diag) {
    const double eps = tuner.value();
    if (eps == 0.0) {
      counter.record(true);
      tuner.adapt(1.0);
      return false;
    }
    const double e2 = eps * eps;
    const TargetVal cur = target(x);
    Vec z(x.size());
    for (int t = 0; t < z.size(); ++t) z(t) = rng.normal();
    const double u = rng.uniform01();
    const Vec mean_fwd = x + 0.5 * e2 * cur.grad;
    const Vec xp = mean_fwd + eps * z;
    const TargetVal prop = target(xp);
    double alpha_prob = 0.0;
    double log_ratio = -std::numeric_limits<double>::infinity();
    bool accept = false;
    double logq_fwd = 0, logq_rev = 0;
    if (!prop.clamped && std::isfinite(prop.value)) {
      const Vec mean_rev = xp + 0.5 * e2 * prop.grad;
      logq_fwd = -(xp - mean_fwd).squaredNorm() / (2.0 * e2);
      logq_rev = -(x - mean_rev).squaredNorm() / (2.0 * e2);
      log_ratio = prop.value - cur.value + logq_rev - logq_fwd;
      alpha_prob = std::min(1.0, std::exp(log_ratio));
      accept = u < alpha_prob;
    }
    if (diag) {
      diag->x = x;
      diag->x_prop = xp;
      diag->grad_x = cur.grad;
      diag->grad_prop = prop.grad;
      diag->logpi_x = cur.value;
      diag->logpi_prop = prop.value;
      diag->logq_fwd = logq_fwd;
      diag->logq_rev = logq_rev;
      diag->log_accept = log_ratio;
      diag->step = eps;
      diag->accepted = accept;
      diag->clamped = prop.clamped;
      diag->valid = true;
    }
    counter.record(accept, prop.clamped);
    tuner.adapt(alpha_prob);
    if (accept) x = xp;
    return accept;
  }

  /// Short-trajectory HMC transition with identity mass matrix. One leapfrog
  /// step reduces to MALA. Trajectories that clamp the log-intensity or go
  /// non-finite are rejected outright.
  template <class Target>
  bool hmc_step(Vec& x, Target&& target, StepSizeTuner& tuner, AcceptCounter& counter,
                int n_leapfrog, CounterRng& rng, MalaDiag* diag) {
    const double eps = tuner.value();
    if (eps == 0.0) {
      counter.record(true);
      tuner.adapt(1.0);
      return false;
    }
    const TargetVal cur = target(x);
    Vec p(x.size());
    for (int t = 0; t < p.size(); ++t) p(t) = rng.normal();
    const double u = rng.uniform01();
    const double h0 = -cur.value + 0.5 * p.squaredNorm();

    Vec xq = x, pq = p, grad = cur.grad;
    TargetVal last = cur;
    bool bad = false, clamped = false;
    for (int l = 0; l < n_leapfrog; ++l) {
      pq.noalias() += 0.5 * eps * grad;
      xq.noalias() += eps * pq;
      last = target(xq);
      if (last.clamped || !std::isfinite(last.value)) {
        bad = true;
        clamped = last.clamped;
        break;
      }
      grad = last.grad;
      pq.noalias() += 0.5 * eps * grad;
    }
    double alpha_prob = 0.0;
    bool accept = false;
    if (!bad) {
      const double h1 = -last.value + 0.5 * pq.squaredNorm();
      alpha_prob = std::isfinite(h1) ? std::min(1.0, std::exp(h0 - h1)) : 0.0;
      accept = u < alpha_prob;
    }
    if (diag) {
      diag->x = x;
      diag->x_prop = xq;
      diag->grad_x = cur.grad;
      diag->grad_prop = last.grad;
      diag->logpi_x = cur.value;
      diag->logpi_prop = last.value;
      diag->log_accept = bad ? -std::numeric_limits<double>::infinity()
                             : -(-last.value + 0.5 * pq.squaredNorm()) + h0;
      diag->step = eps;
      diag->accepted = accept;
      diag->clamped = clamped;
      diag->valid = true;
    }
    counter.record(accept, clamped);
    tuner.adapt(alpha_prob);
    if (accept) x = xq;
    return accept;
  }

  TargetVal latent_target(int i, int s, const Vec& v, const Mat& base) const {
    const auto& px = mesh_.blocks[s].pixels;
    const int ns = static_cast<int>(px.size());
    const int k = cfg_.k, q = data_.q();
    TargetVal out;
    out.grad = Vec::Zero(k * ns);
    for (int r = 0; r < k; ++r) {
      const auto& e = factors_[r].entries[s];
      Vec m = v.segment(r * ns, ns);
      if (!mesh_.parent_pixels[s].empty())
        m.noalias() -= e.H * detail::gather(state_.V[i].col(r), mesh_.parent_pixels[s]);
      Vec zz = e.R_chol.triangularView<Eigen::Lower>().solve(m);
      out.value += -0.5 * ns * detail::kLog2Pi - 0.5 * e.logdet_R - 0.5 * zz.squaredNorm();
      out.grad.segment(r * ns, ns).noalias() -=
          e.R_chol.transpose().triangularView<Eigen::Upper>().solve(zz);
      for (std::size_t ci = 0; ci < mesh_.blocks[s].children.size(); ++ci) {
        const int c = mesh_.blocks[s].children[ci];
        const auto& ec = factors_[r].entries[c];
        Vec vpar = detail::gather(state_.V[i].col(r), mesh_.parent_pixels[c]);
        // substitute the candidate values at this block's positions
        int off = -1;
        for (std::size_t t = 0; t < mesh_.blocks[c].parents.size(); ++t)
          if (mesh_.blocks[c].parents[t] == s) off = mesh_.parent_offset[c][t];
        vpar.segment(off, ns) = v.segment(r * ns, ns);
        Vec mc = detail::gather(state_.V[i].col(r), mesh_.blocks[c].pixels);
        mc.noalias() -= ec.H * vpar;
        Vec zc = ec.R_chol.triangularView<Eigen::Lower>().solve(mc);
        out.value += -0.5 * static_cast<double>(mc.size()) * detail::kLog2Pi -
                     0.5 * ec.logdet_R - 0.5 * zc.squaredNorm();
        const Vec rinv_mc = ec.R_chol.transpose().triangularView<Eigen::Upper>().solve(zc);
        out.grad.segment(r * ns, ns).noalias() +=
            ec.H.middleCols(off, ns).transpose() * rinv_mc;
      }
    }
    const Mat& A = state_.A.A;
    for (int t = 0; t < ns; ++t) {
      if (!data_.obs[i][px[t]]) continue;
      for (int j = 0; j < q; ++j) {
        double w = base(t, j);
        for (int r = 0; r < k; ++r) w += A(j, r) * v(r * ns + t);
        if (w > cfg_.w_clamp) {
          out.clamped = true;
          w = cfg_.w_clamp;
        }
        const double ew = std::exp(w);
        const double yv = data_.y[i](px[t], j);
        out.value += yv * w - ew;
        const double g = yv - ew;
        for (int r = 0; r < k; ++r) out.grad(r * ns + t) += g * A(j, r);
      }
    }
    return out;
  }

  TargetVal intercept_target(int i, const Vec& a, const Vec& alpha_old) const {
    const int q = data_.q();
    TargetVal out;
    out.value = -a.squaredNorm() / (2.0 * cfg_.prior_variance);
    out.grad = -a / cfg_.prior_variance;
    const Vec delta = a - alpha_old;
    for (int t = 0; t < data_.n_model(); ++t) {
      if (!data_.obs[i][t]) continue;
      for (int j = 0; j < q; ++j) {
        double w = state_.W[i](t, j) + delta(j);
        if (w > cfg_.w_clamp) {
          out.clamped = true;
          w = cfg_.w_clamp;
        }
        const double ew = std::exp(w);
        const double yv = data_.y[i](t, j);
        out.value += yv * w - ew;
        out.grad(j) += yv - ew;
      }
    }
    return out;
  }

  double factor_density_sum(int r, const BlockFactors& f) const {
    const int n = data_.n_subjects();
    std::vector<double> parts(n, 0.0);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) parts[i] = mgp_logdensity(state_.V[i].col(r), f, mesh_);
    double total = 0.0;
    for (double v : parts) total += v;
    return total;
  }

  void refresh_w_column(int j) {
    const int p = data_.p(), f = state_.A.free_in_row(j);
    for (int i = 0; i < data_.n_subjects(); ++i) {
      Vec col = Vec::Constant(data_.n_model(), state_.alpha(i, j));
      if (p > 0) col.noalias() += data_.X[i] * state_.B.col(j);
      if (f > 0) col.noalias() += state_.V[i].leftCols(f) * state_.A.A.row(j).head(f).transpose();
      state_.W[i].col(j) = col;
    }
  }

  void store_draw(DrawsStore& out, long row) {
    const int q = data_.q(), k = cfg_.k, p = data_.p(), n = data_.n_subjects();
    for (int r = 0; r < q; ++r)
      for (int j = 0; j < k; ++j) out.A_draws(row, r * k + j) = state_.A.A(r, j);
    for (int r = 0; r < p; ++r)
      for (int j = 0; j < q; ++j) out.B_draws(row, r * q + j) = state_.B(r, j);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < q; ++j) out.alpha_draws(row, i * q + j) = state_.alpha(i, j);
    for (int r = 0; r < k; ++r) out.phi_draws(row, r) = state_.decay.phi(r);
    if (cfg_.store_loglik) out.loglik_draws.row(row) = loglik_pointwise().transpose();
  }

  const Dataset& data_;
  SamplerConfig cfg_;
  MeshGraph mesh_;
  MeshDistances dist_;
  std::vector<BlockFactors> factors_;
  ChainState state_;
  long extra_jitter_ = 0;
};

}  // namespace meshcox
