// Batch command-line surface: bin raw point patterns, simulate ground-truth
// datasets, fit the model, and post-process draws into curve/diagnostic
// tables. Exit codes: 0 success, 2 validation error, 3 numerical failure.

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include <CLI11.hpp>

#include "meshcox/meshcox.hpp"

namespace {

using namespace meshcox;

std::string timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%S", std::gmtime(&t));
  return buf;
}

void apply_threads(const RunConfig& cfg) {
#ifdef _OPENMP
  if (cfg.threads > 0) omp_set_num_threads(cfg.threads);
#else
  (void)cfg;
#endif
}

struct CliOverrides {
  std::uint64_t seed = 0;
  bool has_seed = false;
  int threads = -1;
  int k = 0;
  std::vector<int> tile;
};

RunConfig make_config(const std::string& path, const CliOverrides& ov) {
  RunConfig cfg = load_config(path);
  if (ov.has_seed) {
    cfg.sampler.seed = ov.seed;
    cfg.sim.seed = ov.seed;
  }
  if (ov.threads >= 0) cfg.threads = ov.threads;
  if (ov.k > 0) cfg.sampler.k = ov.k;
  if (!ov.tile.empty()) {
    if (ov.tile.size() != 2) throw validation_error("--tile expects two values");
    cfg.sampler.tile_x = ov.tile[0];
    cfg.sampler.tile_y = ov.tile[1];
  }
  finalize_config(cfg);
  return cfg;
}

int cmd_bin(const std::string& config_path, const CliOverrides& ov,
            const std::string& points_path, const std::string& out_dir) {
  RunConfig cfg = make_config(config_path, ov);
  apply_threads(cfg);
  PatternSet ps = read_points_csv(points_path, cfg.extents_um);
  auto [patterns, l_star] = rescale_dataset(std::move(ps.patterns));
  std::vector<CountGrid> grids;
  for (const auto& p : patterns) {
    GridSpec g = grid_for_extent(p.extent_x * l_star, p.extent_y * l_star, l_star,
                                 cfg.pixel_size_um);
    grids.push_back(bin_pattern(p, g, static_cast<int>(ps.labels.size())));
  }
  std::filesystem::create_directories(out_dir);
  write_counts_csv(out_dir + "/counts.csv", grids, ps.labels);
  write_manifest(out_dir + "/manifest.json", grids, ps.labels, l_star, cfg.config_hash,
                 cfg.sampler.seed);
  std::cout << "binned " << grids.size() << " images into " << out_dir << "\n";
  return 0;
}

int cmd_simulate(const std::string& config_path, const CliOverrides& ov,
                 const std::string& out_dir) {
  RunConfig cfg = make_config(config_path, ov);
  apply_threads(cfg);
  auto [grids, truth] = simulate_dataset(cfg.sim);
  std::vector<std::string> labels;
  for (int j = 0; j < cfg.sim.q; ++j) labels.push_back("type_" + std::to_string(j));
  std::filesystem::create_directories(out_dir);
  write_counts_csv(out_dir + "/counts.csv", grids, labels);
  write_manifest(out_dir + "/manifest.json", grids, labels, cfg.sim.l_star_um, cfg.config_hash,
                 cfg.sim.seed);
  write_truth_json(out_dir + "/truth.json", truth, labels, cfg.config_hash, cfg.sim.seed);
  std::cout << "simulated " << grids.size() << " images into " << out_dir << "\n";
  return 0;
}

int cmd_fit(const std::string& config_path, const CliOverrides& ov,
            const std::string& counts_path, const std::string& manifest_path,
            const std::string& out_dir) {
  RunConfig cfg = make_config(config_path, ov);
  apply_threads(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  const std::string started = timestamp();
  CountData data = read_counts(counts_path, manifest_path);
  Dataset ds = Dataset::from_grids(data.grids, data.labels);
  Sampler sampler(ds, cfg.sampler);
  DrawsStore draws = sampler.run();
  std::filesystem::create_directories(out_dir);
  save_draws(out_dir, draws);
  const RunStats st = sampler.stats();
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::ofstream log(out_dir + "/run.log");
  log << "started " << started << "\nfinished " << timestamp() << "\n"
      << "config_hash " << cfg.config_hash << "\nseed " << cfg.sampler.seed << "\n"
      << "images " << ds.n_subjects() << " pixels " << ds.n_model() << " types " << ds.q()
      << " k " << cfg.sampler.k << "\n"
      << "iterations " << cfg.sampler.n_iter << " burn " << cfg.sampler.n_burn << " thin "
      << cfg.sampler.thin << " stored " << draws.n_draws() << "\n"
      << "accept loadings " << st.accept_loadings << "\naccept phi " << st.accept_phi << "\n"
      << "accept latent " << st.accept_latent << "\naccept intercept " << st.accept_intercept
      << "\nclamp_events " << st.clamp_events << "\njitter_events " << st.jitter_events << "\n"
      << "seconds " << secs << "\n";
  std::cout << "stored " << draws.n_draws() << " draws in " << out_dir << "\n";
  return 0;
}

std::vector<double> store_h_grid(const DrawsStore& d, int n_points) {
  return default_h_grid(d.unit_extent_x, d.unit_extent_y, d.scale_um, n_points);
}

int cmd_xcorr(const std::string& draws_dir, const std::string& out_path, int n_points) {
  DrawsStore d = load_draws(draws_dir);
  const auto h = store_h_grid(d, n_points);
  std::vector<CorrelationCurve> curves;
  for (const auto& pr : all_pairs(d.q)) curves.push_back(xcorr_summary(d, pr[0], pr[1], h));
  write_curves_csv(out_path, curves, d.labels, d.config_hash, d.seed);
  std::cout << "wrote " << curves.size() << " curves to " << out_path << "\n";
  return 0;
}

int cmd_compare(const std::string& dir_a, const std::string& dir_b, const std::string& out_path,
                int n_points) {
  DrawsStore a = load_draws(dir_a);
  DrawsStore b = load_draws(dir_b);
  const auto h = store_h_grid(a, n_points);
  std::vector<CorrelationCurve> curves;
  for (const auto& pr : all_pairs(a.q)) curves.push_back(diff_curves(a, b, pr[0], pr[1], h));
  write_curves_csv(out_path, curves, a.labels,
                   a.config_hash == b.config_hash ? a.config_hash
                                                  : a.config_hash + "+" + b.config_hash,
                   a.seed);
  std::cout << "wrote " << curves.size() << " difference curves to " << out_path << "\n";
  return 0;
}

int cmd_diagnose(const std::vector<std::string>& draws_dirs, const std::string& out_dir,
                 int n_points, const std::vector<int>& sweep_k, const std::string& config_path,
                 const CliOverrides& ov, const std::string& counts_path,
                 const std::string& manifest_path) {
  std::filesystem::create_directories(out_dir);

  if (!sweep_k.empty()) {
    if (config_path.empty() || counts_path.empty() || manifest_path.empty())
      throw validation_error("--sweep-k needs --config, --counts and --manifest");
    RunConfig base = make_config(config_path, ov);
    apply_threads(base);
    CountData data = read_counts(counts_path, manifest_path);
    Dataset ds = Dataset::from_grids(data.grids, data.labels);
    auto out = std::ofstream(out_dir + "/waic_sweep.csv");
    out << "k,waic,lppd,p_waic\n";
    for (int k : sweep_k) {
      RunConfig cfg = base;
      cfg.sampler.k = k;
      cfg.sampler.store_loglik = true;
      finalize_config(cfg);
      Sampler sampler(ds, cfg.sampler);
      DrawsStore draws = sampler.run();
      const WaicResult w = waic(draws.loglik_draws);
      out << k << ',' << format_double(w.waic) << ',' << format_double(w.lppd) << ','
          << format_double(w.p_waic) << '\n';
      std::cout << "k=" << k << " waic=" << w.waic << "\n";
    }
    return 0;
  }

  if (draws_dirs.empty()) throw validation_error("diagnose: need at least one --draws directory");
  std::vector<DrawsStore> stores;
  for (const auto& dir : draws_dirs) stores.push_back(load_draws(dir));
  for (const auto& s : stores)
    if (s.labels != stores.front().labels)
      throw validation_error("diagnose: draws stores have mismatched cell-type sets");
  const DrawsStore& first = stores.front();
  const auto h_um = store_h_grid(first, n_points);

  // convergence of the correlation-curve chains, per pair and distance
  std::vector<DiagnosticRow> rows;
  for (const auto& pr : all_pairs(first.q)) {
    std::vector<Mat> per_store;  // draws x h
    for (const auto& st : stores) {
      std::vector<double> h_unit(h_um.size());
      for (std::size_t t = 0; t < h_um.size(); ++t) h_unit[t] = h_um[t] / st.scale_um;
      Mat m(st.n_draws(), h_um.size());
      for (int dd = 0; dd < st.n_draws(); ++dd) {
        const auto curve = cross_corr(st.loadings_at(dd), st.decay_at(dd), pr[0], pr[1], h_unit);
        for (std::size_t t = 0; t < curve.size(); ++t) m(dd, t) = curve[t];
      }
      per_store.push_back(std::move(m));
    }
    for (std::size_t t = 0; t < h_um.size(); ++t) {
      std::vector<Vec> chains;
      for (const auto& m : per_store) chains.push_back(m.col(t));
      rows.push_back({"rhat", pr[0], pr[1], h_um[t], rhat(chains)});
      rows.push_back({"bulk_ess", pr[0], pr[1], h_um[t], bulk_ess(chains)});
    }
  }
  write_diagnostics_csv(out_dir + "/diagnostics.csv", rows, first.labels, first.config_hash, first.seed);

  // WAIC over the pooled draws of all stores that carry log-likelihoods
  long total_rows = 0;
  for (const auto& st : stores)
    if (st.loglik_draws.size() > 0) total_rows += st.loglik_draws.rows();
  if (total_rows >= 2) {
    const long cols = first.loglik_draws.cols();
    Mat pooled(total_rows, cols);
    long off = 0;
    for (const auto& st : stores) {
      if (st.loglik_draws.size() == 0) continue;
      if (st.loglik_draws.cols() != cols)
        throw validation_error("diagnose: draws stores cover different observation sets");
      pooled.middleRows(off, st.loglik_draws.rows()) = st.loglik_draws;
      off += st.loglik_draws.rows();
    }
    write_waic_json(out_dir + "/waic.json", waic(pooled), first.config_hash, first.seed);
  }

  // posterior loadings summary, sign-aligned per draw
  {
    auto out = std::ofstream(out_dir + "/loadings.csv");
    out << "row,factor,mean,lo95,hi95\n";
    std::vector<Mat> aligned;
    for (const auto& st : stores)
      for (int dd = 0; dd < st.n_draws(); ++dd) {
        Mat a = st.loadings_at(dd).A;
        align_loading_signs(a);
        aligned.push_back(std::move(a));
      }
    for (int r = 0; r < first.q; ++r)
      for (int j = 0; j < first.k; ++j) {
        std::vector<double> vals;
        for (const auto& a : aligned) vals.push_back(a(r, j));
        std::sort(vals.begin(), vals.end());
        double mean = 0;
        for (double v : vals) mean += v;
        mean /= static_cast<double>(vals.size());
        const auto q1 = vals[static_cast<std::size_t>(0.025 * (vals.size() - 1))];
        const auto q2 = vals[static_cast<std::size_t>(0.975 * (vals.size() - 1))];
        out << r << ',' << j << ',' << format_double(mean) << ',' << format_double(q1) << ','
            << format_double(q2) << '\n';
      }
  }
  std::cout << "wrote diagnostics to " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-subject spatial factor Cox process modeling"};
  app.require_subcommand(1);

  std::string config_path, points_path, counts_path, manifest_path, out_dir, out_path;
  std::string draws_a, draws_b;
  std::vector<std::string> draws_dirs;
  std::vector<int> sweep_k;
  int n_points = 60;
  CliOverrides ov;

  auto add_overrides = [&](CLI::App* cmd) {
    cmd->add_option("--seed", ov.seed, "override the config seed")
        ->each([&](const std::string&) { ov.has_seed = true; });
    cmd->add_option("--threads", ov.threads, "worker threads (wall time only, never results)");
    cmd->add_option("--k", ov.k, "override the number of latent factors");
    cmd->add_option("--tile", ov.tile, "override the mesh tile size")->expected(2);
  };

  auto* bin = app.add_subcommand("bin", "bin raw point patterns into count grids");
  bin->add_option("--config", config_path, "config file")->required();
  bin->add_option("--points", points_path, "input points CSV")->required();
  bin->add_option("--out-dir", out_dir, "output directory")->required();
  add_overrides(bin);

  auto* sim = app.add_subcommand("simulate", "draw a ground-truth dataset");
  sim->add_option("--config", config_path, "config file")->required();
  sim->add_option("--out-dir", out_dir, "output directory")->required();
  add_overrides(sim);

  auto* fit = app.add_subcommand("fit", "run the MCMC sampler");
  fit->add_option("--config", config_path, "config file")->required();
  fit->add_option("--counts", counts_path, "counts CSV")->required();
  fit->add_option("--manifest", manifest_path, "manifest JSON")->required();
  fit->add_option("--out-dir", out_dir, "draws output directory")->required();
  add_overrides(fit);

  auto* xc = app.add_subcommand("xcorr", "posterior correlation curves");
  xc->add_option("--draws", draws_a, "draws directory")->required();
  xc->add_option("--out", out_path, "output curves CSV")->required();
  xc->add_option("--points", n_points, "number of distance grid points");

  auto* di = app.add_subcommand("diagnose", "convergence diagnostics and WAIC");
  di->add_option("--draws", draws_dirs, "draws directories (repeat for multiple chains)");
  di->add_option("--out-dir", out_dir, "output directory")->required();
  di->add_option("--points", n_points, "number of distance grid points");
  di->add_option("--sweep-k", sweep_k, "fit these k values and tabulate WAIC")->delimiter(',');
  di->add_option("--config", config_path, "config file (for --sweep-k)");
  di->add_option("--counts", counts_path, "counts CSV (for --sweep-k)");
  di->add_option("--manifest", manifest_path, "manifest JSON (for --sweep-k)");
  add_overrides(di);

  auto* cp = app.add_subcommand("compare", "difference of two groups' curves");
  cp->add_option("--draws-a", draws_a, "first draws directory")->required();
  cp->add_option("--draws-b", draws_b, "second draws directory")->required();
  cp->add_option("--out", out_path, "output difference CSV");
  cp->add_option("--points", n_points, "number of distance grid points");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (bin->parsed()) return cmd_bin(config_path, ov, points_path, out_dir);
    if (sim->parsed()) return cmd_simulate(config_path, ov, out_dir);
    if (fit->parsed()) return cmd_fit(config_path, ov, counts_path, manifest_path, out_dir);
    if (xc->parsed()) return cmd_xcorr(draws_a, out_path, n_points);
    if (di->parsed())
      return cmd_diagnose(draws_dirs, out_dir, n_points, sweep_k, config_path, ov, counts_path,
                          manifest_path);
    if (cp->parsed())
      return cmd_compare(draws_a, draws_b, out_path.empty() ? "diff_curves.csv" : out_path,
                         n_points);
  } catch (const meshcox::validation_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const meshcox::numerical_error& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
