#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "meshcox/common.hpp"
#include "meshcox/diagnostics.hpp"
#include "meshcox/preprocess.hpp"
#include "meshcox/sampler.hpp"
#include "meshcox/simulate.hpp"

namespace meshcox {

using json = nlohmann::json;

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw validation_error("cannot open " + path);
  return in;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw validation_error("cannot write " + path);
  return out;
}

inline double parse_double(const std::string& s, const std::string& where) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw validation_error("malformed number '" + s + "' in " + where);
  }
}

inline long parse_long(const std::string& s, const std::string& where) {
  try {
    std::size_t pos = 0;
    const long v = std::stol(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw validation_error("malformed integer '" + s + "' in " + where);
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// point patterns

struct PatternSet {
  std::vector<PointPattern> patterns;          // microns, origin-shifted
  std::vector<std::string> labels;             // lexicographic
  std::vector<std::vector<long>> csv_rows;     // per pattern: source line numbers
};

/// Read `image_id,x,y,cell_type` (microns). Each image is shifted so its
/// bottom-left corner sits at the origin; extents default to the shifted
/// coordinate maxima and can be overridden per image.
inline PatternSet read_points_csv(const std::string& path,
                                  const std::map<std::string, std::array<double, 2>>&
                                      extents_override_um = {}) {
  auto in = detail::open_in(path);
  std::string line;
  if (!std::getline(in, line)) throw validation_error(path + ": empty file");
  if (detail::split_csv_line(line) != std::vector<std::string>{"image_id", "x", "y", "cell_type"})
    throw validation_error(path + ": expected header image_id,x,y,cell_type");

  struct RawImage {
    std::vector<double> x, y;
    std::vector<std::string> type;
    std::vector<long> row;
  };
  std::map<std::string, RawImage> images;
  std::set<std::string> label_set;
  long row_no = 1;
  while (std::getline(in, line)) {
    ++row_no;
    if (line.empty()) continue;
    auto f = detail::split_csv_line(line);
    if (f.size() != 4)
      throw validation_error(path + ": row " + std::to_string(row_no) + " has " +
                             std::to_string(f.size()) + " fields, expected 4");
    auto& img = images[f[0]];
    img.x.push_back(detail::parse_double(f[1], path + " row " + std::to_string(row_no)));
    img.y.push_back(detail::parse_double(f[2], path + " row " + std::to_string(row_no)));
    img.type.push_back(f[3]);
    img.row.push_back(row_no);
    label_set.insert(f[3]);
  }
  if (images.empty()) throw validation_error(path + ": no data rows");

  PatternSet out;
  out.labels.assign(label_set.begin(), label_set.end());
  std::map<std::string, int> label_index;
  for (std::size_t t = 0; t < out.labels.size(); ++t)
    label_index[out.labels[t]] = static_cast<int>(t);

  for (auto& [id, img] : images) {
    PointPattern p;
    p.image_id = id;
    const double min_x = *std::min_element(img.x.begin(), img.x.end());
    const double min_y = *std::min_element(img.y.begin(), img.y.end());
    p.x = std::move(img.x);
    p.y = std::move(img.y);
    for (auto& v : p.x) v -= min_x;
    for (auto& v : p.y) v -= min_y;
    p.extent_x = *std::max_element(p.x.begin(), p.x.end());
    p.extent_y = *std::max_element(p.y.begin(), p.y.end());
    if (auto it = extents_override_um.find(id); it != extents_override_um.end()) {
      p.extent_x = it->second[0];
      p.extent_y = it->second[1];
      for (std::size_t t = 0; t < p.x.size(); ++t)
        if (p.x[t] > p.extent_x || p.y[t] > p.extent_y)
          throw validation_error(path + ": row " + std::to_string(img.row[t]) +
                                 " lies outside the stated extent of image " + id);
    }
    for (const auto& t : img.type) p.type.push_back(label_index[t]);
    out.patterns.push_back(std::move(p));
    out.csv_rows.push_back(std::move(img.row));
  }
  return out;
}

// ---------------------------------------------------------------------------
// count grids + manifest

/// Long-format counts, nonzero cells only; zeros are implied by the manifest.
inline void write_counts_csv(const std::string& path, const std::vector<CountGrid>& grids,
                             const std::vector<std::string>& labels) {
  auto out = detail::open_out(path);
  out << "image_id,px,py,cell_type,count\n";
  for (const auto& g : grids)
    for (int p = 0; p < g.n_px(); ++p)
      for (int j = 0; j < g.q(); ++j)
        if (g.counts(p, j) != 0)
          out << g.image_id << ',' << p % g.grid.n_x << ',' << p / g.grid.n_x << ','
              << labels[j] << ',' << g.counts(p, j) << '\n';
}

inline json grid_to_json(const GridSpec& g) {
  return json{{"n_x", g.n_x},
              {"n_y", g.n_y},
              {"scale_um", g.scale_um},
              {"extent_x_um", g.extent_x_um},
              {"extent_y_um", g.extent_y_um}};
}

inline GridSpec grid_from_json(const json& j) {
  GridSpec g;
  g.n_x = j.at("n_x").get<int>();
  g.n_y = j.at("n_y").get<int>();
  g.scale_um = j.at("scale_um").get<double>();
  g.extent_x_um = j.at("extent_x_um").get<double>();
  g.extent_y_um = j.at("extent_y_um").get<double>();
  return g;
}

inline void write_manifest(const std::string& path, const std::vector<CountGrid>& grids,
                           const std::vector<std::string>& labels, double l_star_um,
                           const std::string& config_hash, std::uint64_t seed) {
  json man;
  man["format"] = "meshcox-counts-v1";
  man["config_hash"] = config_hash;
  man["seed"] = seed;
  man["l_star_um"] = l_star_um;
  man["labels"] = labels;
  man["images"] = json::array();
  for (const auto& g : grids) {
    json img;
    img["image_id"] = g.image_id;
    img["grid"] = grid_to_json(g.grid);
    json missing = json::array();
    for (int p = 0; p < g.n_px(); ++p)
      if (!g.mask[p]) missing.push_back(p);
    img["missing_pixels"] = missing;
    man["images"].push_back(img);
  }
  detail::open_out(path) << man.dump(2) << '\n';
}

struct CountData {
  std::vector<CountGrid> grids;
  std::vector<std::string> labels;
  double l_star_um = 1.0;
};

inline CountData read_counts(const std::string& counts_path, const std::string& manifest_path) {
  json man;
  try {
    detail::open_in(manifest_path) >> man;
  } catch (const json::exception& e) {
    throw validation_error(manifest_path + ": " + e.what());
  }
  CountData out;
  out.labels = man.at("labels").get<std::vector<std::string>>();
  out.l_star_um = man.at("l_star_um").get<double>();
  std::map<std::string, int> label_index;
  for (std::size_t t = 0; t < out.labels.size(); ++t)
    label_index[out.labels[t]] = static_cast<int>(t);
  std::map<std::string, int> grid_index;
  for (const auto& img : man.at("images")) {
    CountGrid g;
    g.image_id = img.at("image_id").get<std::string>();
    g.grid = grid_from_json(img.at("grid"));
    g.counts = IMat::Zero(g.n_px(), static_cast<int>(out.labels.size()));
    g.mask.assign(g.n_px(), 1);
    for (int p : img.at("missing_pixels").get<std::vector<int>>()) {
      if (p < 0 || p >= g.n_px())
        throw validation_error(manifest_path + ": missing pixel out of range in " + g.image_id);
      g.mask[p] = 0;
    }
    g.unit_coords = g.grid.unit_coords();
    grid_index[g.image_id] = static_cast<int>(out.grids.size());
    out.grids.push_back(std::move(g));
  }

  auto in = detail::open_in(counts_path);
  std::string line;
  if (!std::getline(in, line) ||
      detail::split_csv_line(line) !=
          std::vector<std::string>{"image_id", "px", "py", "cell_type", "count"})
    throw validation_error(counts_path + ": expected header image_id,px,py,cell_type,count");
  long row_no = 1;
  while (std::getline(in, line)) {
    ++row_no;
    if (line.empty()) continue;
    auto f = detail::split_csv_line(line);
    if (f.size() != 5)
      throw validation_error(counts_path + ": malformed row " + std::to_string(row_no));
    const std::string where = counts_path + " row " + std::to_string(row_no);
    auto git = grid_index.find(f[0]);
    if (git == grid_index.end()) throw validation_error(where + ": unknown image " + f[0]);
    auto lit = label_index.find(f[3]);
    if (lit == label_index.end()) throw validation_error(where + ": unknown cell type " + f[3]);
    CountGrid& g = out.grids[git->second];
    const long px = detail::parse_long(f[1], where), py = detail::parse_long(f[2], where);
    if (px < 0 || px >= g.grid.n_x || py < 0 || py >= g.grid.n_y)
      throw validation_error(where + ": pixel out of range");
    const long c = detail::parse_long(f[4], where);
    if (c < 0) throw validation_error(where + ": negative count");
    g.counts(py * g.grid.n_x + px, lit->second) = static_cast<int>(c);
  }
  return out;
}

// ---------------------------------------------------------------------------
// draws store

inline void save_draws(const std::string& dir, const DrawsStore& d) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    auto out = detail::open_out(dir + "/draws.csv");
    out << "param,index,iteration,value\n";
    auto dump = [&](const char* name, const Mat& m) {
      for (int s = 0; s < m.rows(); ++s)
        for (int c = 0; c < m.cols(); ++c)
          out << name << ',' << c << ',' << d.iterations[s] << ',' << format_double(m(s, c))
              << '\n';
    };
    dump("A", d.A_draws);
    dump("B", d.B_draws);
    dump("alpha", d.alpha_draws);
    dump("phi", d.phi_draws);
  }
  json meta;
  meta["format"] = "meshcox-draws-v1";
  meta["q"] = d.q;
  meta["k"] = d.k;
  meta["p"] = d.p;
  meta["n_subjects"] = d.n_subjects;
  meta["labels"] = d.labels;
  meta["seed"] = d.seed;
  meta["config_hash"] = d.config_hash;
  meta["scale_um"] = d.scale_um;
  meta["unit_extent_x"] = d.unit_extent_x;
  meta["unit_extent_y"] = d.unit_extent_y;
  meta["iterations"] = d.iterations;
  meta["obs_per_subject"] = d.obs_per_subject;
  meta["loglik"] = json{{"file", "loglik.bin"},
                        {"dtype", "float64-little-endian"},
                        {"rows", d.loglik_draws.rows()},
                        {"cols", d.loglik_draws.cols()},
                        {"layout", "row-major; columns subject-major, pixel-major, type-minor"}};
  detail::open_out(dir + "/meta.json") << meta.dump(2) << '\n';
  {
    std::ofstream bin(dir + "/loglik.bin", std::ios::binary);
    if (!bin) throw validation_error("cannot write " + dir + "/loglik.bin");
    for (int s = 0; s < d.loglik_draws.rows(); ++s)
      for (int c = 0; c < d.loglik_draws.cols(); ++c) {
        const double v = d.loglik_draws(s, c);
        bin.write(reinterpret_cast<const char*>(&v), sizeof(double));
      }
  }
}

inline DrawsStore load_draws(const std::string& dir) {
  json meta;
  try {
    detail::open_in(dir + "/meta.json") >> meta;
  } catch (const json::exception& e) {
    throw validation_error(dir + "/meta.json: " + e.what());
  }
  DrawsStore d;
  d.q = meta.at("q").get<int>();
  d.k = meta.at("k").get<int>();
  d.p = meta.at("p").get<int>();
  d.n_subjects = meta.at("n_subjects").get<int>();
  d.labels = meta.at("labels").get<std::vector<std::string>>();
  d.seed = meta.at("seed").get<std::uint64_t>();
  d.config_hash = meta.at("config_hash").get<std::string>();
  d.scale_um = meta.at("scale_um").get<double>();
  d.unit_extent_x = meta.at("unit_extent_x").get<double>();
  d.unit_extent_y = meta.at("unit_extent_y").get<double>();
  d.iterations = meta.at("iterations").get<std::vector<long>>();
  d.obs_per_subject = meta.at("obs_per_subject").get<std::vector<int>>();
  const int s_draws = d.n_draws();
  d.A_draws = Mat::Zero(s_draws, d.q * d.k);
  d.B_draws = Mat::Zero(s_draws, d.p * d.q);
  d.alpha_draws = Mat::Zero(s_draws, d.n_subjects * d.q);
  d.phi_draws = Mat::Zero(s_draws, d.k);
  std::map<long, int> iter_row;
  for (int t = 0; t < s_draws; ++t) iter_row[d.iterations[t]] = t;

  auto in = detail::open_in(dir + "/draws.csv");
  std::string line;
  if (!std::getline(in, line) ||
      detail::split_csv_line(line) !=
          std::vector<std::string>{"param", "index", "iteration", "value"})
    throw validation_error(dir + "/draws.csv: bad header");
  long row_no = 1;
  while (std::getline(in, line)) {
    ++row_no;
    if (line.empty()) continue;
    auto f = detail::split_csv_line(line);
    if (f.size() != 4)
      throw validation_error(dir + "/draws.csv: malformed row " + std::to_string(row_no));
    const std::string where = dir + "/draws.csv row " + std::to_string(row_no);
    const long idx = detail::parse_long(f[1], where);
    const long iter = detail::parse_long(f[2], where);
    const double val = detail::parse_double(f[3], where);
    auto rit = iter_row.find(iter);
    if (rit == iter_row.end()) throw validation_error(where + ": unknown iteration");
    Mat* m = nullptr;
    if (f[0] == "A") m = &d.A_draws;
    else if (f[0] == "B") m = &d.B_draws;
    else if (f[0] == "alpha") m = &d.alpha_draws;
    else if (f[0] == "phi") m = &d.phi_draws;
    else throw validation_error(where + ": unknown parameter " + f[0]);
    if (idx < 0 || idx >= m->cols()) throw validation_error(where + ": index out of range");
    (*m)(rit->second, idx) = val;
  }

  const long rows = meta.at("loglik").at("rows").get<long>();
  const long cols = meta.at("loglik").at("cols").get<long>();
  d.loglik_draws.resize(rows, cols);
  if (rows * cols > 0) {
    std::ifstream bin(dir + "/loglik.bin", std::ios::binary);
    if (!bin) throw validation_error("cannot open " + dir + "/loglik.bin");
    for (long s = 0; s < rows; ++s)
      for (long c = 0; c < cols; ++c) {
        double v = 0;
        if (!bin.read(reinterpret_cast<char*>(&v), sizeof(double)))
          throw validation_error(dir + "/loglik.bin: truncated");
        d.loglik_draws(s, c) = v;
      }
  }
  return d;
}

// ---------------------------------------------------------------------------
// curve and diagnostic tables

inline void write_curves_csv(const std::string& path, const std::vector<CorrelationCurve>& curves,
                             const std::vector<std::string>& labels,
                             const std::string& config_hash, std::uint64_t seed) {
  auto out = detail::open_out(path);
  out << "# config_hash=" << config_hash << " seed=" << seed << '\n';
  out << "pair_r,pair_s,h_microns,mean,lo95,hi95\n";
  for (const auto& c : curves)
    for (std::size_t m = 0; m < c.h_um.size(); ++m)
      out << labels[c.r] << ',' << labels[c.s] << ',' << format_double(c.h_um[m]) << ','
          << format_double(c.mean[m]) << ',' << format_double(c.lo95[m]) << ','
          << format_double(c.hi95[m]) << '\n';
}

struct DiagnosticRow {
  std::string quantity;
  int r = 0, s = 0;
  double h_um = 0, value = 0;
};

inline void write_diagnostics_csv(const std::string& path, const std::vector<DiagnosticRow>& rows,
                                  const std::vector<std::string>& labels,
                                  const std::string& config_hash, std::uint64_t seed) {
  auto out = detail::open_out(path);
  out << "# config_hash=" << config_hash << " seed=" << seed << '\n';
  out << "quantity,pair_r,pair_s,h_microns,value\n";
  for (const auto& r : rows)
    out << r.quantity << ',' << labels[r.r] << ',' << labels[r.s] << ','
        << format_double(r.h_um) << ',' << format_double(r.value) << '\n';
}

inline void write_waic_json(const std::string& path, const WaicResult& w,
                            const std::string& config_hash, std::uint64_t seed) {
  json j;
  j["lppd"] = w.lppd;
  j["p_waic"] = w.p_waic;
  j["waic"] = w.waic;
  j["config_hash"] = config_hash;
  j["seed"] = seed;
  detail::open_out(path) << j.dump(2) << '\n';
}

inline void write_truth_json(const std::string& path, const TruthRecord& t,
                             const std::vector<std::string>& labels,
                             const std::string& config_hash, std::uint64_t seed) {
  json j;
  j["config_hash"] = config_hash;
  j["seed"] = seed;
  j["l_star_um"] = t.l_star_um;
  j["labels"] = labels;
  std::vector<std::vector<double>> a(t.A.q());
  for (int r = 0; r < t.A.q(); ++r)
    for (int c = 0; c < t.A.k(); ++c) a[r].push_back(t.A.A(r, c));
  j["A"] = a;
  j["phi"] = std::vector<double>(t.decay.phi.data(), t.decay.phi.data() + t.decay.phi.size());
  j["h_grid_um"] = t.h_grid_um;
  j["pairs"] = t.pairs;
  j["curves"] = t.curves;
  detail::open_out(path) << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// run configuration

struct RunConfig {
  double pixel_size_um = 70.0;
  int threads = 0;
  SamplerConfig sampler;
  SimConfig sim;
  int curve_points = 60;
  std::map<std::string, std::array<double, 2>> extents_um;
  std::string config_hash;
};

inline json to_json(const RunConfig& c) {
  json j;
  j["pixel_size_um"] = c.pixel_size_um;
  j["seed"] = c.sampler.seed;
  j["k"] = c.sampler.k;
  j["tile"] = {c.sampler.tile_x, c.sampler.tile_y};
  j["sampler"] = {{"n_iter", c.sampler.n_iter},
                  {"n_burn", c.sampler.n_burn},
                  {"thin", c.sampler.thin},
                  {"target_accept_phi", c.sampler.target_accept_phi},
                  {"target_accept_mala", c.sampler.target_accept_mala},
                  {"prior_variance", c.sampler.prior_variance},
                  {"phi_lower", c.sampler.phi_lower},
                  {"phi_upper", c.sampler.phi_upper},
                  {"phi_init", c.sampler.phi_init},
                  {"w_clamp", c.sampler.w_clamp},
                  {"store_loglik", c.sampler.store_loglik}};
  j["sim"] = {{"q", c.sim.q},
              {"k_star", c.sim.k_star},
              {"n_images", c.sim.n_images},
              {"n_x", c.sim.n_x},
              {"n_y", c.sim.n_y},
              {"phi_low", c.sim.phi_low},
              {"phi_high", c.sim.phi_high},
              {"alpha", c.sim.alpha},
              {"l_star_um", c.sim.l_star_um},
              {"seed", c.sim.seed}};
  j["curve_points"] = c.curve_points;
  if (!c.extents_um.empty()) {
    json e;
    for (const auto& [id, ext] : c.extents_um) e[id] = ext;
    j["extents_um"] = e;
  }
  return j;
}

/// The configuration hash covers the effective configuration (after CLI
/// overrides), so identical effective runs produce identical outputs.
inline void finalize_config(RunConfig& c) {
  c.config_hash = to_hex(fnv1a64(to_json(c).dump()));
  c.sampler.config_hash = c.config_hash;
}

inline RunConfig load_config(const std::string& path) {
  json j;
  try {
    detail::open_in(path) >> j;
  } catch (const json::exception& e) {
    throw validation_error(path + ": " + e.what());
  }
  RunConfig c;
  try {
    if (j.contains("pixel_size_um")) c.pixel_size_um = j["pixel_size_um"].get<double>();
    if (j.contains("threads")) c.threads = j["threads"].get<int>();
    if (j.contains("seed")) c.sampler.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("k")) c.sampler.k = j["k"].get<int>();
    if (j.contains("tile")) {
      auto t = j["tile"].get<std::vector<int>>();
      if (t.size() != 2) throw validation_error(path + ": tile must be [t_x, t_y]");
      c.sampler.tile_x = t[0];
      c.sampler.tile_y = t[1];
    }
    if (j.contains("curve_points")) c.curve_points = j["curve_points"].get<int>();
    if (j.contains("sampler")) {
      const auto& s = j["sampler"];
      if (s.contains("n_iter")) c.sampler.n_iter = s["n_iter"].get<long>();
      if (s.contains("n_burn")) c.sampler.n_burn = s["n_burn"].get<long>();
      if (s.contains("thin")) c.sampler.thin = s["thin"].get<long>();
      if (s.contains("target_accept_phi"))
        c.sampler.target_accept_phi = s["target_accept_phi"].get<double>();
      if (s.contains("target_accept_mala"))
        c.sampler.target_accept_mala = s["target_accept_mala"].get<double>();
      if (s.contains("prior_variance")) c.sampler.prior_variance = s["prior_variance"].get<double>();
      if (s.contains("phi_lower")) c.sampler.phi_lower = s["phi_lower"].get<double>();
      if (s.contains("phi_upper")) c.sampler.phi_upper = s["phi_upper"].get<double>();
      if (s.contains("phi_init")) c.sampler.phi_init = s["phi_init"].get<double>();
      if (s.contains("w_clamp")) c.sampler.w_clamp = s["w_clamp"].get<double>();
      if (s.contains("store_loglik")) c.sampler.store_loglik = s["store_loglik"].get<bool>();
    }
    if (j.contains("sim")) {
      const auto& s = j["sim"];
      if (s.contains("q")) c.sim.q = s["q"].get<int>();
      if (s.contains("k_star")) c.sim.k_star = s["k_star"].get<int>();
      if (s.contains("n_images")) c.sim.n_images = s["n_images"].get<int>();
      if (s.contains("n_x")) c.sim.n_x = s["n_x"].get<int>();
      if (s.contains("n_y")) c.sim.n_y = s["n_y"].get<int>();
      if (s.contains("phi_low")) c.sim.phi_low = s["phi_low"].get<double>();
      if (s.contains("phi_high")) c.sim.phi_high = s["phi_high"].get<double>();
      if (s.contains("alpha")) c.sim.alpha = s["alpha"].get<double>();
      if (s.contains("l_star_um")) c.sim.l_star_um = s["l_star_um"].get<double>();
      if (s.contains("seed")) c.sim.seed = s["seed"].get<std::uint64_t>();
    } else {
      c.sim.seed = c.sampler.seed;
    }
    if (j.contains("extents_um"))
      for (const auto& [id, ext] : j["extents_um"].items())
        c.extents_um[id] = ext.get<std::array<double, 2>>();
  } catch (const json::exception& e) {
    throw validation_error(path + ": " + e.what());
  }
  c.sim.curve_points = c.curve_points;
  finalize_config(c);
  return c;
}

}  // namespace meshcox
