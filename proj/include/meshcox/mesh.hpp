#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "meshcox/common.hpp"
#include "meshcox/preprocess.hpp"
#include "meshcox/rng.hpp"

namespace meshcox {

struct MeshBlock {
  std::vector<int> pixels;    // indices into the model coordinate array
  std::vector<int> parents;   // block ids, all smaller than the own id
  std::vector<int> children;  // filled by finalize()
};

/// Partition of the model pixels into blocks plus a sparse parent DAG.
/// Blocks are stored in topological order: every parent id is smaller than
/// its child's id. finalize() derives children, the concatenated parent
/// pixel lists, and a coloring in which same-color blocks share no edge of
/// the moral graph (parent, child, or co-parent), so they can be updated
/// concurrently without reading each other's state.
struct MeshGraph {
  std::vector<MeshBlock> blocks;
  std::vector<int> model_to_grid;               // model pixel -> grid pixel (identity if unmasked)
  std::vector<std::vector<int>> parent_pixels;  // per block: parents' pixels, concatenated
  std::vector<std::vector<int>> parent_offset;  // per block: column offset of each parent
  std::vector<std::vector<int>> color_classes;
  int n_pixels = 0;

  int n_blocks() const { return static_cast<int>(blocks.size()); }

  void finalize() {
    const int m = n_blocks();
    parent_pixels.assign(m, {});
    parent_offset.assign(m, {});
    std::vector<int> seen;
    for (int s = 0; s < m; ++s) {
      blocks[s].children.clear();
      if (blocks[s].pixels.empty())
        throw validation_error("MeshGraph: block " + std::to_string(s) + " is empty");
      for (int px : blocks[s].pixels) seen.push_back(px);
    }
    n_pixels = static_cast<int>(seen.size());
    std::sort(seen.begin(), seen.end());
    for (int t = 0; t < n_pixels; ++t)
      if (seen[t] != t)
        throw validation_error("MeshGraph: blocks do not partition the pixel set");
    if (model_to_grid.empty()) {
      model_to_grid.resize(n_pixels);
      for (int t = 0; t < n_pixels; ++t) model_to_grid[t] = t;
    }
    for (int s = 0; s < m; ++s) {
      int off = 0;
      for (int par : blocks[s].parents) {
        if (par < 0 || par >= s)
          throw validation_error("MeshGraph: parent ids must precede the block");
        blocks[par].children.push_back(s);
        parent_offset[s].push_back(off);
        for (int px : blocks[par].pixels) parent_pixels[s].push_back(px);
        off += static_cast<int>(blocks[par].pixels.size());
      }
    }
    color();
  }

  /// Axis-aligned tiling with west and south neighbor tiles as parents.
  /// `observed` (grid-pixel space) drops missing pixels from their block;
  /// fully missing tiles are removed and their children re-parented to the
  /// removed tile's parents.
  static MeshGraph tiled(const GridSpec& grid, int tile_x, int tile_y,
                         const std::vector<std::uint8_t>& observed = {}) {
    if (tile_x < 1 || tile_y < 1) throw validation_error("MeshGraph: tile sides must be >= 1");
    if (grid.n_px() <= 0) throw validation_error("MeshGraph: empty grid");
    if (!observed.empty() && static_cast<int>(observed.size()) != grid.n_px())
      throw validation_error("MeshGraph: observed mask size mismatch");
    const int tcx = (grid.n_x + tile_x - 1) / tile_x;
    const int tcy = (grid.n_y + tile_y - 1) / tile_y;
    const int n_tiles = tcx * tcy;

    MeshGraph g;
    std::vector<std::vector<int>> tile_pixels(n_tiles);
    for (int p = 0; p < grid.n_px(); ++p) {
      if (!observed.empty() && !observed[p]) continue;
      const int ix = p % grid.n_x, iy = p / grid.n_x;
      const int b = (iy / tile_y) * tcx + (ix / tile_x);
      tile_pixels[b].push_back(static_cast<int>(g.model_to_grid.size()));
      g.model_to_grid.push_back(p);
    }
    if (g.model_to_grid.empty()) throw validation_error("MeshGraph: no observed pixels");

    // Resolve parents through any fully-missing tiles, then compact ids.
    std::vector<std::vector<int>> eff_parents(n_tiles);
    for (int b = 0; b < n_tiles; ++b) {
      const int tx = b % tcx, ty = b / tcx;
      std::set<int> acc;
      for (int raw : {tx > 0 ? b - 1 : -1, ty > 0 ? b - tcx : -1}) {
        if (raw < 0) continue;
        if (tile_pixels[raw].empty())
          acc.insert(eff_parents[raw].begin(), eff_parents[raw].end());
        else
          acc.insert(raw);
      }
      eff_parents[b].assign(acc.begin(), acc.end());
    }
    std::vector<int> compact(n_tiles, -1);
    for (int b = 0; b < n_tiles; ++b) {
      if (tile_pixels[b].empty()) continue;
      compact[b] = static_cast<int>(g.blocks.size());
      MeshBlock blk;
      blk.pixels = std::move(tile_pixels[b]);
      for (int par : eff_parents[b]) blk.parents.push_back(compact[par]);
      g.blocks.push_back(std::move(blk));
    }
    g.finalize();
    return g;
  }

  /// One block per pixel, each conditioning on all predecessors. The induced
  /// density is exactly the dense GP; used by exactness oracles.
  static MeshGraph full_parent(int n_pixels) {
    if (n_pixels < 1) throw validation_error("MeshGraph: empty grid");
    MeshGraph g;
    g.blocks.resize(n_pixels);
    for (int s = 0; s < n_pixels; ++s) {
      g.blocks[s].pixels = {s};
      g.blocks[s].parents.resize(s);
      for (int t = 0; t < s; ++t) g.blocks[s].parents[t] = t;
    }
    g.finalize();
    return g;
  }

 private:
  void color() {
    const int m = n_blocks();
    // moral-graph neighbors: parents, children, and co-parents
    std::vector<std::set<int>> nbr(m);
    for (int s = 0; s < m; ++s) {
      for (int a : blocks[s].parents)
        for (int b : blocks[s].parents)
          if (a != b) nbr[a].insert(b);
      for (int par : blocks[s].parents) {
        nbr[s].insert(par);
        nbr[par].insert(s);
      }
    }
    std::vector<int> color_of(m, -1);
    int n_colors = 0;
    for (int s = 0; s < m; ++s) {
      std::set<int> used;
      for (int t : nbr[s])
        if (color_of[t] >= 0) used.insert(color_of[t]);
      int c = 0;
      while (used.count(c)) ++c;
      color_of[s] = c;
      n_colors = std::max(n_colors, c + 1);
    }
    color_classes.assign(n_colors, {});
    for (int s = 0; s < m; ++s) color_classes[color_of[s]].push_back(s);
  }
};

/// Pairwise distances needed by the conditional factors, cached per block so
/// that decay proposals only pay for exp() and Cholesky work.
struct MeshDistances {
  std::vector<Mat> d_ss, d_sp, d_pp;

  MeshDistances() = default;
  MeshDistances(const MeshGraph& mesh, const Mat& coords) {
    const int m = mesh.n_blocks();
    d_ss.resize(m);
    d_sp.resize(m);
    d_pp.resize(m);
    for (int s = 0; s < m; ++s) {
      d_ss[s] = pairwise(coords, mesh.blocks[s].pixels, mesh.blocks[s].pixels);
      if (!mesh.parent_pixels[s].empty()) {
        d_sp[s] = pairwise(coords, mesh.blocks[s].pixels, mesh.parent_pixels[s]);
        d_pp[s] = pairwise(coords, mesh.parent_pixels[s], mesh.parent_pixels[s]);
      }
    }
  }

  static Mat pairwise(const Mat& coords, const std::vector<int>& rows,
                      const std::vector<int>& cols) {
    Mat d(rows.size(), cols.size());
    for (std::size_t a = 0; a < rows.size(); ++a)
      for (std::size_t b = 0; b < cols.size(); ++b)
        d(a, b) = (coords.row(rows[a]) - coords.row(cols[b])).norm();
    return d;
  }
};

/// Conditional Gaussian factors of one latent factor on the mesh:
/// H_s = C_{s,[s]} C_{[s],[s]}^{-1} and R_s = C_{s,s} - H_s C_{[s],s},
/// stored via the lower Cholesky factor of R_s. Root blocks have an empty H
/// and R equal to the within-block prior covariance. The factors depend on
/// (mesh, coords, phi) only and are therefore shared across subjects.
struct BlockFactors {
  struct Entry {
    Mat H;
    Mat R_chol;  // lower triangular
    double logdet_R = 0.0;
  };
  std::vector<Entry> entries;
  double phi = 0.0;
  int jitter_events = 0;
};

inline BlockFactors compute_factors(const MeshGraph& mesh, const MeshDistances& dist,
                                    double phi) {
  BlockFactors f;
  f.phi = phi;
  f.entries.resize(mesh.n_blocks());
  for (int s = 0; s < mesh.n_blocks(); ++s) {
    auto& e = f.entries[s];
    Mat R = (-phi * dist.d_ss[s].array()).exp().matrix();
    if (!mesh.parent_pixels[s].empty()) {
      Mat cpp = (-phi * dist.d_pp[s].array()).exp().matrix();
      Mat csp = (-phi * dist.d_sp[s].array()).exp().matrix();
      Eigen::LLT<Mat> llt_pp(cpp);
      if (llt_pp.info() != Eigen::Success) {
        cpp.diagonal().array() += 1e-8;
        ++f.jitter_events;
        llt_pp.compute(cpp);
        if (llt_pp.info() != Eigen::Success)
          throw numerical_error("compute_factors: parent covariance of block " +
                                std::to_string(s) + " is numerically degenerate");
      }
      e.H = llt_pp.solve(csp.transpose()).transpose();
      R.noalias() -= e.H * csp.transpose();
      R = ((R + R.transpose()) * 0.5).eval();
    }
    Eigen::LLT<Mat> llt(R);
    if (llt.info() != Eigen::Success) {
      R.diagonal().array() += 1e-8;
      ++f.jitter_events;
      llt.compute(R);
      if (llt.info() != Eigen::Success)
        throw numerical_error("compute_factors: conditional covariance of block " +
                              std::to_string(s) + " is numerically degenerate");
    }
    e.R_chol = llt.matrixL();
    e.logdet_R = 2.0 * e.R_chol.diagonal().array().log().sum();
  }
  return f;
}

inline BlockFactors compute_factors(const MeshGraph& mesh, const Mat& coords, double phi) {
  return compute_factors(mesh, MeshDistances(mesh, coords), phi);
}

namespace detail {
inline Vec gather(const Eigen::Ref<const Vec>& v, const std::vector<int>& idx) {
  Vec out(idx.size());
  for (std::size_t t = 0; t < idx.size(); ++t) out(t) = v(idx[t]);
  return out;
}
constexpr double kLog2Pi = 1.8378770664093454836;
}  // namespace detail

/// Block-factorized log-density: sum_s log N(v_s; H_s v_[s], R_s).
inline double mgp_logdensity(const Eigen::Ref<const Vec>& v, const BlockFactors& f,
                             const MeshGraph& mesh) {
  double total = 0.0;
  for (int s = 0; s < mesh.n_blocks(); ++s) {
    const auto& e = f.entries[s];
    Vec m = detail::gather(v, mesh.blocks[s].pixels);
    if (!mesh.parent_pixels[s].empty())
      m.noalias() -= e.H * detail::gather(v, mesh.parent_pixels[s]);
    const Vec z = e.R_chol.triangularView<Eigen::Lower>().solve(m);
    total += -0.5 * static_cast<double>(m.size()) * detail::kLog2Pi - 0.5 * e.logdet_R -
             0.5 * z.squaredNorm();
  }
  return total;
}

/// Ancestral draw in topological order: v_s = H_s v_[s] + chol(R_s) z.
inline Vec mgp_sample_prior(const BlockFactors& f, const MeshGraph& mesh, CounterRng& rng) {
  Vec v = Vec::Zero(mesh.n_pixels);
  for (int s = 0; s < mesh.n_blocks(); ++s) {
    const auto& e = f.entries[s];
    const auto& px = mesh.blocks[s].pixels;
    Vec z(px.size());
    for (int t = 0; t < z.size(); ++t) z(t) = rng.normal();
    Vec vs = e.R_chol.triangularView<Eigen::Lower>() * z;
    if (!mesh.parent_pixels[s].empty())
      vs.noalias() += e.H * detail::gather(v, mesh.parent_pixels[s]);
    for (std::size_t t = 0; t < px.size(); ++t) v(px[t]) = vs(t);
  }
  return v;
}

}  // namespace meshcox
