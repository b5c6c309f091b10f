#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "meshcox/common.hpp"

namespace meshcox {

/// Raw (x, y, type) events of one image. Coordinates are relative to the
/// image's bottom-left corner; extents give the domain size in the same unit
/// as the coordinates (microns before rescaling, fractions of l* after).
struct PointPattern {
  std::string image_id;
  std::vector<double> x, y;
  std::vector<int> type;  // indices into a dataset-wide label list
  double extent_x = 0.0, extent_y = 0.0;

  std::size_t size() const { return x.size(); }
};

/// Pixel grid shared by all images of a fitted group. Pixel p = iy*n_x + ix
/// covers the half-open cell [ix*w, (ix+1)*w) x [iy*h, (iy+1)*h) in unit
/// coordinates, closed on the top/right domain boundary.
struct GridSpec {
  int n_x = 0, n_y = 0;
  double scale_um = 1.0;  // the dataset-wide rescaling length l*
  double extent_x_um = 0.0, extent_y_um = 0.0;

  int n_px() const { return n_x * n_y; }
  double unit_extent_x() const { return extent_x_um / scale_um; }
  double unit_extent_y() const { return extent_y_um / scale_um; }
  double pixel_size_x_um() const { return extent_x_um / n_x; }
  double pixel_size_y_um() const { return extent_y_um / n_y; }

  /// Pixel centers ((ix+0.5)/n_x * ex, (iy+0.5)/n_y * ey) in unit
  /// coordinates, one row per pixel in grid order.
  Mat unit_coords() const {
    Mat c(n_px(), 2);
    const double ex = unit_extent_x(), ey = unit_extent_y();
    for (int iy = 0; iy < n_y; ++iy)
      for (int ix = 0; ix < n_x; ++ix) {
        const int p = iy * n_x + ix;
        c(p, 0) = (ix + 0.5) / n_x * ex;
        c(p, 1) = (iy + 0.5) / n_y * ey;
      }
    return c;
  }

  friend bool operator==(const GridSpec&, const GridSpec&) = default;
};

/// Binned counts of one image: n_px x q count matrix plus an observed/missing
/// mask. Masked pixels are excluded from all likelihood computations.
struct CountGrid {
  std::string image_id;
  GridSpec grid;
  IMat counts;                     // n_px x q
  std::vector<std::uint8_t> mask;  // 1 = observed
  Mat unit_coords;                 // n_px x 2

  int n_px() const { return grid.n_px(); }
  int q() const { return static_cast<int>(counts.cols()); }
};

/// Shift-free rescaling of a dataset to a common unit: divides every
/// coordinate and extent by l* = max over images of max(l_x, l_y), so each
/// domain becomes [0, l_x/l*] x [0, l_y/l*] inside the unit square. Applying
/// it twice is a no-op because the second l* is exactly 1.
inline std::pair<std::vector<PointPattern>, double> rescale_dataset(
    std::vector<PointPattern> patterns) {
  if (patterns.empty()) throw validation_error("rescale_dataset: empty dataset");
  double l_star = 0.0;
  for (const auto& p : patterns) {
    if (!(p.extent_x > 0.0) || !(p.extent_y > 0.0))
      throw validation_error("rescale_dataset: zero extent in image " + p.image_id);
    l_star = std::max({l_star, p.extent_x, p.extent_y});
  }
  for (auto& p : patterns) {
    for (auto& v : p.x) v /= l_star;
    for (auto& v : p.y) v /= l_star;
    p.extent_x /= l_star;
    p.extent_y /= l_star;
  }
  return {std::move(patterns), l_star};
}

/// Grid dimensions for an image from a target pixel size; the actual pixel
/// size extent/n is as close to the target as the extent allows.
inline GridSpec grid_for_extent(double extent_x_um, double extent_y_um, double scale_um,
                                double pixel_target_um) {
  if (!(extent_x_um > 0.0) || !(extent_y_um > 0.0))
    throw validation_error("grid_for_extent: extents must be positive");
  if (!(pixel_target_um > 0.0))
    throw validation_error("grid_for_extent: pixel size must be positive");
  GridSpec g;
  g.scale_um = scale_um;
  g.extent_x_um = extent_x_um;
  g.extent_y_um = extent_y_um;
  g.n_x = std::max(1, static_cast<int>(std::lround(extent_x_um / pixel_target_um)));
  g.n_y = std::max(1, static_cast<int>(std::lround(extent_y_um / pixel_target_um)));
  return g;
}

/// Pixel index of a unit-coordinate point. Cells are half-open, so a point
/// on a shared edge belongs to the pixel with the larger index; the top and
/// right domain boundaries close the last row/column of pixels.
inline int pixel_of(const GridSpec& g, double ux, double uy) {
  const double ex = g.unit_extent_x(), ey = g.unit_extent_y();
  int ix = static_cast<int>(std::floor(ux / ex * g.n_x));
  int iy = static_cast<int>(std::floor(uy / ey * g.n_y));
  ix = std::clamp(ix, 0, g.n_x - 1);
  iy = std::clamp(iy, 0, g.n_y - 1);
  return iy * g.n_x + ix;
}

/// Count the points of a rescaled pattern into the pixels of `grid`.
inline CountGrid bin_pattern(const PointPattern& pattern, const GridSpec& grid, int q) {
  if (q <= 0) throw validation_error("bin_pattern: q must be positive");
  if (grid.n_x < 1 || grid.n_y < 1) throw validation_error("bin_pattern: empty grid");
  const double ex = grid.unit_extent_x(), ey = grid.unit_extent_y();
  if (std::abs(pattern.extent_x - ex) > 1e-9 || std::abs(pattern.extent_y - ey) > 1e-9)
    throw validation_error("bin_pattern: grid inconsistent with extent of image " +
                           pattern.image_id);
  CountGrid out;
  out.image_id = pattern.image_id;
  out.grid = grid;
  out.counts = IMat::Zero(grid.n_px(), q);
  out.mask.assign(grid.n_px(), 1);
  out.unit_coords = grid.unit_coords();
  for (std::size_t m = 0; m < pattern.size(); ++m) {
    const double px = pattern.x[m], py = pattern.y[m];
    if (px < 0.0 || py < 0.0 || px > ex || py > ey)
      throw validation_error("bin_pattern: point " + std::to_string(m) + " of image " +
                             pattern.image_id + " lies outside the domain");
    if (pattern.type[m] < 0 || pattern.type[m] >= q)
      throw validation_error("bin_pattern: point " + std::to_string(m) + " of image " +
                             pattern.image_id + " has an unknown cell type");
    out.counts(pixel_of(grid, px, py), pattern.type[m]) += 1;
  }
  return out;
}

/// Mark the listed pixels missing. Masked pixels contribute nothing to the
/// likelihood downstream; the latent field is still defined there.
inline CountGrid apply_mask(CountGrid grid, const std::vector<int>& missing_pixels) {
  for (int p : missing_pixels) {
    if (p < 0 || p >= grid.n_px())
      throw validation_error("apply_mask: pixel index " + std::to_string(p) + " out of range");
    grid.mask[p] = 0;
  }
  return grid;
}

}  // namespace meshcox
