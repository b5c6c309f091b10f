#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "meshcox/common.hpp"

namespace meshcox {

/// q x k factor loadings with a lower-trapezoidal zero pattern: entry (r, j)
/// is structurally zero whenever j > r. The pattern identifies the factor
/// decomposition up to column signs and is kept intact by construction.
struct FactorLoadings {
  Mat A;

  FactorLoadings() = default;
  explicit FactorLoadings(Mat a) : A(std::move(a)) {
    if (A.cols() > A.rows())
      throw validation_error("FactorLoadings: need q >= k >= 1");
    enforce_pattern();
  }

  int q() const { return static_cast<int>(A.rows()); }
  int k() const { return static_cast<int>(A.cols()); }

  /// Number of non-structural entries in a row.
  int free_in_row(int row) const { return std::min(row + 1, k()); }

  void enforce_pattern() {
    for (int r = 0; r < A.rows(); ++r)
      for (int j = r + 1; j < A.cols(); ++j) A(r, j) = 0.0;
  }
};

/// Exponential decay rates of the latent factors, with the uniform prior
/// support they are confined to.
struct DecayParams {
  Vec phi;
  double lower = 0.1;
  double upper = 10.0;

  int k() const { return static_cast<int>(phi.size()); }
};

/// exp(-phi * h) correlation at separation h >= 0.
inline double exp_corr(double h, double phi) {
  if (h < 0.0) throw validation_error("exp_corr: negative distance");
  return std::exp(-phi * h);
}

/// Cross-covariance matrix of the factor model at separation h:
/// C_rs(h) = sum_j A(r,j) A(s,j) exp(-phi_j h). At h
/// = 0 this is A A^T.
inline Mat cross_cov(const FactorLoadings& loadings, const DecayParams& decay, double h) {
  const Mat& A = loadings.A;
  Mat C = Mat::Zero(A.rows(), A.rows());
  for (int j = 0; j < A.cols(); ++j) {
    const double rho = exp_corr(h, decay.phi(j));
    C.noalias() += rho * (A.col(j) * A.col(j).transpose());
  }
  return C;
}

namespace detail {
inline double loading_row_sq(const Mat& A, int r) {
  double c = 0.0;
  for (int j = 0; j < A.cols(); ++j) c += A(r, j) * A(r, j);
  return c;
}
}  // namespace detail

/// Marginal (r == s) or cross (r != s) correlation curve over a distance
/// grid: rho_rs(h) = C_rs(h) / sqrt(C_rr(0) C_ss(0)).
inline std::vector<double> cross_corr(const FactorLoadings& loadings, const DecayParams& decay,
                                      int r, int s, const std::vector<double>& h_grid) {
  const Mat& A = loadings.A;
  if (r < 0 || r >= A.rows() || s < 0 || s >= A.rows())
    throw validation_error("cross_corr: type index out of range");
  const double crr = detail::loading_row_sq(A, r);
  const double css = detail::loading_row_sq(A, s);
  if (crr <= 0.0 || css <= 0.0)
    throw degenerate_loadings_error("cross_corr: loadings row " +
                                    std::to_string(crr <= 0.0 ? r : s) + " is zero");
  const double denom = std::sqrt(crr) * std::sqrt(css);
  std::vector<double> out(h_grid.size());
  for (std::size_t m = 0; m < h_grid.size(); ++m) {
    if (r == s && h_grid[m] == 0.0) {
      out[m] = 1.0;
      continue;
    }
    double c = 0.0;
    for (int j = 0; j < A.cols(); ++j)
      c += A(r, j) * A(s, j) * exp_corr(h_grid[m], decay.phi(j));
    out[m] = c / denom;
  }
  return out;
}

/// Flip each column so its first nonzero loading is positive. Correlation
/// targets are invariant to column signs; this picks a representative for
/// reporting only and is never applied during sampling.
inline void align_loading_signs(Mat& A) {
  for (int j = 0; j < A.cols(); ++j) {
    for (int r = 0; r < A.rows(); ++r) {
      if (A(r, j) != 0.0) {
        if (A(r, j) < 0.0) A.col(j) = -A.col(j);
        break;
      }
    }
  }
}

}  // namespace meshcox
