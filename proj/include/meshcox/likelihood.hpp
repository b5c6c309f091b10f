#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "meshcox/common.hpp"
#include "meshcox/kernel.hpp"
#include "meshcox/preprocess.hpp"

namespace meshcox {

/// All non-latent unknowns of the model.
struct ModelParams {
  FactorLoadings A;
  Mat B;      // p x q covariate coefficients, shared across subjects
  Mat alpha;  // N x q per-subject, per-type offsets
  DecayParams decay;
};

/// Per-subject latent factor fields, one n_px x k matrix each.
struct LatentFields {
  std::vector<Mat> v;
};

/// Log-intensity assembly W = 1 alpha^T + X B + V A^T.
inline Mat log_intensity(const Vec& alpha_i, const Mat& B, const Mat& X_i, const Mat& V_i,
                         const Mat& A) {
  Mat W = V_i * A.transpose();
  if (B.rows() > 0) W.noalias() += X_i * B;
  W.rowwise() += alpha_i.transpose();
  return W;
}

struct LoglikResult {
  double value = 0.0;
  bool clamped = false;
};

/// Poisson log-likelihood over observed cells:
/// sum [y W - e^W - log y!]. W is capped at `clamp` inside e^W; the flag
/// reports whether the cap was hit on an observed cell.
inline LoglikResult poisson_loglik(const Mat& y, const std::vector<std::uint8_t>& mask,
                                   const Mat& W, const Mat& lgamma_y, double clamp = 30.0) {
  LoglikResult res;
  for (int p = 0; p < W.rows(); ++p) {
    if (!mask.empty() && !mask[p]) continue;
    for (int j = 0; j < W.cols(); ++j) {
      double w = W(p, j);
      if (w > clamp) {
        res.clamped = true;
        w = clamp;
      }
      res.value += y(p, j) * w - std::exp(w) - lgamma_y(p, j);
    }
  }
  return res;
}

inline LoglikResult poisson_loglik(const CountGrid& grid, const Mat& W, double clamp = 30.0) {
  Mat y = grid.counts.cast<double>();
  Mat lg = (y.array() + 1.0).unaryExpr([](double v) { return std::lgamma(v); }).matrix();
  return poisson_loglik(y, grid.mask, W, lg, clamp);
}

/// Score with respect to W: y - e^W on observed cells, 0 on masked ones.
inline Mat loglik_grad_W(const Mat& y, const std::vector<std::uint8_t>& mask, const Mat& W,
                         double clamp = 30.0) {
  Mat g = Mat::Zero(W.rows(), W.cols());
  for (int p = 0; p < W.rows(); ++p) {
    if (!mask.empty() && !mask[p]) continue;
    for (int j = 0; j < W.cols(); ++j)
      g(p, j) = y(p, j) - std::exp(std::min(W(p, j), clamp));
  }
  return g;
}

// Chain rule through W = 1 alpha^T + X B + V A^T, with G = dloglik/dW.

/// d/dV_i = G_i A (n x k).
inline Mat grad_latent(const Mat& G_i, const Mat& A) { return G_i * A; }

/// d/dA_{j.} = sum_i V_i^T G_i.col(j) (free entries only are meaningful).
inline Vec grad_loading_row(const std::vector<Mat>& G, const std::vector<Mat>& V, int j) {
  Vec out = Vec::Zero(V.front().cols());
  for (std::size_t i = 0; i < G.size(); ++i) out.noalias() += V[i].transpose() * G[i].col(j);
  return out;
}

/// d/dB_{.j} = sum_i X_i^T G_i.col(j).
inline Vec grad_coef_col(const std::vector<Mat>& G, const std::vector<Mat>& X, int j) {
  Vec out = Vec::Zero(X.front().cols());
  for (std::size_t i = 0; i < G.size(); ++i) out.noalias() += X[i].transpose() * G[i].col(j);
  return out;
}

/// d/dalpha_i = column sums of G_i.
inline Vec grad_intercepts(const Mat& G_i) { return G_i.colwise().sum().transpose(); }

}  // namespace meshcox
