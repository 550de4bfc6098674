#pragma once

#include <string>
#include <vector>

#include "mirl/model.hpp"
#include "mirl/rng.hpp"

namespace mirl {

// Econometric parameters of the multivariate quadratic mean-reversion model
//   dx = kappa o x o (theta(z) - x) dt + x o sqrt(Sigma_x dt) o xi.
//
// (mu, phi, r_f) are structural inputs: they define theta(z) and the
// kappa*dt = mu o phi o (1 + phi) identity but are not identified from
// returns data alone.
struct GmrParams {
  Vec kappa;    // N, per dt
  Mat w;        // N x (K*N) block-sparse loadings
  Vec sigma_x2; // N, diagonal of Sigma_x: per-step variance of the residual v_t
  Vec phi;      // N, policy slope (structural)
  Vec mu;       // N, impact (structural)
  double r_f = 0.0;
  double dt = 1.0;

  Eigen::Index n_assets() const { return kappa.size(); }
};

struct MarketPath {
  Mat x;  // (steps+1) x N
  Mat z;  // (steps+1) x (K*N)
  double dt = 1.0;
  bool went_nonpositive = false;  // diagnostics; paths are never clamped
};

struct CalibConfig {
  double reg_lambda = 1e-2;       // weight on (sum_k w_k - 1)^2 per asset
  bool log_form = false;          // arithmetic residual by default
  double tol = 1e-12;
  int max_iter = 200;
  int nu = 2;                     // Ito (2) / Stratonovich (1) selector
  double phi_structural = 0.0;    // held fixed during calibration
  double r_f = 0.0;
  double dt = 1.0;
};

struct AssetCalibration {
  double kappa = 0.0;
  Vec w;
  double sigma2 = 0.0;
  bool converged = false;
  int iterations = 0;
  double nll = 0.0;
};

struct CalibResult {
  std::vector<AssetCalibration> assets;
  bool all_converged = true;
};

// theta(z) = [phi + (1 + phi)(r_f + w z)] / [mu o phi o (1 + phi)].
Vec theta_level(const GmrParams& params, const Vec& z);

// kappa*dt*theta(z) evaluated without dividing by mu*phi*(1+phi); exact in the
// mu, phi -> 0 limit where it reduces to r_f + w z.
Vec kappa_dt_theta(const GmrParams& params, const Vec& z);

// Multivariate simulation driven by an exogenous signal path (rows >= steps).
MarketPath simulate_gmr(const GmrParams& params, const Vec& x0, const Mat& z_path,
                        std::uint64_t seed, Eigen::Index steps);

enum class GmrScheme { Direct, Reciprocal, Log };

// 1-dim Euler path of dx = kappa x (theta - x) dt + sigma x dW under the
// chosen coordinate scheme.
Vec simulate_gmr_1d(double kappa, double theta, double sigma, double x0, double dt,
                    Eigen::Index steps, std::uint64_t seed, GmrScheme scheme);

double neg_log_likelihood(const GmrParams& params, const MarketPath& path,
                          const CalibConfig& config);

// Analytic gradient of the negative log-likelihood in the per-asset
// coordinates (kappa_i, w_i., sigma_i^2), stacked asset by asset.
Vec neg_log_likelihood_gradient(const GmrParams& params, const MarketPath& path,
                                const CalibConfig& config, const Mat& loading_mask);

// Per-asset maximum likelihood: minimize NLL + reg_lambda (sum w - 1)^2 with
// w >= 0. Diagonal Sigma_x decouples the assets.
CalibResult calibrate(const MarketPath& path, const Mat& loading_mask,
                      const CalibConfig& config);

GmrParams from_structural(const Vec& mu, const Vec& phi, double r_f, const Mat& W,
                          const Mat& Sigma_r, double dt);

}  // namespace mirl
