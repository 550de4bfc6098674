#include "mirl/model.hpp"

#include <cmath>
#include <string>

namespace mirl {

namespace {

void require(bool cond, const std::string& what) {
  if (!cond) throw DimensionError(what);
}

bool symmetric_psd(const Mat& m, double tol = 1e-10) {
  if (m.rows() != m.cols()) return false;
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > tol * (1.0 + m.cwiseAbs().maxCoeff()))
    return false;
  Eigen::SelfAdjointEigenSolver<Mat> es(m);
  return es.eigenvalues().minCoeff() > -tol * (1.0 + m.cwiseAbs().maxCoeff());
}

}  // namespace

void ModelParams::validate() const {
  const Eigen::Index n = n_assets();
  const Eigen::Index k = n_signals();
  require(n > 0, "ModelParams: no assets");
  require(W.rows() == n && W.cols() == k, "ModelParams: W shape");
  require(Sigma_r.rows() == n && Sigma_r.cols() == n, "ModelParams: Sigma_r shape");
  require(Sigma_z.rows() == k && Sigma_z.cols() == k, "ModelParams: Sigma_z shape");
  require(Gamma_plus.rows() == n && Gamma_plus.cols() == n, "ModelParams: Gamma_plus shape");
  require(Gamma_minus.rows() == n && Gamma_minus.cols() == n, "ModelParams: Gamma_minus shape");
  require(Upsilon.rows() == n && Upsilon.cols() == k, "ModelParams: Upsilon shape");
  require(nu_plus.size() == n && nu_minus.size() == n, "ModelParams: fee vector shape");
  if (mu.minCoeff() < 0.0) throw std::invalid_argument("ModelParams: mu must be >= 0");
  if (lambda < 0.0) throw std::invalid_argument("ModelParams: lambda must be >= 0");
  if (beta < 0.0) throw std::invalid_argument("ModelParams: beta must be >= 0");
  if (gamma_disc <= 0.0 || gamma_disc > 1.0)
    throw std::invalid_argument("ModelParams: gamma_disc must be in (0, 1]");
  if (k > 0 && (phi.minCoeff() < 0.0 || phi.maxCoeff() > 1.0))
    throw std::invalid_argument("ModelParams: Phi entries must be in [0, 1]");
  if (!symmetric_psd(Sigma_r)) throw std::invalid_argument("ModelParams: Sigma_r not symmetric PSD");
  if (k > 0 && !symmetric_psd(Sigma_z))
    throw std::invalid_argument("ModelParams: Sigma_z not symmetric PSD");
}

ModelParams ModelParams::scalar_costs(Eigen::Index n_assets, Eigen::Index n_signals,
                                      double gamma_scalar, double upsilon_scalar,
                                      double nu_scalar) {
  ModelParams p;
  p.W = Mat::Zero(n_assets, n_signals);
  p.mu = Vec::Zero(n_assets);
  p.Sigma_r = Mat::Identity(n_assets, n_assets);
  p.phi = Vec::Zero(n_signals);
  p.Sigma_z = Mat::Identity(n_signals, n_signals);
  p.Gamma_plus = gamma_scalar * Mat::Identity(n_assets, n_assets);
  p.Gamma_minus = gamma_scalar * Mat::Identity(n_assets, n_assets);
  // scalar Upsilon: value on the leading diagonal of the N x Nz block
  p.Upsilon = Mat::Zero(n_assets, n_signals);
  for (Eigen::Index i = 0; i < std::min(n_assets, n_signals); ++i)
    p.Upsilon(i, i) = upsilon_scalar;
  p.nu_plus = nu_scalar * Vec::Ones(n_assets);
  p.nu_minus = nu_scalar * Vec::Ones(n_assets);
  return p;
}

Mat action_net_map(Eigen::Index n_assets) {
  Mat d(n_assets, 2 * n_assets);
  d << Mat::Identity(n_assets, n_assets), -Mat::Identity(n_assets, n_assets);
  return d;
}

Mat state_x_map(Eigen::Index n_assets, Eigen::Index n_signals) {
  Mat e(n_assets, n_assets + n_signals);
  e << Mat::Identity(n_assets, n_assets), Mat::Zero(n_assets, n_signals);
  return e;
}

Vec excess_returns(const ModelParams& params, const Vec& z, const Vec& u, const Vec& eps) {
  if (z.size() != params.n_signals() || u.size() != params.n_assets() ||
      eps.size() != params.n_assets())
    throw DimensionError("excess_returns: inconsistent dimensions");
  return params.W * z - params.mu.cwiseProduct(u) + eps;
}

Vec step_wealth(const Vec& x, const Vec& u, const Vec& r) {
  return (1.0 + r.array()).matrix().cwiseProduct(x + u);
}

Vec step_signals(const ModelParams& params, const Vec& z, const Vec& eps_z) {
  if (z.size() != params.n_signals() || eps_z.size() != params.n_signals())
    throw DimensionError("step_signals: inconsistent dimensions");
  return (1.0 - params.phi.array()).matrix().cwiseProduct(z) + eps_z;
}

RewardCoeffs reward_coefficients(const ModelParams& params) {
  const Eigen::Index n = params.n_assets();
  const Eigen::Index k = params.n_signals();
  const Mat M = params.impact_matrix();
  const Mat MS = M + params.lambda * params.Sigma_r;
  const Mat MS2 = M + 2.0 * params.lambda * params.Sigma_r;

  RewardCoeffs c;
  c.R_aa = Mat::Zero(2 * n, 2 * n);
  c.R_aa.topLeftCorner(n, n) = -MS;
  c.R_aa.bottomRightCorner(n, n) = -MS;
  c.R_aa.topRightCorner(n, n) = MS;
  c.R_aa.bottomLeftCorner(n, n) = MS;

  c.R_yy = Mat::Zero(n + k, n + k);
  c.R_yy.topLeftCorner(n, n) = -params.lambda * params.Sigma_r;
  c.R_yy.topRightCorner(n, k) = params.W - params.Upsilon;

  // x-column blocks carry Gamma^T so that a^T R_ay y reproduces the
  // component assembly -x^T Gamma u exactly for non-symmetric Gamma.
  c.R_ay = Mat::Zero(2 * n, n + k);
  c.R_ay.topLeftCorner(n, n) = -MS2 - params.Gamma_plus.transpose();
  c.R_ay.bottomLeftCorner(n, n) = MS2 - params.Gamma_minus.transpose();
  c.R_ay.topRightCorner(n, k) = params.W;
  c.R_ay.bottomRightCorner(n, k) = -params.W;

  c.R_a = Vec(2 * n);
  c.R_a << -params.nu_plus, -params.nu_minus;
  return c;
}

double expected_reward(const RewardCoeffs& coeffs, const Vec& y, const Vec& a) {
  if (y.size() != coeffs.R_yy.rows() || a.size() != coeffs.R_aa.rows())
    throw DimensionError("expected_reward: inconsistent dimensions");
  return y.dot(coeffs.R_yy * y) + a.dot(coeffs.R_aa * a) + a.dot(coeffs.R_ay * y) +
         a.dot(coeffs.R_a);
}

double expected_reward(const RewardCoeffs& coeffs, const ExtendedState& y, const Action& a) {
  return expected_reward(coeffs, y.y(), a.stacked());
}

Action terminal_action(const Vec& x_prev, const Vec& x_target) {
  if (x_prev.size() != x_target.size())
    throw DimensionError("terminal_action: inconsistent dimensions");
  return Action::from_net(x_target - x_prev);
}

double portfolio_excess_change(const Vec& x, const Vec& u, const Vec& r, double r_f) {
  if (x.size() != u.size() || x.size() != r.size())
    throw DimensionError("portfolio_excess_change: inconsistent dimensions");
  return (r.array() - r_f).matrix().dot(x + u);
}

}  // namespace mirl
