#pragma once

#include <optional>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

namespace mirl {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Structural parameters of the generative market model.
//
// Returns:   r_t - r_f 1 = W z_t - M^T u_t + eps,   eps ~ N(0, Sigma_r)
// Signals:   z_{t+1} = (I - Phi) o z_t + eps_z,     eps_z ~ N(0, Sigma_z)
//
// The permanent-impact matrix M is restricted to a diagonal, stored as the
// vector `mu`; the closed-form recursions assume this.
struct ModelParams {
  double r_f = 0.0;
  Mat W;            // N x Nz factor loadings
  Vec mu;           // N, diagonal of M, >= 0
  Mat Sigma_r;      // N x N residual covariance, PSD
  Vec phi;          // Nz, signal mean-reversion rates in [0, 1]
  Mat Sigma_z;      // Nz x Nz signal-noise covariance, PSD
  double lambda = 0.0;   // risk aversion, >= 0
  Mat Gamma_plus;   // N x N instantaneous impact (buy leg)
  Mat Gamma_minus;  // N x N instantaneous impact (sell leg)
  Mat Upsilon;      // N x Nz cross impact
  Vec nu_plus;      // N, fees >= 0
  Vec nu_minus;     // N, fees >= 0
  double gamma_disc = 1.0;  // discount in (0, 1]
  double beta = 1.0;        // inverse temperature, >= 0

  Eigen::Index n_assets() const { return mu.size(); }
  Eigen::Index n_signals() const { return phi.size(); }
  Eigen::Index n_state() const { return n_assets() + n_signals(); }
  Eigen::Index n_action() const { return 2 * n_assets(); }

  Mat impact_matrix() const { return mu.asDiagonal(); }

  // Throws on violated invariants (shapes, sign and range constraints).
  void validate() const;

  // Scalar-times-identity parameterization of the fee/impact inputs.
  static ModelParams scalar_costs(Eigen::Index n_assets, Eigen::Index n_signals,
                                  double gamma_scalar, double upsilon_scalar,
                                  double nu_scalar);
};

// Extended state y = [x; z] at period t.
struct ExtendedState {
  Vec x;  // N dollar positions (market caps in market mode)
  Vec z;  // Nz predictors
  int t = 0;

  Vec y() const {
    Vec out(x.size() + z.size());
    out << x, z;
    return out;
  }
  static ExtendedState from_y(const Vec& y, Eigen::Index n_assets, int t = 0) {
    return ExtendedState{y.head(n_assets), y.tail(y.size() - n_assets), t};
  }
};

// Trade split into non-negative buy/sell legs, u = u_plus - u_minus.
struct Action {
  Vec u_plus;
  Vec u_minus;

  Vec net() const { return u_plus - u_minus; }
  Vec gross() const { return u_plus + u_minus; }
  Vec stacked() const {
    Vec a(2 * u_plus.size());
    a << u_plus, u_minus;
    return a;
  }
  static Action from_net(const Vec& u) {
    return Action{u.cwiseMax(0.0), (-u).cwiseMax(0.0)};
  }
  static Action from_stacked(const Vec& a) {
    Eigen::Index n = a.size() / 2;
    return Action{a.head(n), a.tail(n)};
  }
};

// Coefficients of the quadratic expected one-step reward
//   R(y, a) = y^T R_yy y + a^T R_aa a + a^T R_ay y + a^T R_a.
struct RewardCoeffs {
  Mat R_yy;  // (N+Nz) x (N+Nz), lower block rows zero
  Mat R_aa;  // 2N x 2N
  Mat R_ay;  // 2N x (N+Nz)
  Vec R_a;   // 2N
};

struct Trajectory {
  std::vector<ExtendedState> states;
  std::vector<Action> actions;  // empty for market-portfolio data

  Eigen::Index horizon() const { return static_cast<Eigen::Index>(states.size()) - 1; }
  bool has_actions() const { return !actions.empty(); }
};

// Selector [I, -I] mapping a = [u+; u-] to the net trade u.
Mat action_net_map(Eigen::Index n_assets);
// Selector [I, 0] extracting x from y = [x; z].
Mat state_x_map(Eigen::Index n_assets, Eigen::Index n_signals);

// One-period excess returns W z - M^T u + eps.
Vec excess_returns(const ModelParams& params, const Vec& z, const Vec& u, const Vec& eps);

// x' = (1 + r) o (x + u); r is the full (not excess) return vector.
Vec step_wealth(const Vec& x, const Vec& u, const Vec& r);

// z' = (I - Phi) o z + eps_z.
Vec step_signals(const ModelParams& params, const Vec& z, const Vec& eps_z);

RewardCoeffs reward_coefficients(const ModelParams& params);

double expected_reward(const RewardCoeffs& coeffs, const ExtendedState& y, const Action& a);
double expected_reward(const RewardCoeffs& coeffs, const Vec& y, const Vec& a);

// Terminal trade that moves x_prev onto the target positions, sign-split.
Action terminal_action(const Vec& x_prev, const Vec& x_target);

// (r - r_f 1)^T (x + u): change of portfolio value in excess of risk-free growth.
double portfolio_excess_change(const Vec& x, const Vec& u, const Vec& r, double r_f);

}  // namespace mirl
