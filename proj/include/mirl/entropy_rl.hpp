#pragma once

#include <stdexcept>
#include <vector>

#include "mirl/model.hpp"

namespace mirl {

// Sigma_p^{-1} - 2 beta G_aa lost positive definiteness: beta is too large
// for the prior/curvature combination.
struct PrecisionError : std::runtime_error {
  explicit PrecisionError(const std::string& what, int step = -1)
      : std::runtime_error(what), step_index(step) {}
  int step_index;  // backward-pass step where the failure occurred, or -1
};

struct ConvergenceError : std::runtime_error {
  ConvergenceError(const std::string& what, double res, int iters)
      : std::runtime_error(what), residual(res), iterations(iters) {}
  double residual;
  int iterations;
};

// Linear-Gaussian policy  pi(a | y) = N(a | A0 + A1 y, Sigma_p).
struct GaussianPolicy {
  Vec A0;      // Na
  Mat A1;      // Na x Ny
  Mat Sigma_p; // Na x Na, SPD

  Eigen::Index action_dim() const { return A0.size(); }
  Vec mean(const Vec& y) const { return A0 + A1 * y; }
  double log_density(const Vec& a, const Vec& y) const;

  // Hyper-scalar construction: A0 = a0 1, A1 = a1 1, Sigma_p with constant
  // variance sigma_p^2 and correlation rho_p.
  static GaussianPolicy from_scalars(Eigen::Index n_action, Eigen::Index n_state,
                                     double a0_hat, double a1_hat, double rho_p,
                                     double sigma_p);
};

// Locally-quadratic action-value around a linearization point:
//   G(y, a) = da^T G_aa da + dy^T G_yy dy + da^T G_ay dy + da^T G_a + dy^T G_y + g0.
struct QuadraticG {
  Mat G_aa, G_yy, G_ay;
  Vec G_a, G_y;
  double g0 = 0.0;

  double value(const Vec& da, const Vec& dy) const {
    return da.dot(G_aa * da) + dy.dot(G_yy * dy) + da.dot(G_ay * dy) + da.dot(G_a) +
           dy.dot(G_y) + g0;
  }
  static QuadraticG zero(Eigen::Index na, Eigen::Index ny);
};

// Locally-quadratic state value:  F(y) = dy^T F_yy dy + dy^T F_y + F0.
struct QuadraticF {
  Mat F_yy;
  Vec F_y;
  double F0 = 0.0;

  double value(const Vec& dy) const { return dy.dot(F_yy * dy) + dy.dot(F_y) + F0; }
  static QuadraticF zero(Eigen::Index ny);
};

// Conditioning values (a_bar, y_bar, y_bar_next) around which dynamics,
// rewards and value functions are expanded.
struct LinearizationPoint {
  Vec a_bar;       // 2N
  Vec y_bar;       // N + Nz
  Vec y_bar_next;  // N + Nz

  Vec u_bar(Eigen::Index n_assets) const {
    return a_bar.head(n_assets) - a_bar.tail(n_assets);
  }
  Vec x_bar(Eigen::Index n_assets) const { return y_bar.head(n_assets); }
  Vec z_bar(Eigen::Index n_assets) const { return y_bar.tail(y_bar.size() - n_assets); }
};

// First-order dynamics around the point:
//   dy' = Psi_0 + Psi_y dy + Psi_a da + noise,
// noise covariance Sigma_y evaluated at the point (the recursion restores the
// full quadratic dependence of the x-noise on x + u).
struct LinearizedDynamics {
  Vec Psi_0;
  Mat Psi_y, Psi_a;
  Mat Sigma_y;
  Vec Omega_0;
  Mat Omega_x, Omega_u, Omega_z;
};

// Quantities shared between the value recursion and the free-energy blocks.
struct AuxQuantities {
  Vec b;                 // a_bar - A0 - A1 y_bar
  Mat Sigma_p_tilde;     // Sigma_p^{-1} - 2 beta G_aa
  Mat Sigma_p_tilde_inv; // posterior covariance
  Mat Gamma_beta;        // (1/beta)(P - P T P) = -2 sym(P T G_aa)
  Mat Upsilon_beta;      // T P
  Mat E_ay;
  Mat D_ay;
  Vec E_a;
  double L_beta = 0.0;
};

// Coefficients of E_t[F_{t+1}(y')] as a quadratic in (dy, da).
struct ExpectedF {
  Mat H_aa, H_yy, H_ay;
  Vec H_a, H_y;
  double f_hat = 0.0;

  double value(const Vec& da, const Vec& dy) const {
    return da.dot(H_aa * da) + dy.dot(H_yy * dy) + da.dot(H_ay * dy) + da.dot(H_a) +
           dy.dot(H_y) + f_hat;
  }
};

// Reward re-centered at the linearization point; second-order blocks are
// unchanged, first-order and scalar terms absorb the shift.
struct ShiftedReward {
  Mat R_aa, R_yy, R_ay;
  Vec R_a, R_y;
  double r0 = 0.0;

  double value(const Vec& da, const Vec& dy) const {
    return da.dot(R_aa * da) + dy.dot(R_yy * dy) + da.dot(R_ay * dy) + da.dot(R_a) +
           dy.dot(R_y) + r0;
  }
};

LinearizedDynamics linearize_dynamics(const ModelParams& params,
                                      const LinearizationPoint& point);

ShiftedReward shift_reward(const RewardCoeffs& coeffs, const LinearizationPoint& point);

// Terminal value for the finite-horizon pass; delta_a_T is the deviation of
// the fixed terminal action from the conditioning value a_bar_T.
QuadraticF terminal_f(const ShiftedReward& shifted, const Vec& delta_a_T);

ExpectedF expected_next_f(const QuadraticF& f_next, const LinearizedDynamics& lin,
                          const LinearizationPoint& point, Eigen::Index n_assets,
                          const Mat& Sigma_r, const Mat& Sigma_z);

// G = R_hat + gamma * H, coefficient-wise; G_aa and G_yy are symmetrized.
QuadraticG g_update(const ShiftedReward& shifted, const ExpectedF& h, double gamma_disc);

AuxQuantities aux_quantities(const QuadraticG& g, const GaussianPolicy& prior, double beta,
                             const LinearizationPoint& point);

// Closes the Gaussian integral F = (1/beta) log Int pi_0 e^{beta G} da.
std::pair<QuadraticF, AuxQuantities> f_from_g(const QuadraticG& g,
                                              const GaussianPolicy& prior, double beta,
                                              const LinearizationPoint& point);

// Bayesian posterior policy  pi ~ pi_0 e^{beta G}; beta = 0 returns the prior
// unchanged.
GaussianPolicy policy_update(const QuadraticG& g, const GaussianPolicy& prior, double beta,
                             const LinearizationPoint& point);

struct BackwardResult {
  std::vector<QuadraticG> g;            // t = 0..T
  std::vector<QuadraticF> f;            // t = 0..T
  std::vector<GaussianPolicy> policy;   // t = 0..T (policy[T] = prior)
};

// Finite-horizon backward pass. points[t].y_bar_next is taken from
// points[t+1].y_bar; delta_a_T is the terminal-action deviation at points[T].
BackwardResult backward_pass(const ModelParams& params, const GaussianPolicy& prior,
                             std::vector<LinearizationPoint> points, const Vec& delta_a_T);

struct StationaryOptions {
  double tol = 1e-10;
  int max_iter = 2000;
  double damping = 1.0;  // relaxation factor in (0, 1]
};

struct StationaryResult {
  QuadraticG g;
  QuadraticF f;
  GaussianPolicy policy;
  int iterations = 0;
  double residual = 0.0;
};

// Fixed point of the stationary value equations at one linearization point;
// requires gamma_disc < 1.
StationaryResult stationary_solve(const ModelParams& params, const GaussianPolicy& prior,
                                  const LinearizationPoint& point,
                                  const StationaryOptions& opts = {});

// Indifference cost of the imaginary adversary, (1/beta) log[pi_0 / pi];
// with pi the Bayesian update of pi_0 under G, G + C* is constant in a.
double adversarial_cost(const GaussianPolicy& policy, const GaussianPolicy& prior,
                        double beta, const Vec& a, const Vec& y);

}  // namespace mirl
