#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mirl/entropy_rl.hpp"
#include "mirl/model.hpp"

namespace mirl {

// Recognition-model parameters of the four Gaussian variational marginals:
//   q_abar(abar | y_t)            = N(mu_a + Lambda_a y_t, Sigma_a)
//   q_phi(ybar' | y')             = N(mu_phi + Lambda_phi y', Sigma_phi)
//   q_varphi(ybar | y_t, ybar')   = N(mu_varphi + L1 y_t + L2 ybar', Sigma_varphi)
//   q_a(a | abar)                 = N(abar, Sigma_delta)
struct VariationalParams {
  Vec mu_a;
  Mat Lambda_a;
  Mat Sigma_a;
  Vec mu_phi;
  Mat Lambda_phi;
  Mat Sigma_phi;
  Vec mu_varphi;
  Mat Lambda_varphi_1;
  Mat Lambda_varphi_2;
  Mat Sigma_varphi;
  Mat Sigma_delta;

  Eigen::Index action_dim() const { return mu_a.size(); }
  Eigen::Index state_dim() const { return mu_phi.size(); }

  Vec action_mean(const Vec& y_t) const { return mu_a + Lambda_a * y_t; }
  Vec forward_mean(const Vec& y) const { return mu_phi + Lambda_phi * y; }

  // Identity slopes, zero intercepts, isotropic covariances; the usual start.
  static VariationalParams centered(Eigen::Index n_action, Eigen::Index n_state,
                                    double sigma_a, double sigma_y, double sigma_delta);

  // Sigma_delta should stay small next to Sigma_a for the saddle-point use.
  double jitter_trace_ratio() const {
    return Sigma_delta.trace() / Sigma_a.trace();
  }
};

struct Transition {
  Vec y_t;
  Vec y_next;
  std::optional<Vec> action;  // stacked [u+; u-], observed-action mode only
};
using TransitionBatch = std::vector<Transition>;

struct GaussianMoments {
  Vec mean;
  Mat cov;
};

// Taylor coefficients of the transition residual in the action deviation.
struct ExpansionCoeffs {
  Vec d0;  // N
  Mat d1;  // N x 2N
  Mat d2;  // N x 2N, contracts with the elementwise variance of delta a
};

Mat marginal_action_cov(const VariationalParams& omega);

// Marginal of ybar_t given the observed pair (mu_h, Sigma_h).
GaussianMoments marginal_ybar(const VariationalParams& omega, const Vec& y_t,
                              const Vec& y_next);

// Inverse covariance of the joint (ybar_t, ybar_{t+1}) encoder distribution.
Mat joint_ybar_precision(const VariationalParams& omega);

ExpansionCoeffs expansion_coeffs(const ModelParams& theta, const Vec& a_bar, const Vec& x_t,
                                 const Vec& x_next, const Vec& z_t);

// Entropy of the hidden-variable distribution (closed form).
double entropy_block(const VariationalParams& omega);

// G/F-independent part of the per-transition free energy, with complete
// Gaussian normalization constants.
double energy0(const VariationalParams& omega, const ModelParams& theta,
               const GaussianPolicy& prior, const Vec& y_t, const Vec& y_next);

struct Energy1Blocks {
  double e_yy = 0.0;
  double e_y = 0.0;
  double e_0 = 0.0;
  double total() const { return e_yy + e_y + e_0; }
};

// beta-weighted expectation blocks that carry the G- and F-function content.
Energy1Blocks energy1(const VariationalParams& omega, const QuadraticG& g,
                      const AuxQuantities& aux, const GaussianPolicy& prior, double beta,
                      const Vec& y_t, const Vec& y_next);

struct TransitionEval {
  double value = 0.0;
  QuadraticG g;
  QuadraticF f_new;
  AuxQuantities aux;
  LinearizationPoint point;
};

// One stationary value-update at the transition's saddle point plus the three
// free-energy blocks.
TransitionEval evaluate_transition(const VariationalParams& omega, const ModelParams& theta,
                                   const GaussianPolicy& prior, const QuadraticF& f_warm,
                                   const Vec& y_t, const Vec& y_next);

double variational_free_energy(const VariationalParams& omega, const ModelParams& theta,
                               const GaussianPolicy& prior, const QuadraticF& f_warm,
                               const Transition& transition);

double batch_free_energy(const VariationalParams& omega, const ModelParams& theta,
                         const GaussianPolicy& prior, const QuadraticF& f_warm,
                         const TransitionBatch& batch);

// Which generative-model coordinates the M-step moves. Constrained
// coordinates (mu, lambda, beta) are optimized through softplus pre-images.
struct ThetaMap {
  bool fit_W = true;
  bool fit_mu = true;
  bool fit_lambda = true;
  bool fit_beta = true;
  Mat W_mask;  // empty: all entries free

  Eigen::Index size(const ModelParams& base) const;
  Vec pack(const ModelParams& params) const;
  ModelParams unpack(const Vec& v, const ModelParams& base) const;
};

struct OmegaMap {
  bool fit_sigma_delta = false;

  Eigen::Index size(const VariationalParams& base) const;
  Vec pack(const VariationalParams& omega) const;
  VariationalParams unpack(const Vec& v, const VariationalParams& base) const;
};

struct EmConfig {
  int max_iter = 100;
  int batch_size = 0;  // 0 = full data
  double alpha_omega = 0.25;
  double alpha_theta = 0.25;
  double rel_tol = 1e-7;
  int tol_window = 5;
  std::uint64_t seed = 0;
  double fd_step = 1e-6;
  int max_backtrack = 30;
  double max_jitter_ratio = 0.01;  // bound on tr(Sigma_delta)/tr(Sigma_a)
  double f_damping = 0.5;
  ThetaMap theta_map;
  OmegaMap omega_map;
  bool investor_mode = false;
  std::ostream* diag_stream = nullptr;  // one line per iteration when set
};

struct EmState {
  ModelParams theta;
  VariationalParams omega;
  GaussianPolicy prior;   // pi_0, fixed for the run
  GaussianPolicy policy;  // latest Bayesian update
  QuadraticG g;
  QuadraticF f;
  std::vector<double> history;  // batch free energy per iteration
};

struct StepInfo {
  double grad_norm = 0.0;
  double step_size = 0.0;
  double value_before = 0.0;
  double value_after = 0.0;
};

// Central finite differences of the batch free energy in the packed
// coordinates; the configured differentiation mode.
Vec omega_gradient(const EmState& state, const TransitionBatch& batch,
                   const EmConfig& config);
Vec theta_gradient(const EmState& state, const TransitionBatch& batch,
                   const EmConfig& config);

// Line-searched ascent step on omega; never decreases the batch free energy.
StepInfo e_step(EmState& state, const TransitionBatch& batch, const EmConfig& config);

// Ascent step on theta, then policy and warm-start value refresh.
StepInfo m_step(EmState& state, const TransitionBatch& batch, const EmConfig& config);

struct EmRunResult {
  EmState state;
  bool converged = false;
  int iterations = 0;
  std::string stop_reason;
};

EmState make_initial_state(const ModelParams& theta0, const VariationalParams& omega0,
                           const GaussianPolicy& prior);

// Variational EM loop over one-step market transitions.
EmRunResult ih_if_run(const TransitionBatch& data, const EmConfig& config,
                      const EmState& init);

double complete_data_loglik(const Trajectory& trajectory, const ModelParams& theta,
                            const GaussianPolicy& policy);

// Finite-horizon variant over T-step windows; with observed actions the inner
// action integral collapses and the objective is the complete-data likelihood
// under the backward-pass policies.
EmRunResult single_investor_run(const std::vector<Trajectory>& windows,
                                const EmConfig& config, const EmState& init);

// Flat key-value text serialization of EmState (versioned header).
void save_checkpoint(std::ostream& out, const EmState& state);
EmState load_checkpoint(std::istream& in);

}  // namespace mirl
