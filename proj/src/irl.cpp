#include "mirl/irl.hpp"

#include "mirl/rng.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

namespace mirl {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;  // log(2*pi)

Mat sym(const Mat& m) { return 0.5 * (m + m.transpose()); }

Mat spd_inverse(const Mat& m, const char* what) {
  Eigen::LLT<Mat> llt(m);
  if (llt.info() != Eigen::Success) throw PrecisionError(what);
  return llt.solve(Mat::Identity(m.rows(), m.cols()));
}

double spd_log_det(const Mat& m, const char* what) {
  Eigen::LLT<Mat> llt(m);
  if (llt.info() != Eigen::Success) throw PrecisionError(what);
  return 2.0 * Mat(llt.matrixL()).diagonal().array().log().sum();
}

double gaussian_log_density(const Vec& resid, const Mat& cov, const char* what) {
  Eigen::LLT<Mat> llt(cov);
  if (llt.info() != Eigen::Success) throw PrecisionError(what);
  double logdet = 2.0 * Mat(llt.matrixL()).diagonal().array().log().sum();
  return -0.5 * resid.dot(llt.solve(resid)) - 0.5 * logdet -
         0.5 * static_cast<double>(resid.size()) * kLog2Pi;
}

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
double softplus_inv(double y) {
  if (y <= 0.0) y = 1e-12;
  return y > 30.0 ? y : std::log(std::expm1(y));
}

// Covariances travel through the optimizer as Cholesky factors with
// log-transformed diagonals, so any packed vector is a valid SPD matrix.
Eigen::Index chol_size(Eigen::Index n) { return n * (n + 1) / 2; }

void pack_cov(const Mat& cov, std::vector<double>& out) {
  Eigen::LLT<Mat> llt(cov);
  if (llt.info() != Eigen::Success)
    throw PrecisionError("pack_cov: covariance not positive definite");
  Mat L = llt.matrixL();
  for (Eigen::Index i = 0; i < L.rows(); ++i)
    for (Eigen::Index j = 0; j <= i; ++j)
      out.push_back(i == j ? std::log(L(i, i)) : L(i, j));
}

Mat unpack_cov(const double*& it, Eigen::Index n) {
  Mat L = Mat::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j <= i; ++j) {
      double v = *it++;
      L(i, j) = (i == j) ? std::exp(v) : v;
    }
  return L * L.transpose();
}

void pack_mat(const Mat& m, std::vector<double>& out) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) out.push_back(m(i, j));
}

Mat unpack_mat(const double*& it, Eigen::Index rows, Eigen::Index cols) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = *it++;
  return m;
}

}  // namespace

VariationalParams VariationalParams::centered(Eigen::Index n_action, Eigen::Index n_state,
                                              double sigma_a, double sigma_y,
                                              double sigma_delta) {
  VariationalParams w;
  w.mu_a = Vec::Zero(n_action);
  w.Lambda_a = Mat::Zero(n_action, n_state);
  w.Sigma_a = sigma_a * sigma_a * Mat::Identity(n_action, n_action);
  w.mu_phi = Vec::Zero(n_state);
  w.Lambda_phi = Mat::Identity(n_state, n_state);
  w.Sigma_phi = sigma_y * sigma_y * Mat::Identity(n_state, n_state);
  w.mu_varphi = Vec::Zero(n_state);
  w.Lambda_varphi_1 = Mat::Identity(n_state, n_state);
  w.Lambda_varphi_2 = Mat::Zero(n_state, n_state);
  w.Sigma_varphi = sigma_y * sigma_y * Mat::Identity(n_state, n_state);
  w.Sigma_delta = sigma_delta * sigma_delta * Mat::Identity(n_action, n_action);
  return w;
}

Mat marginal_action_cov(const VariationalParams& omega) {
  return omega.Sigma_a + omega.Sigma_delta;
}

GaussianMoments marginal_ybar(const VariationalParams& omega, const Vec& y_t,
                              const Vec& y_next) {
  GaussianMoments m;
  m.mean = omega.Lambda_varphi_2 * (omega.mu_phi + omega.Lambda_phi * y_next) +
           omega.Lambda_varphi_1 * y_t + omega.mu_varphi;
  m.cov = omega.Sigma_varphi +
          omega.Lambda_varphi_2 * omega.Sigma_phi * omega.Lambda_varphi_2.transpose();
  return m;
}

Mat joint_ybar_precision(const VariationalParams& omega) {
  const Eigen::Index ny = omega.state_dim();
  const Mat Pvarphi = spd_inverse(omega.Sigma_varphi, "joint_ybar_precision: Sigma_varphi");
  const Mat Pphi = spd_inverse(omega.Sigma_phi, "joint_ybar_precision: Sigma_phi");
  Mat prec(2 * ny, 2 * ny);
  // ordering (ybar_t, ybar_{t+1}); ybar_t | ybar_{t+1} is the backward encoder
  prec.topLeftCorner(ny, ny) = Pvarphi;
  prec.topRightCorner(ny, ny) = -Pvarphi * omega.Lambda_varphi_2;
  prec.bottomLeftCorner(ny, ny) = -omega.Lambda_varphi_2.transpose() * Pvarphi;
  prec.bottomRightCorner(ny, ny) =
      Pphi + omega.Lambda_varphi_2.transpose() * Pvarphi * omega.Lambda_varphi_2;
  return prec;
}

ExpansionCoeffs expansion_coeffs(const ModelParams& theta, const Vec& a_bar, const Vec& x_t,
                                 const Vec& x_next, const Vec& z_t) {
  const Eigen::Index n = theta.n_assets();
  const Mat D = action_net_map(n);
  const Vec u_bar = a_bar.head(n) - a_bar.tail(n);
  const Vec denom = x_t + u_bar;
  for (Eigen::Index i = 0; i < n; ++i)
    if (!(denom[i] > 0.0))
      throw std::domain_error("expansion_coeffs: x_t + u_bar not positive at asset " +
                              std::to_string(i));

  ExpansionCoeffs c;
  const Vec ratio = x_next.cwiseQuotient(denom);
  c.d0 = ratio.array() - 1.0 - theta.r_f - (theta.W * z_t).array() +
         theta.mu.cwiseProduct(u_bar).array();
  c.d1 = -Mat(ratio.cwiseQuotient(denom).asDiagonal()) * D +
         Mat(theta.mu.asDiagonal()) * D;
  Mat ones_pair(n, 2 * n);
  ones_pair << Mat::Identity(n, n), Mat::Identity(n, n);
  c.d2 = Mat(ratio.cwiseQuotient(denom.cwiseProduct(denom)).asDiagonal()) * ones_pair;
  return c;
}

double entropy_block(const VariationalParams& omega) {
  const double ny = static_cast<double>(omega.state_dim());
  const double na = static_cast<double>(omega.action_dim());
  // |Sigma_j| factorizes over the conditional structure of the joint encoder.
  const double logdet_j =
      spd_log_det(omega.Sigma_phi, "entropy_block: Sigma_phi") +
      spd_log_det(omega.Sigma_varphi, "entropy_block: Sigma_varphi");
  const double logdet_a = spd_log_det(omega.Sigma_a, "entropy_block: Sigma_a");
  return 0.5 * (2.0 * ny * (kLog2Pi + 1.0) + logdet_j) +
         0.5 * (na * (kLog2Pi + 1.0) + logdet_a);
}

double energy0(const VariationalParams& omega, const ModelParams& theta,
               const GaussianPolicy& prior, const Vec& y_t, const Vec& y_next) {
  const Eigen::Index n = theta.n_assets();
  const double na = static_cast<double>(prior.action_dim());
  const Vec x_t = y_t.head(n);
  const Vec z_t = y_t.tail(y_t.size() - n);
  const Vec x_next = y_next.head(n);
  const Vec z_next = y_next.tail(y_next.size() - n);

  const Vec a_saddle = omega.action_mean(y_t);
  const ExpansionCoeffs d = expansion_coeffs(theta, a_saddle, x_t, x_next, z_t);

  const Mat P = spd_inverse(prior.Sigma_p, "energy0: Sigma_p");
  const Mat Sr_inv = spd_inverse(theta.Sigma_r, "energy0: Sigma_r");

  // E_{q_abar} of the prior-policy log density (exact, quadratic)
  const Vec m = omega.mu_a - prior.A0 + (omega.Lambda_a - prior.A1) * y_t;
  double value = -0.5 * m.dot(P * m) -
                 0.5 * ((omega.Sigma_a + omega.Sigma_delta) * P).trace() -
                 0.5 * spd_log_det(prior.Sigma_p, "energy0: Sigma_p") - 0.5 * na * kLog2Pi;

  // second-order action average of the x-transition log density
  value += -0.5 * d.d0.dot(Sr_inv * d.d0) -
           0.5 * (omega.Sigma_delta * d.d1.transpose() * Sr_inv * d.d1).trace() -
           d.d0.dot(Sr_inv * d.d2 * omega.Sigma_delta.diagonal()) -
           0.5 * spd_log_det(theta.Sigma_r, "energy0: Sigma_r") -
           0.5 * static_cast<double>(n) * kLog2Pi;

  // exact signal transition density
  const Vec z_resid = z_next - (1.0 - theta.phi.array()).matrix().cwiseProduct(z_t);
  value += gaussian_log_density(z_resid, theta.Sigma_z, "energy0: Sigma_z");
  return value;
}

Energy1Blocks energy1(const VariationalParams& omega, const QuadraticG& g,
                      const AuxQuantities& aux, const GaussianPolicy& prior, double beta,
                      const Vec& y_t, const Vec& y_next) {
  Energy1Blocks out;
  const GaussianMoments h = marginal_ybar(omega, y_t, y_next);
  const Vec dy = y_t - h.mean;
  const Vec mb = omega.action_mean(y_t) - prior.A0 - prior.A1 * h.mean;

  const Mat X = sym(0.5 * prior.A1.transpose() * aux.Gamma_beta * prior.A1 -
                    g.G_ay.transpose() * aux.E_ay);
  out.e_yy = beta * (dy.dot(X * dy) + (X * h.cov).trace());

  out.e_y = beta * (dy.dot(aux.D_ay * mb - aux.E_a) + (aux.D_ay * prior.A1 * h.cov).trace());

  out.e_0 = beta * (0.5 * mb.dot(aux.Gamma_beta * mb) +
                    0.5 * (aux.Gamma_beta *
                           (omega.Sigma_a + prior.A1 * h.cov * prior.A1.transpose()))
                              .trace() +
                    g.G_a.dot(aux.Upsilon_beta * mb) -
                    0.5 * beta * g.G_a.dot(aux.Sigma_p_tilde_inv * g.G_a) + aux.L_beta +
                    (omega.Sigma_delta * g.G_aa).trace());
  return out;
}

TransitionEval evaluate_transition(const VariationalParams& omega, const ModelParams& theta,
                                   const GaussianPolicy& prior, const QuadraticF& f_warm,
                                   const Vec& y_t, const Vec& y_next) {
  TransitionEval ev;
  ev.point.a_bar = omega.action_mean(y_t);
  ev.point.y_bar = marginal_ybar(omega, y_t, y_next).mean;
  ev.point.y_bar_next = omega.forward_mean(y_next);

  const LinearizedDynamics lin = linearize_dynamics(theta, ev.point);
  const ExpectedF h = expected_next_f(f_warm, lin, ev.point, theta.n_assets(),
                                      theta.Sigma_r, theta.Sigma_z);
  const ShiftedReward sh = shift_reward(reward_coefficients(theta), ev.point);
  ev.g = g_update(sh, h, theta.gamma_disc);
  auto [f_new, aux] = f_from_g(ev.g, prior, theta.beta, ev.point);
  ev.f_new = std::move(f_new);
  ev.aux = std::move(aux);

  const double h_block = entropy_block(omega);
  const double e0 = energy0(omega, theta, prior, y_t, y_next);
  const Energy1Blocks e1 = energy1(omega, ev.g, ev.aux, prior, theta.beta, y_t, y_next);
  ev.value = h_block + e0 + e1.total();
  return ev;
}

double variational_free_energy(const VariationalParams& omega, const ModelParams& theta,
                               const GaussianPolicy& prior, const QuadraticF& f_warm,
                               const Transition& transition) {
  return evaluate_transition(omega, theta, prior, f_warm, transition.y_t, transition.y_next)
      .value;
}

double batch_free_energy(const VariationalParams& omega, const ModelParams& theta,
                         const GaussianPolicy& prior, const QuadraticF& f_warm,
                         const TransitionBatch& batch) {
  double total = 0.0;
  for (const auto& tr : batch)
    total += variational_free_energy(omega, theta, prior, f_warm, tr);
  return total;
}

// ---------------------------------------------------------------------------
// parameter packing

Eigen::Index ThetaMap::size(const ModelParams& base) const {
  Eigen::Index n = 0;
  if (fit_W) {
    if (W_mask.size() > 0)
      n += static_cast<Eigen::Index>((W_mask.array() != 0.0).count());
    else
      n += base.W.size();
  }
  if (fit_mu) n += base.mu.size();
  if (fit_lambda) n += 1;
  if (fit_beta) n += 1;
  return n;
}

Vec ThetaMap::pack(const ModelParams& params) const {
  std::vector<double> v;
  if (fit_W) {
    for (Eigen::Index i = 0; i < params.W.rows(); ++i)
      for (Eigen::Index j = 0; j < params.W.cols(); ++j)
        if (W_mask.size() == 0 || W_mask(i, j) != 0.0) v.push_back(params.W(i, j));
  }
  if (fit_mu)
    for (Eigen::Index i = 0; i < params.mu.size(); ++i)
      v.push_back(softplus_inv(params.mu[i]));
  if (fit_lambda) v.push_back(softplus_inv(params.lambda));
  if (fit_beta) v.push_back(softplus_inv(params.beta));
  return Eigen::Map<Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
}

ModelParams ThetaMap::unpack(const Vec& v, const ModelParams& base) const {
  ModelParams p = base;
  const double* it = v.data();
  if (fit_W) {
    for (Eigen::Index i = 0; i < p.W.rows(); ++i)
      for (Eigen::Index j = 0; j < p.W.cols(); ++j)
        if (W_mask.size() == 0 || W_mask(i, j) != 0.0) p.W(i, j) = *it++;
  }
  if (fit_mu)
    for (Eigen::Index i = 0; i < p.mu.size(); ++i) p.mu[i] = softplus(*it++);
  if (fit_lambda) p.lambda = softplus(*it++);
  if (fit_beta) p.beta = softplus(*it++);
  return p;
}

Eigen::Index OmegaMap::size(const VariationalParams& base) const {
  const Eigen::Index na = base.action_dim();
  const Eigen::Index ny = base.state_dim();
  Eigen::Index n = na + na * ny + chol_size(na);       // action marginal
  n += ny + ny * ny + chol_size(ny);                   // forward encoder
  n += ny + 2 * ny * ny + chol_size(ny);               // backward encoder
  if (fit_sigma_delta) n += chol_size(na);
  return n;
}

Vec OmegaMap::pack(const VariationalParams& omega) const {
  std::vector<double> v;
  pack_mat(omega.mu_a, v);
  pack_mat(omega.Lambda_a, v);
  pack_cov(omega.Sigma_a, v);
  pack_mat(omega.mu_phi, v);
  pack_mat(omega.Lambda_phi, v);
  pack_cov(omega.Sigma_phi, v);
  pack_mat(omega.mu_varphi, v);
  pack_mat(omega.Lambda_varphi_1, v);
  pack_mat(omega.Lambda_varphi_2, v);
  pack_cov(omega.Sigma_varphi, v);
  if (fit_sigma_delta) pack_cov(omega.Sigma_delta, v);
  return Eigen::Map<Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
}

VariationalParams OmegaMap::unpack(const Vec& v, const VariationalParams& base) const {
  VariationalParams w = base;
  const Eigen::Index na = base.action_dim();
  const Eigen::Index ny = base.state_dim();
  const double* it = v.data();
  w.mu_a = unpack_mat(it, na, 1);
  w.Lambda_a = unpack_mat(it, na, ny);
  w.Sigma_a = unpack_cov(it, na);
  w.mu_phi = unpack_mat(it, ny, 1);
  w.Lambda_phi = unpack_mat(it, ny, ny);
  w.Sigma_phi = unpack_cov(it, ny);
  w.mu_varphi = unpack_mat(it, ny, 1);
  w.Lambda_varphi_1 = unpack_mat(it, ny, ny);
  w.Lambda_varphi_2 = unpack_mat(it, ny, ny);
  w.Sigma_varphi = unpack_cov(it, ny);
  if (fit_sigma_delta) w.Sigma_delta = unpack_cov(it, na);
  return w;
}

// ---------------------------------------------------------------------------
// ascent machinery

namespace {

Vec central_fd_gradient(const std::function<double(const Vec&)>& f, const Vec& x0,
                        double h_base) {
  Vec grad(x0.size());
  Vec x = x0;
  for (Eigen::Index i = 0; i < x0.size(); ++i) {
    const double h = h_base * (1.0 + std::abs(x0[i]));
    x[i] = x0[i] + h;
    const double fp = f(x);
    x[i] = x0[i] - h;
    const double fm = f(x);
    x[i] = x0[i];
    grad[i] = (fp - fm) / (2.0 * h);
  }
  if (!grad.allFinite()) throw std::runtime_error("finite-difference gradient not finite");
  return grad;
}

// Backtracking ascent from x0 along the normalized gradient direction, so
// alpha is a move length in the packed coordinates regardless of the
// objective's scale. Returns the accepted point (x0 when no step improves).
Vec ascent_step(const std::function<double(const Vec&)>& f, const Vec& x0, const Vec& grad,
                double alpha, int max_backtrack, StepInfo& info) {
  info.grad_norm = grad.norm();
  info.value_before = f(x0);
  info.value_after = info.value_before;
  info.step_size = 0.0;
  if (alpha <= 0.0 || info.grad_norm == 0.0) return x0;

  const Vec dir = grad / info.grad_norm;
  double step = alpha;
  for (int k = 0; k < max_backtrack; ++k) {
    Vec x = x0 + step * dir;
    double v;
    try {
      v = f(x);
    } catch (const std::exception&) {
      step *= 0.5;  // stepped outside the feasible region
      continue;
    }
    if (std::isfinite(v) && v >= info.value_before) {
      info.value_after = v;
      info.step_size = step;
      return x;
    }
    step *= 0.5;
  }
  return x0;
}

}  // namespace

Vec omega_gradient(const EmState& state, const TransitionBatch& batch,
                   const EmConfig& config) {
  const Vec v0 = config.omega_map.pack(state.omega);
  auto f = [&](const Vec& v) {
    return batch_free_energy(config.omega_map.unpack(v, state.omega), state.theta,
                             state.prior, state.f, batch);
  };
  return central_fd_gradient(f, v0, config.fd_step);
}

Vec theta_gradient(const EmState& state, const TransitionBatch& batch,
                   const EmConfig& config) {
  const Vec v0 = config.theta_map.pack(state.theta);
  auto f = [&](const Vec& v) {
    return batch_free_energy(state.omega, config.theta_map.unpack(v, state.theta),
                             state.prior, state.f, batch);
  };
  return central_fd_gradient(f, v0, config.fd_step);
}

StepInfo e_step(EmState& state, const TransitionBatch& batch, const EmConfig& config) {
  StepInfo info;
  const Vec v0 = config.omega_map.pack(state.omega);
  auto f = [&](const Vec& v) {
    return batch_free_energy(config.omega_map.unpack(v, state.omega), state.theta,
                             state.prior, state.f, batch);
  };
  if (config.alpha_omega == 0.0) {
    info.value_before = info.value_after = f(v0);
    return info;
  }
  const Vec grad = central_fd_gradient(f, v0, config.fd_step);
  const Vec v1 = ascent_step(f, v0, grad, config.alpha_omega, config.max_backtrack, info);
  state.omega = config.omega_map.unpack(v1, state.omega);
  return info;
}

StepInfo m_step(EmState& state, const TransitionBatch& batch, const EmConfig& config) {
  StepInfo info;
  const Vec v0 = config.theta_map.pack(state.theta);
  auto f = [&](const Vec& v) {
    return batch_free_energy(state.omega, config.theta_map.unpack(v, state.theta),
                             state.prior, state.f, batch);
  };
  if (config.alpha_theta == 0.0) {
    info.value_before = info.value_after = f(v0);
  } else {
    const Vec grad = central_fd_gradient(f, v0, config.fd_step);
    const Vec v1 = ascent_step(f, v0, grad, config.alpha_theta, config.max_backtrack, info);
    state.theta = config.theta_map.unpack(v1, state.theta);
  }

  // Refresh the policy and value bundles at the accepted theta. Coefficients
  // are batch averages; the warm-start value only moves when it does not
  // lower the batch free energy (damped fixed-point step with an ascent
  // guard).
  QuadraticF f_avg = QuadraticF::zero(state.theta.n_state());
  QuadraticG g_avg = QuadraticG::zero(state.theta.n_action(), state.theta.n_state());
  GaussianPolicy pol_avg;
  pol_avg.A0 = Vec::Zero(state.theta.n_action());
  pol_avg.A1 = Mat::Zero(state.theta.n_action(), state.theta.n_state());
  pol_avg.Sigma_p = Mat::Zero(state.theta.n_action(), state.theta.n_action());
  const double scale = 1.0 / static_cast<double>(batch.size());
  for (const auto& tr : batch) {
    TransitionEval ev =
        evaluate_transition(state.omega, state.theta, state.prior, state.f, tr.y_t, tr.y_next);
    GaussianPolicy pol =
        policy_update(ev.g, state.prior, state.theta.beta, ev.point);
    f_avg.F_yy += scale * ev.f_new.F_yy;
    f_avg.F_y += scale * ev.f_new.F_y;
    f_avg.F0 += scale * ev.f_new.F0;
    g_avg.G_aa += scale * ev.g.G_aa;
    g_avg.G_yy += scale * ev.g.G_yy;
    g_avg.G_ay += scale * ev.g.G_ay;
    g_avg.G_a += scale * ev.g.G_a;
    g_avg.G_y += scale * ev.g.G_y;
    g_avg.g0 += scale * ev.g.g0;
    pol_avg.A0 += scale * pol.A0;
    pol_avg.A1 += scale * pol.A1;
    pol_avg.Sigma_p += scale * pol.Sigma_p;
  }
  state.g = g_avg;
  state.policy = pol_avg;

  double damping = config.f_damping;
  for (int k = 0; k < 8 && damping > 1e-6; ++k, damping *= 0.5) {
    QuadraticF cand;
    cand.F_yy = (1.0 - damping) * state.f.F_yy + damping * f_avg.F_yy;
    cand.F_y = (1.0 - damping) * state.f.F_y + damping * f_avg.F_y;
    cand.F0 = (1.0 - damping) * state.f.F0 + damping * f_avg.F0;
    double v;
    try {
      v = batch_free_energy(state.omega, state.theta, state.prior, cand, batch);
    } catch (const std::exception&) {
      continue;
    }
    if (std::isfinite(v) && v >= info.value_after - 1e-12 * (1.0 + std::abs(info.value_after))) {
      state.f = cand;
      info.value_after = v;
      break;
    }
  }
  return info;
}

EmState make_initial_state(const ModelParams& theta0, const VariationalParams& omega0,
                           const GaussianPolicy& prior) {
  EmState s;
  s.theta = theta0;
  s.omega = omega0;
  s.prior = prior;
  s.policy = prior;
  s.g = QuadraticG::zero(theta0.n_action(), theta0.n_state());
  s.f = QuadraticF::zero(theta0.n_state());
  return s;
}

namespace {

// Seeded without-replacement mini-batch sampler; full-data batches keep the
// original order (and thus give deterministic full-batch EM).
class BatchSampler {
 public:
  BatchSampler(std::size_t data_size, int batch_size, std::uint64_t seed)
      : n_(data_size),
        batch_(batch_size <= 0 || static_cast<std::size_t>(batch_size) >= data_size
                   ? data_size
                   : static_cast<std::size_t>(batch_size)),
        rng_(seed, 0x6d62 /* stream tag */) {
    deck_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) deck_[i] = i;
    pos_ = n_;  // force a shuffle on first partial draw
  }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> idx(batch_);
    if (batch_ == n_) {
      for (std::size_t i = 0; i < n_; ++i) idx[i] = i;
      return idx;
    }
    for (std::size_t i = 0; i < batch_; ++i) {
      if (pos_ >= n_) {
        shuffle();
        pos_ = 0;
      }
      idx[i] = deck_[pos_++];
    }
    return idx;
  }

 private:
  void shuffle() {
    for (std::size_t i = n_ - 1; i > 0; --i) {
      std::size_t j = static_cast<std::size_t>(rng_.next_u64() % (i + 1));
      std::swap(deck_[i], deck_[j]);
    }
  }
  std::size_t n_, batch_, pos_;
  std::vector<std::size_t> deck_;
  Rng rng_;
};

void emit_diag(const EmConfig& config, int iter, double value, const StepInfo& e,
               const StepInfo& m) {
  if (!config.diag_stream) return;
  (*config.diag_stream) << iter << ',' << std::setprecision(17) << value << ','
                        << e.grad_norm << ',' << m.grad_norm << ',' << e.step_size << ','
                        << m.step_size << '\n';
}

}  // namespace

EmRunResult ih_if_run(const TransitionBatch& data, const EmConfig& config,
                      const EmState& init) {
  if (data.empty()) throw std::invalid_argument("ih_if_run: empty data");
  if (init.omega.jitter_trace_ratio() > config.max_jitter_ratio * (1.0 + 1e-9))
    throw std::invalid_argument(
        "ih_if_run: Sigma_delta too large relative to Sigma_a for the saddle point");
  EmRunResult result;
  result.state = init;
  if (config.max_iter == 0) {
    result.stop_reason = "max_iter = 0";
    return result;
  }

  BatchSampler sampler(data.size(), config.batch_size, config.seed);
  int flat_count = 0;
  for (int k = 1; k <= config.max_iter; ++k) {
    const auto idx = sampler.next();
    TransitionBatch batch;
    batch.reserve(idx.size());
    for (auto i : idx) batch.push_back(data[i]);

    StepInfo e, m;
    try {
      e = e_step(result.state, batch, config);
      m = m_step(result.state, batch, config);
    } catch (const std::exception& ex) {
      result.stop_reason = std::string("failure at iteration ") + std::to_string(k) + ": " +
                           ex.what();
      result.iterations = k;
      return result;
    }
    const double value = batch_free_energy(result.state.omega, result.state.theta,
                                           result.state.prior, result.state.f, batch);
    result.state.history.push_back(value);
    result.iterations = k;
    emit_diag(config, k, value, e, m);

    if (result.state.history.size() >= 2) {
      const double prev = result.state.history[result.state.history.size() - 2];
      const double rel = std::abs(value - prev) / (1.0 + std::abs(prev));
      flat_count = rel < config.rel_tol ? flat_count + 1 : 0;
      if (flat_count >= config.tol_window) {
        result.converged = true;
        result.stop_reason = "relative change below tolerance";
        return result;
      }
    }
  }
  result.stop_reason = "max_iter reached";
  return result;
}

double complete_data_loglik(const Trajectory& trajectory, const ModelParams& theta,
                            const GaussianPolicy& policy) {
  if (!trajectory.has_actions())
    throw std::invalid_argument("complete_data_loglik: actions required");
  const Eigen::Index n = theta.n_assets();
  double ll = 0.0;  // log p(y_0) treated as a theta-independent constant
  for (std::size_t t = 0; t + 1 < trajectory.states.size(); ++t) {
    const ExtendedState& s = trajectory.states[t];
    const ExtendedState& sn = trajectory.states[t + 1];
    const Action& a = trajectory.actions[t];
    const Vec u = a.net();

    ll += policy.log_density(a.stacked(), s.y());

    const Vec denom = s.x + u;
    for (Eigen::Index i = 0; i < n; ++i)
      if (!(denom[i] > 0.0))
        throw std::domain_error("complete_data_loglik: x + u not positive");
    const Vec resid_x = sn.x.cwiseQuotient(denom).array() - 1.0 - theta.r_f -
                        (theta.W * s.z).array() + theta.mu.cwiseProduct(u).array();
    ll += gaussian_log_density(resid_x, theta.Sigma_r, "complete_data_loglik: Sigma_r");

    const Vec resid_z = sn.z - (1.0 - theta.phi.array()).matrix().cwiseProduct(s.z);
    ll += gaussian_log_density(resid_z, theta.Sigma_z, "complete_data_loglik: Sigma_z");
  }
  return ll;
}

namespace {

// Backward-pass policies for one observed-action window, then the
// complete-data log likelihood under them.
double window_loglik_observed(const Trajectory& w, const ModelParams& theta,
                              const GaussianPolicy& prior) {
  const int T = static_cast<int>(w.states.size()) - 1;
  std::vector<LinearizationPoint> points(T + 1);
  for (int t = 0; t <= T; ++t) {
    points[t].y_bar = w.states[t].y();
    points[t].a_bar = t < T ? w.actions[t].stacked()
                            : terminal_action(w.states[T - 1].x, w.states[T].x).stacked();
    points[t].y_bar_next = points[t].y_bar;  // overwritten by backward_pass chaining
  }
  BackwardResult bp =
      backward_pass(theta, prior, points, Vec::Zero(theta.n_action()));

  double ll = 0.0;
  const Eigen::Index n = theta.n_assets();
  for (int t = 0; t < T; ++t) {
    const ExtendedState& s = w.states[t];
    const ExtendedState& sn = w.states[t + 1];
    const Vec u = w.actions[t].net();
    ll += bp.policy[t].log_density(w.actions[t].stacked(), s.y());
    const Vec resid_x = sn.x.cwiseQuotient(s.x + u).array() - 1.0 - theta.r_f -
                        (theta.W * s.z).array() + theta.mu.cwiseProduct(u).array();
    ll += gaussian_log_density(resid_x, theta.Sigma_r, "single_investor: Sigma_r");
    const Vec resid_z = sn.z - (1.0 - theta.phi.array()).matrix().cwiseProduct(s.z);
    ll += gaussian_log_density(resid_z, theta.Sigma_z, "single_investor: Sigma_z");
  }
  return ll;
}

// Hidden-action window objective: backward recursion at variational saddle
// points, then per-step free-energy blocks.
double window_free_energy_hidden(const Trajectory& w, const VariationalParams& omega,
                                 const ModelParams& theta, const GaussianPolicy& prior) {
  const int T = static_cast<int>(w.states.size()) - 1;
  std::vector<LinearizationPoint> points(T + 1);
  std::vector<Vec> y(T + 1);
  for (int t = 0; t <= T; ++t) y[t] = w.states[t].y();
  for (int t = 0; t <= T; ++t) {
    points[t].a_bar = omega.action_mean(y[t]);
    points[t].y_bar = t < T ? marginal_ybar(omega, y[t], y[t + 1]).mean : y[t];
    points[t].y_bar_next = points[t].y_bar;
  }
  const Vec a_term = terminal_action(w.states[T - 1].x, w.states[T].x).stacked();
  BackwardResult bp = backward_pass(theta, prior, points, a_term - points[T].a_bar);

  double total = 0.0;
  for (int t = 0; t < T; ++t) {
    const AuxQuantities aux = aux_quantities(bp.g[t], prior, theta.beta, points[t]);
    total += entropy_block(omega);
    total += energy0(omega, theta, prior, y[t], y[t + 1]);
    total += energy1(omega, bp.g[t], aux, prior, theta.beta, y[t], y[t + 1]).total();
  }
  return total;
}

}  // namespace

EmRunResult single_investor_run(const std::vector<Trajectory>& windows,
                                const EmConfig& config, const EmState& init) {
  if (windows.empty()) throw std::invalid_argument("single_investor_run: no windows");
  for (const auto& w : windows)
    if (w.states.size() < 2)
      throw std::invalid_argument("single_investor_run: window too short");
  if (init.omega.jitter_trace_ratio() > config.max_jitter_ratio * (1.0 + 1e-9))
    throw std::invalid_argument(
        "single_investor_run: Sigma_delta too large relative to Sigma_a for the saddle "
        "point");
  const bool observed = windows.front().has_actions();

  EmRunResult result;
  result.state = init;
  if (config.max_iter == 0) {
    result.stop_reason = "max_iter = 0";
    return result;
  }

  auto objective = [&](const VariationalParams& omega, const ModelParams& theta) {
    double total = 0.0;
    for (const auto& w : windows)
      total += observed ? window_loglik_observed(w, theta, init.prior)
                        : window_free_energy_hidden(w, omega, theta, init.prior);
    return total;
  };

  int flat_count = 0;
  for (int k = 1; k <= config.max_iter; ++k) {
    StepInfo e, m;
    try {
      if (!observed && config.alpha_omega > 0.0) {
        const Vec v0 = config.omega_map.pack(result.state.omega);
        auto fo = [&](const Vec& v) {
          return objective(config.omega_map.unpack(v, result.state.omega),
                           result.state.theta);
        };
        const Vec grad = central_fd_gradient(fo, v0, config.fd_step);
        const Vec v1 = ascent_step(fo, v0, grad, config.alpha_omega, config.max_backtrack, e);
        result.state.omega = config.omega_map.unpack(v1, result.state.omega);
      }
      if (config.alpha_theta > 0.0) {
        const Vec t0 = config.theta_map.pack(result.state.theta);
        auto ft = [&](const Vec& v) {
          return objective(result.state.omega,
                           config.theta_map.unpack(v, result.state.theta));
        };
        const Vec grad = central_fd_gradient(ft, t0, config.fd_step);
        const Vec t1 = ascent_step(ft, t0, grad, config.alpha_theta, config.max_backtrack, m);
        result.state.theta = config.theta_map.unpack(t1, result.state.theta);
      }
    } catch (const std::exception& ex) {
      result.stop_reason = std::string("failure at iteration ") + std::to_string(k) + ": " +
                           ex.what();
      result.iterations = k;
      return result;
    }

    // policy refresh from the first window's initial step
    const Trajectory& w0 = windows.front();
    std::vector<LinearizationPoint> points(w0.states.size());
    for (std::size_t t = 0; t < w0.states.size(); ++t) {
      const Vec yt = w0.states[t].y();
      points[t].a_bar = observed && t + 1 < w0.states.size()
                            ? w0.actions[t].stacked()
                            : result.state.omega.action_mean(yt);
      points[t].y_bar = yt;
      points[t].y_bar_next = yt;
    }
    const int T = static_cast<int>(w0.states.size()) - 1;
    const Vec a_term = terminal_action(w0.states[T - 1].x, w0.states[T].x).stacked();
    try {
      BackwardResult bp = backward_pass(result.state.theta, init.prior, points,
                                        a_term - points[T].a_bar);
      result.state.g = bp.g[0];
      result.state.f = bp.f[0];
      result.state.policy = bp.policy[0];
    } catch (const std::exception&) {
      // keep previous bundles; objective value still recorded
    }

    const double value = objective(result.state.omega, result.state.theta);
    result.state.history.push_back(value);
    result.iterations = k;
    emit_diag(config, k, value, e, m);

    if (result.state.history.size() >= 2) {
      const double prev = result.state.history[result.state.history.size() - 2];
      const double rel = std::abs(value - prev) / (1.0 + std::abs(prev));
      flat_count = rel < config.rel_tol ? flat_count + 1 : 0;
      if (flat_count >= config.tol_window) {
        result.converged = true;
        result.stop_reason = "relative change below tolerance";
        return result;
      }
    }
  }
  result.stop_reason = "max_iter reached";
  return result;
}

// ---------------------------------------------------------------------------
// checkpoint serialization

namespace {

void write_scalar(std::ostream& out, const std::string& key, double v) {
  out << key << " = " << std::setprecision(17) << v << '\n';
}

void write_matrix(std::ostream& out, const std::string& key, const Mat& m) {
  out << key << ".rows = " << m.rows() << '\n';
  out << key << ".cols = " << m.cols() << '\n';
  out << key << ".data =";
  out << std::setprecision(17);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) out << ' ' << m(i, j);
  out << '\n';
}

void write_vector(std::ostream& out, const std::string& key, const Vec& v) {
  write_matrix(out, key, Mat(v));
}

struct KvFile {
  std::map<std::string, std::string> entries;

  double scalar(const std::string& key) const {
    return std::stod(entries.at(key));
  }
  Mat matrix(const std::string& key) const {
    const Eigen::Index rows = static_cast<Eigen::Index>(scalar(key + ".rows"));
    const Eigen::Index cols = static_cast<Eigen::Index>(scalar(key + ".cols"));
    std::istringstream ss(entries.at(key + ".data"));
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j)
        if (!(ss >> m(i, j)))
          throw std::runtime_error("checkpoint: truncated matrix " + key);
    return m;
  }
  Vec vector(const std::string& key) const { return matrix(key).col(0); }
};

KvFile parse_kv(std::istream& in) {
  KvFile kv;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error("checkpoint: malformed line: " + line);
    std::string key = line.substr(0, eq);
    std::string val = line.substr(eq + 1);
    auto trim = [](std::string& s) {
      s.erase(0, s.find_first_not_of(" \t"));
      auto last = s.find_last_not_of(" \t");
      s.erase(last == std::string::npos ? 0 : last + 1);
    };
    trim(key);
    trim(val);
    kv.entries[key] = val;
  }
  return kv;
}

}  // namespace

void save_checkpoint(std::ostream& out, const EmState& state) {
  out << "format = mirl_checkpoint_v1\n";
  const ModelParams& t = state.theta;
  write_scalar(out, "theta.r_f", t.r_f);
  write_matrix(out, "theta.W", t.W);
  write_vector(out, "theta.mu", t.mu);
  write_matrix(out, "theta.Sigma_r", t.Sigma_r);
  write_vector(out, "theta.phi", t.phi);
  write_matrix(out, "theta.Sigma_z", t.Sigma_z);
  write_scalar(out, "theta.lambda", t.lambda);
  write_matrix(out, "theta.Gamma_plus", t.Gamma_plus);
  write_matrix(out, "theta.Gamma_minus", t.Gamma_minus);
  write_matrix(out, "theta.Upsilon", t.Upsilon);
  write_vector(out, "theta.nu_plus", t.nu_plus);
  write_vector(out, "theta.nu_minus", t.nu_minus);
  write_scalar(out, "theta.gamma_disc", t.gamma_disc);
  write_scalar(out, "theta.beta", t.beta);

  const VariationalParams& w = state.omega;
  write_vector(out, "omega.mu_a", w.mu_a);
  write_matrix(out, "omega.Lambda_a", w.Lambda_a);
  write_matrix(out, "omega.Sigma_a", w.Sigma_a);
  write_vector(out, "omega.mu_phi", w.mu_phi);
  write_matrix(out, "omega.Lambda_phi", w.Lambda_phi);
  write_matrix(out, "omega.Sigma_phi", w.Sigma_phi);
  write_vector(out, "omega.mu_varphi", w.mu_varphi);
  write_matrix(out, "omega.Lambda_varphi_1", w.Lambda_varphi_1);
  write_matrix(out, "omega.Lambda_varphi_2", w.Lambda_varphi_2);
  write_matrix(out, "omega.Sigma_varphi", w.Sigma_varphi);
  write_matrix(out, "omega.Sigma_delta", w.Sigma_delta);

  write_vector(out, "prior.A0", state.prior.A0);
  write_matrix(out, "prior.A1", state.prior.A1);
  write_matrix(out, "prior.Sigma_p", state.prior.Sigma_p);
  write_vector(out, "policy.A0", state.policy.A0);
  write_matrix(out, "policy.A1", state.policy.A1);
  write_matrix(out, "policy.Sigma_p", state.policy.Sigma_p);

  write_matrix(out, "g.G_aa", state.g.G_aa);
  write_matrix(out, "g.G_yy", state.g.G_yy);
  write_matrix(out, "g.G_ay", state.g.G_ay);
  write_vector(out, "g.G_a", state.g.G_a);
  write_vector(out, "g.G_y", state.g.G_y);
  write_scalar(out, "g.g0", state.g.g0);
  write_matrix(out, "f.F_yy", state.f.F_yy);
  write_vector(out, "f.F_y", state.f.F_y);
  write_scalar(out, "f.F0", state.f.F0);

  Vec hist(static_cast<Eigen::Index>(state.history.size()));
  for (Eigen::Index i = 0; i < hist.size(); ++i) hist[i] = state.history[i];
  write_vector(out, "history", hist);
}

EmState load_checkpoint(std::istream& in) {
  KvFile kv = parse_kv(in);
  if (kv.entries.find("format") == kv.entries.end() ||
      kv.entries.at("format") != "mirl_checkpoint_v1")
    throw std::runtime_error("checkpoint: unknown format header");

  EmState s;
  s.theta.r_f = kv.scalar("theta.r_f");
  s.theta.W = kv.matrix("theta.W");
  s.theta.mu = kv.vector("theta.mu");
  s.theta.Sigma_r = kv.matrix("theta.Sigma_r");
  s.theta.phi = kv.vector("theta.phi");
  s.theta.Sigma_z = kv.matrix("theta.Sigma_z");
  s.theta.lambda = kv.scalar("theta.lambda");
  s.theta.Gamma_plus = kv.matrix("theta.Gamma_plus");
  s.theta.Gamma_minus = kv.matrix("theta.Gamma_minus");
  s.theta.Upsilon = kv.matrix("theta.Upsilon");
  s.theta.nu_plus = kv.vector("theta.nu_plus");
  s.theta.nu_minus = kv.vector("theta.nu_minus");
  s.theta.gamma_disc = kv.scalar("theta.gamma_disc");
  s.theta.beta = kv.scalar("theta.beta");

  s.omega.mu_a = kv.vector("omega.mu_a");
  s.omega.Lambda_a = kv.matrix("omega.Lambda_a");
  s.omega.Sigma_a = kv.matrix("omega.Sigma_a");
  s.omega.mu_phi = kv.vector("omega.mu_phi");
  s.omega.Lambda_phi = kv.matrix("omega.Lambda_phi");
  s.omega.Sigma_phi = kv.matrix("omega.Sigma_phi");
  s.omega.mu_varphi = kv.vector("omega.mu_varphi");
  s.omega.Lambda_varphi_1 = kv.matrix("omega.Lambda_varphi_1");
  s.omega.Lambda_varphi_2 = kv.matrix("omega.Lambda_varphi_2");
  s.omega.Sigma_varphi = kv.matrix("omega.Sigma_varphi");
  s.omega.Sigma_delta = kv.matrix("omega.Sigma_delta");

  s.prior.A0 = kv.vector("prior.A0");
  s.prior.A1 = kv.matrix("prior.A1");
  s.prior.Sigma_p = kv.matrix("prior.Sigma_p");
  s.policy.A0 = kv.vector("policy.A0");
  s.policy.A1 = kv.matrix("policy.A1");
  s.policy.Sigma_p = kv.matrix("policy.Sigma_p");

  s.g.G_aa = kv.matrix("g.G_aa");
  s.g.G_yy = kv.matrix("g.G_yy");
  s.g.G_ay = kv.matrix("g.G_ay");
  s.g.G_a = kv.vector("g.G_a");
  s.g.G_y = kv.vector("g.G_y");
  s.g.g0 = kv.scalar("g.g0");
  s.f.F_yy = kv.matrix("f.F_yy");
  s.f.F_y = kv.vector("f.F_y");
  s.f.F0 = kv.scalar("f.F0");

  Vec hist = kv.vector("history");
  s.history.assign(hist.data(), hist.data() + hist.size());
  return s;
}

}  // namespace mirl
