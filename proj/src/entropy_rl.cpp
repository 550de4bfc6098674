#include "mirl/entropy_rl.hpp"

#include <cmath>

namespace mirl {

namespace {

Mat sym(const Mat& m) { return 0.5 * (m + m.transpose()); }

Mat spd_inverse(const Mat& m, const char* what, int step = -1) {
  Eigen::LLT<Mat> llt(m);
  if (llt.info() != Eigen::Success) throw PrecisionError(what, step);
  return llt.solve(Mat::Identity(m.rows(), m.cols()));
}

double spd_log_det(const Mat& m, const char* what) {
  Eigen::LLT<Mat> llt(m);
  if (llt.info() != Eigen::Success) throw PrecisionError(what);
  return 2.0 * Mat(llt.matrixL()).diagonal().array().log().sum();
}

// log det(I + A) for small-ish A via LU; pivots stay near one, so this is
// stable where forming log|Sigma_p| + log|Sigma_p_tilde| cancels.
double log_det_lu(const Mat& m) {
  Eigen::PartialPivLU<Mat> lu(m);
  Vec diag = lu.matrixLU().diagonal();
  double s = 0.0;
  for (Eigen::Index i = 0; i < diag.size(); ++i) s += std::log(std::abs(diag[i]));
  return s;
}

}  // namespace

double GaussianPolicy::log_density(const Vec& a, const Vec& y) const {
  Eigen::LLT<Mat> llt(Sigma_p);
  if (llt.info() != Eigen::Success)
    throw PrecisionError("GaussianPolicy: Sigma_p not positive definite");
  Vec r = a - mean(y);
  double quad = r.dot(llt.solve(r));
  double logdet = 2.0 * Mat(llt.matrixL()).diagonal().array().log().sum();
  return -0.5 * quad - 0.5 * logdet - 0.5 * a.size() * std::log(2.0 * M_PI);
}

GaussianPolicy GaussianPolicy::from_scalars(Eigen::Index n_action, Eigen::Index n_state,
                                            double a0_hat, double a1_hat, double rho_p,
                                            double sigma_p) {
  GaussianPolicy p;
  p.A0 = a0_hat * Vec::Ones(n_action);
  p.A1 = a1_hat * Mat::Ones(n_action, n_state);
  p.Sigma_p = sigma_p * sigma_p *
              ((1.0 - rho_p) * Mat::Identity(n_action, n_action) +
               rho_p * Mat::Ones(n_action, n_action));
  return p;
}

QuadraticG QuadraticG::zero(Eigen::Index na, Eigen::Index ny) {
  return QuadraticG{Mat::Zero(na, na), Mat::Zero(ny, ny), Mat::Zero(na, ny),
                    Vec::Zero(na),     Vec::Zero(ny),     0.0};
}

QuadraticF QuadraticF::zero(Eigen::Index ny) {
  return QuadraticF{Mat::Zero(ny, ny), Vec::Zero(ny), 0.0};
}

LinearizedDynamics linearize_dynamics(const ModelParams& params,
                                      const LinearizationPoint& point) {
  const Eigen::Index n = params.n_assets();
  const Eigen::Index k = params.n_signals();
  if (point.a_bar.size() != 2 * n || point.y_bar.size() != n + k ||
      point.y_bar_next.size() != n + k)
    throw DimensionError("linearize_dynamics: point dimensions");

  const Vec x_bar = point.x_bar(n);
  const Vec z_bar = point.z_bar(n);
  const Vec u_bar = point.u_bar(n);
  const Vec x_next = point.y_bar_next.head(n);
  const Vec z_next = point.y_bar_next.tail(k);
  const Vec p = x_bar + u_bar;
  const Vec s = params.W * z_bar - params.mu.cwiseProduct(u_bar);

  LinearizedDynamics lin;
  lin.Omega_x = (1.0 + params.r_f + s.array()).matrix().asDiagonal();
  lin.Omega_u = lin.Omega_x - Mat((p.cwiseProduct(params.mu)).asDiagonal());
  lin.Omega_z = p.asDiagonal() * params.W;
  lin.Omega_0 = (1.0 + params.r_f + s.array()).matrix().cwiseProduct(p) - x_next;

  lin.Psi_0 = Vec(n + k);
  lin.Psi_0 << lin.Omega_0, (1.0 - params.phi.array()).matrix().cwiseProduct(z_bar) - z_next;

  lin.Psi_y = Mat::Zero(n + k, n + k);
  lin.Psi_y.topLeftCorner(n, n) = lin.Omega_x;
  lin.Psi_y.topRightCorner(n, k) = lin.Omega_z;
  lin.Psi_y.bottomRightCorner(k, k) = (1.0 - params.phi.array()).matrix().asDiagonal();

  lin.Psi_a = Mat::Zero(n + k, 2 * n);
  lin.Psi_a.topRows(n) = lin.Omega_u * action_net_map(n);

  lin.Sigma_y = Mat::Zero(n + k, n + k);
  lin.Sigma_y.topLeftCorner(n, n) = params.Sigma_r.cwiseProduct(p * p.transpose());
  lin.Sigma_y.bottomRightCorner(k, k) = params.Sigma_z;
  return lin;
}

ShiftedReward shift_reward(const RewardCoeffs& coeffs, const LinearizationPoint& point) {
  const Vec& a = point.a_bar;
  const Vec& y = point.y_bar;
  ShiftedReward s;
  s.R_aa = coeffs.R_aa;
  s.R_yy = coeffs.R_yy;
  s.R_ay = coeffs.R_ay;
  // 2 sym(R) b rather than 2 R b: the stored R_yy is not symmetric and only
  // its symmetric part enters the quadratic form.
  s.R_a = coeffs.R_a + (coeffs.R_aa + coeffs.R_aa.transpose()) * a + coeffs.R_ay * y;
  s.R_y = (coeffs.R_yy + coeffs.R_yy.transpose()) * y + coeffs.R_ay.transpose() * a;
  s.r0 = y.dot(coeffs.R_yy * y) + a.dot(coeffs.R_aa * a) + a.dot(coeffs.R_ay * y) +
         a.dot(coeffs.R_a);
  return s;
}

QuadraticF terminal_f(const ShiftedReward& shifted, const Vec& delta_a_T) {
  QuadraticF f;
  f.F_yy = sym(shifted.R_yy);
  f.F_y = shifted.R_y + shifted.R_ay.transpose() * delta_a_T;
  f.F0 = delta_a_T.dot(shifted.R_aa * delta_a_T) + delta_a_T.dot(shifted.R_a) + shifted.r0;
  return f;
}

ExpectedF expected_next_f(const QuadraticF& f_next, const LinearizedDynamics& lin,
                          const LinearizationPoint& point, Eigen::Index n_assets,
                          const Mat& Sigma_r, const Mat& Sigma_z) {
  const Eigen::Index ny = f_next.F_yy.rows();
  const Eigen::Index k = ny - n_assets;
  const Mat D = action_net_map(n_assets);            // N x 2N
  const Mat E = state_x_map(n_assets, k);            // N x Ny
  const Mat F_xx = f_next.F_yy.topLeftCorner(n_assets, n_assets);
  const Mat F_zz = f_next.F_yy.bottomRightCorner(k, k);
  const Mat S = F_xx.cwiseProduct(Sigma_r);          // quadratic-noise kernel
  const Vec p = point.x_bar(n_assets) + point.u_bar(n_assets);

  ExpectedF h;
  h.H_aa = lin.Psi_a.transpose() * f_next.F_yy * lin.Psi_a + D.transpose() * S * D;
  h.H_yy = lin.Psi_y.transpose() * f_next.F_yy * lin.Psi_y + E.transpose() * S * E;
  h.H_ay = 2.0 * lin.Psi_a.transpose() * f_next.F_yy * lin.Psi_y +
           2.0 * D.transpose() * S * E;
  h.H_a = lin.Psi_a.transpose() * f_next.F_y +
          2.0 * lin.Psi_a.transpose() * f_next.F_yy * lin.Psi_0 +
          2.0 * D.transpose() * S * p;
  h.H_y = lin.Psi_y.transpose() * f_next.F_y +
          2.0 * lin.Psi_y.transpose() * f_next.F_yy * lin.Psi_0 +
          2.0 * E.transpose() * S * p;
  h.f_hat = f_next.F0 + lin.Psi_0.dot(f_next.F_y) + lin.Psi_0.dot(f_next.F_yy * lin.Psi_0) +
            p.dot(S * p) + (F_zz.cwiseProduct(Sigma_z)).trace();
  return h;
}

QuadraticG g_update(const ShiftedReward& shifted, const ExpectedF& h, double gamma_disc) {
  QuadraticG g;
  g.G_aa = sym(shifted.R_aa + gamma_disc * h.H_aa);
  g.G_yy = sym(shifted.R_yy + gamma_disc * h.H_yy);
  g.G_ay = shifted.R_ay + gamma_disc * h.H_ay;
  g.G_a = shifted.R_a + gamma_disc * h.H_a;
  g.G_y = shifted.R_y + gamma_disc * h.H_y;
  g.g0 = shifted.r0 + gamma_disc * h.f_hat;
  return g;
}

AuxQuantities aux_quantities(const QuadraticG& g, const GaussianPolicy& prior, double beta,
                             const LinearizationPoint& point) {
  const Eigen::Index na = g.G_aa.rows();
  AuxQuantities aux;
  aux.b = point.a_bar - prior.A0 - prior.A1 * point.y_bar;

  const Mat P = spd_inverse(prior.Sigma_p, "aux_quantities: Sigma_p not positive definite");
  aux.Sigma_p_tilde = sym(P - 2.0 * beta * g.G_aa);
  if (beta == 0.0) {
    aux.Sigma_p_tilde_inv = prior.Sigma_p;
    aux.Upsilon_beta = Mat::Identity(na, na);
    aux.Gamma_beta = -2.0 * sym(g.G_aa);
    aux.L_beta = -(prior.Sigma_p * g.G_aa).trace();
  } else {
    aux.Sigma_p_tilde_inv =
        spd_inverse(aux.Sigma_p_tilde, "f_from_g: Sigma_p_tilde not positive definite");
    aux.Upsilon_beta = aux.Sigma_p_tilde_inv * P;
    // (1/beta)(P - P T P) written in the cancellation-free form -2 P T G_aa.
    aux.Gamma_beta = -2.0 * sym(P * aux.Sigma_p_tilde_inv * g.G_aa);
    aux.L_beta = (0.5 / beta) *
                 log_det_lu(Mat::Identity(na, na) - 2.0 * beta * prior.Sigma_p * g.G_aa);
  }
  aux.E_ay = aux.Upsilon_beta * prior.A1 + 0.5 * beta * aux.Sigma_p_tilde_inv * g.G_ay;
  aux.D_ay = g.G_ay.transpose() * aux.Upsilon_beta - prior.A1.transpose() * aux.Gamma_beta;
  aux.E_a = prior.A1.transpose() * aux.Upsilon_beta.transpose() * g.G_a +
            beta * g.G_ay.transpose() * aux.Sigma_p_tilde_inv * g.G_a;
  return aux;
}

std::pair<QuadraticF, AuxQuantities> f_from_g(const QuadraticG& g,
                                              const GaussianPolicy& prior, double beta,
                                              const LinearizationPoint& point) {
  AuxQuantities aux = aux_quantities(g, prior, beta, point);
  QuadraticF f;
  f.F_yy = sym(g.G_yy) + sym(g.G_ay.transpose() * aux.E_ay) -
           0.5 * sym(prior.A1.transpose() * aux.Gamma_beta * prior.A1);
  f.F_y = g.G_y - aux.D_ay * aux.b + aux.E_a;
  f.F0 = g.g0 - 0.5 * aux.b.dot(aux.Gamma_beta * aux.b) -
         g.G_a.dot(aux.Upsilon_beta * aux.b) +
         0.5 * beta * g.G_a.dot(aux.Sigma_p_tilde_inv * g.G_a) - aux.L_beta;
  return {f, aux};
}

GaussianPolicy policy_update(const QuadraticG& g, const GaussianPolicy& prior, double beta,
                             const LinearizationPoint& point) {
  if (beta == 0.0) return prior;
  const Mat P = spd_inverse(prior.Sigma_p, "policy_update: Sigma_p not positive definite");
  const Mat tilde = sym(P - 2.0 * beta * g.G_aa);
  const Mat Sp_new =
      spd_inverse(tilde, "policy_update: Sigma_p_tilde not positive definite");
  GaussianPolicy out;
  out.Sigma_p = sym(Sp_new);
  out.A1 = Sp_new * (P * prior.A1 + beta * g.G_ay);
  out.A0 = point.a_bar + Sp_new * P * (prior.A0 - point.a_bar) +
           beta * Sp_new * (g.G_a - g.G_ay * point.y_bar);
  return out;
}

BackwardResult backward_pass(const ModelParams& params, const GaussianPolicy& prior,
                             std::vector<LinearizationPoint> points, const Vec& delta_a_T) {
  if (points.empty()) throw std::invalid_argument("backward_pass: no points");
  const int T = static_cast<int>(points.size()) - 1;
  for (int t = 0; t < T; ++t) points[t].y_bar_next = points[t + 1].y_bar;

  const RewardCoeffs coeffs = reward_coefficients(params);
  BackwardResult out;
  out.g.resize(T + 1);
  out.f.resize(T + 1);
  out.policy.resize(T + 1);

  ShiftedReward sh_T = shift_reward(coeffs, points[T]);
  out.f[T] = terminal_f(sh_T, delta_a_T);
  out.g[T] = QuadraticG{sym(sh_T.R_aa), sym(sh_T.R_yy), sh_T.R_ay,
                        sh_T.R_a,       sh_T.R_y,       sh_T.r0};
  out.policy[T] = prior;

  for (int t = T - 1; t >= 0; --t) {
    LinearizedDynamics lin = linearize_dynamics(params, points[t]);
    ExpectedF h = expected_next_f(out.f[t + 1], lin, points[t], params.n_assets(),
                                  params.Sigma_r, params.Sigma_z);
    ShiftedReward sh = shift_reward(coeffs, points[t]);
    out.g[t] = g_update(sh, h, params.gamma_disc);
    try {
      auto [f, aux] = f_from_g(out.g[t], prior, params.beta, points[t]);
      out.f[t] = std::move(f);
      out.policy[t] = policy_update(out.g[t], prior, params.beta, points[t]);
    } catch (const PrecisionError& e) {
      throw PrecisionError(std::string(e.what()) + " (backward pass)", t);
    }
  }
  return out;
}

StationaryResult stationary_solve(const ModelParams& params, const GaussianPolicy& prior,
                                  const LinearizationPoint& point,
                                  const StationaryOptions& opts) {
  if (params.gamma_disc >= 1.0)
    throw std::invalid_argument("stationary_solve: gamma_disc must be < 1");
  if (opts.damping <= 0.0 || opts.damping > 1.0)
    throw std::invalid_argument("stationary_solve: damping must be in (0, 1]");

  // Both sides of the fixed point share one expansion point.
  LinearizationPoint pt = point;
  pt.y_bar_next = pt.y_bar;

  const RewardCoeffs coeffs = reward_coefficients(params);
  const ShiftedReward sh = shift_reward(coeffs, pt);
  const LinearizedDynamics lin = linearize_dynamics(params, pt);

  StationaryResult res;
  res.f = QuadraticF::zero(params.n_state());
  res.g = QuadraticG::zero(params.n_action(), params.n_state());

  const double d = opts.damping;
  for (int it = 1; it <= opts.max_iter; ++it) {
    ExpectedF h = expected_next_f(res.f, lin, pt, params.n_assets(), params.Sigma_r,
                                  params.Sigma_z);
    QuadraticG g_new = g_update(sh, h, params.gamma_disc);
    auto [f_new, aux] = f_from_g(g_new, prior, params.beta, pt);

    double r = 0.0;
    r = std::max(r, (f_new.F_yy - res.f.F_yy).cwiseAbs().maxCoeff());
    r = std::max(r, (f_new.F_y - res.f.F_y).cwiseAbs().maxCoeff());
    r = std::max(r, std::abs(f_new.F0 - res.f.F0));
    r = std::max(r, (g_new.G_aa - res.g.G_aa).cwiseAbs().maxCoeff());
    r = std::max(r, (g_new.G_yy - res.g.G_yy).cwiseAbs().maxCoeff());
    r = std::max(r, (g_new.G_ay - res.g.G_ay).cwiseAbs().maxCoeff());
    r = std::max(r, (g_new.G_a - res.g.G_a).cwiseAbs().maxCoeff());
    r = std::max(r, (g_new.G_y - res.g.G_y).cwiseAbs().maxCoeff());
    r = std::max(r, std::abs(g_new.g0 - res.g.g0));

    res.f.F_yy = (1.0 - d) * res.f.F_yy + d * f_new.F_yy;
    res.f.F_y = (1.0 - d) * res.f.F_y + d * f_new.F_y;
    res.f.F0 = (1.0 - d) * res.f.F0 + d * f_new.F0;
    res.g = std::move(g_new);
    res.iterations = it;
    res.residual = r;
    if (r < opts.tol) {
      res.policy = policy_update(res.g, prior, params.beta, pt);
      return res;
    }
  }
  throw ConvergenceError("stationary_solve: no fixed point within max_iter", res.residual,
                         res.iterations);
}

double adversarial_cost(const GaussianPolicy& policy, const GaussianPolicy& prior,
                        double beta, const Vec& a, const Vec& y) {
  if (beta == 0.0) throw std::invalid_argument("adversarial_cost: beta must be nonzero");
  return (prior.log_density(a, y) - policy.log_density(a, y)) / beta;
}

}  // namespace mirl
