#include "mirl/gmr.hpp"

#include <cmath>

namespace mirl {

namespace {

// Residuals of the one-step transition density, one column per asset.
// Arithmetic form: v = dx/x - [kdt*theta(z) - kappa*dt*x]
// Log form:        v = log(x'/x) - [kdt*theta(z) - sigma^2*dt/2 - kappa*dt*x]
Mat residuals(const GmrParams& params, const MarketPath& path, bool log_form) {
  const Eigen::Index T = path.x.rows() - 1;
  const Eigen::Index N = params.n_assets();
  Mat v(T, N);
  for (Eigen::Index t = 0; t < T; ++t) {
    const Vec x = path.x.row(t).transpose();
    const Vec xn = path.x.row(t + 1).transpose();
    const Vec level = kappa_dt_theta(params, path.z.row(t).transpose());
    for (Eigen::Index i = 0; i < N; ++i) {
      const double drift = level[i] - params.kappa[i] * params.dt * x[i];
      if (log_form) {
        if (!(x[i] > 0.0) || !(xn[i] > 0.0))
          throw std::domain_error("neg_log_likelihood: non-positive x under log form");
        v(t, i) = std::log(xn[i] / x[i]) - (drift - 0.5 * params.sigma_x2[i] * params.dt);
      } else {
        v(t, i) = (xn[i] - x[i]) / x[i] - drift;
      }
    }
  }
  return v;
}

// Active-set solve of  min_p  c ||r - X p||^2 + reg (sum_{k>=1} p_k - 1)^2
// with p = [kappa, w_1.. w_K], w >= 0, kappa free.
Vec penalized_ls(const Mat& X, const Vec& r, double c, double reg) {
  const Eigen::Index m = X.cols();
  Vec ones_w = Vec::Ones(m);
  ones_w[0] = 0.0;  // penalty touches the weights only

  std::vector<bool> clamped(m, false);
  for (int pass = 0; pass < static_cast<int>(m) + 1; ++pass) {
    std::vector<Eigen::Index> free;
    for (Eigen::Index j = 0; j < m; ++j)
      if (!clamped[j]) free.push_back(j);

    Mat Xf(X.rows(), free.size());
    Vec of(free.size());
    for (std::size_t j = 0; j < free.size(); ++j) {
      Xf.col(j) = X.col(free[j]);
      of[j] = ones_w[free[j]];
    }
    Mat A = c * Xf.transpose() * Xf + reg * of * of.transpose();
    Vec b = c * Xf.transpose() * r + reg * of;
    Vec pf = A.ldlt().solve(b);

    bool ok = true;
    for (std::size_t j = 0; j < free.size(); ++j) {
      if (free[j] >= 1 && pf[j] < 0.0) {  // weight went negative
        clamped[free[j]] = true;
        ok = false;
      }
    }
    if (ok) {
      Vec p = Vec::Zero(m);
      for (std::size_t j = 0; j < free.size(); ++j) p[free[j]] = pf[j];
      return p;
    }
  }
  return Vec::Zero(m);  // everything clamped
}

}  // namespace

Vec kappa_dt_theta(const GmrParams& params, const Vec& z) {
  const Vec wz = params.w * z;
  return params.phi.array() +
         (1.0 + params.phi.array()) * (params.r_f + wz.array());
}

Vec theta_level(const GmrParams& params, const Vec& z) {
  const Vec num = kappa_dt_theta(params, z);
  Vec out(params.n_assets());
  for (Eigen::Index i = 0; i < params.n_assets(); ++i) {
    const double denom = params.kappa[i] * params.dt;
    if (denom == 0.0)
      throw std::domain_error("theta_level: mu*phi*(1+phi) vanishes, level undefined");
    out[i] = num[i] / denom;
  }
  return out;
}

MarketPath simulate_gmr(const GmrParams& params, const Vec& x0, const Mat& z_path,
                        std::uint64_t seed, Eigen::Index steps) {
  const Eigen::Index N = params.n_assets();
  if (x0.size() != N) throw DimensionError("simulate_gmr: x0 size");
  if (!(x0.minCoeff() > 0.0)) throw std::invalid_argument("simulate_gmr: x0 must be > 0");
  if (z_path.rows() < steps) throw DimensionError("simulate_gmr: z_path too short");
  if (z_path.cols() != params.w.cols()) throw DimensionError("simulate_gmr: z dimension");

  MarketPath path;
  path.dt = params.dt;
  path.x.resize(steps + 1, N);
  path.z = z_path.topRows(steps + 1 <= z_path.rows() ? steps + 1 : z_path.rows());
  path.x.row(0) = x0.transpose();

  Rng rng(seed);
  const Vec vol = (params.sigma_x2 * params.dt).cwiseSqrt();
  Vec x = x0;
  for (Eigen::Index t = 0; t < steps; ++t) {
    const Vec level = kappa_dt_theta(params, z_path.row(t).transpose());
    Vec xn(N);
    for (Eigen::Index i = 0; i < N; ++i) {
      const double drift = x[i] * level[i] - params.kappa[i] * params.dt * x[i] * x[i];
      const double noise = x[i] * vol[i] * rng.normal();
      xn[i] = x[i] + drift + noise;
      if (!(xn[i] > 0.0)) path.went_nonpositive = true;
    }
    x = xn;
    path.x.row(t + 1) = x.transpose();
  }
  return path;
}

Vec simulate_gmr_1d(double kappa, double theta, double sigma, double x0, double dt,
                    Eigen::Index steps, std::uint64_t seed, GmrScheme scheme) {
  if (!(x0 > 0.0)) throw std::invalid_argument("simulate_gmr_1d: x0 must be > 0");
  Rng rng(seed);
  Vec out(steps + 1);
  out[0] = x0;
  const double sdt = std::sqrt(dt);
  switch (scheme) {
    case GmrScheme::Direct: {
      double x = x0;
      for (Eigen::Index t = 0; t < steps; ++t) {
        x = x + kappa * x * (theta - x) * dt + sigma * x * sdt * rng.normal();
        out[t + 1] = x;
      }
      return out;
    }
    case GmrScheme::Reciprocal: {
      double s = 1.0 / x0;
      for (Eigen::Index t = 0; t < steps; ++t) {
        s = s + (kappa - (kappa * theta - sigma * sigma) * s) * dt -
            sigma * s * sdt * rng.normal();
        out[t + 1] = 1.0 / s;
      }
      return out;
    }
    case GmrScheme::Log: {
      const double c = x0;
      double s = 0.0;
      for (Eigen::Index t = 0; t < steps; ++t) {
        s = s + (kappa * theta - 0.5 * sigma * sigma - kappa * c * std::exp(s)) * dt +
            sigma * sdt * rng.normal();
        out[t + 1] = c * std::exp(s);
      }
      return out;
    }
  }
  throw std::invalid_argument("simulate_gmr_1d: invalid scheme");
}

double neg_log_likelihood(const GmrParams& params, const MarketPath& path,
                          const CalibConfig& config) {
  if (path.x.rows() < 2) throw std::invalid_argument("neg_log_likelihood: need >= 2 rows");
  const Mat v = residuals(params, path, config.log_form);
  const Eigen::Index T = v.rows();
  double nll = 0.0;
  for (Eigen::Index i = 0; i < params.n_assets(); ++i) {
    const double var = params.sigma_x2[i] * params.dt;
    nll += 0.5 * v.col(i).squaredNorm() / var +
           0.5 * static_cast<double>(T) * std::log(2.0 * M_PI * var);
  }
  return nll;
}

Vec neg_log_likelihood_gradient(const GmrParams& params, const MarketPath& path,
                                const CalibConfig& config, const Mat& loading_mask) {
  const Eigen::Index T = path.x.rows() - 1;
  const Eigen::Index N = params.n_assets();
  const Mat v = residuals(params, path, config.log_form);

  std::vector<double> out;
  for (Eigen::Index i = 0; i < N; ++i) {
    const double var = params.sigma_x2[i] * params.dt;
    double g_kappa = 0.0, g_sigma2 = 0.0;
    std::vector<Eigen::Index> cols;
    for (Eigen::Index j = 0; j < loading_mask.cols(); ++j)
      if (loading_mask(i, j) != 0.0) cols.push_back(j);
    Vec g_w = Vec::Zero(static_cast<Eigen::Index>(cols.size()));
    for (Eigen::Index t = 0; t < T; ++t) {
      const double vt = v(t, i);
      g_kappa += vt * params.dt * path.x(t, i) / var;
      for (std::size_t k = 0; k < cols.size(); ++k)
        g_w[static_cast<Eigen::Index>(k)] +=
            -vt * (1.0 + params.phi[i]) * path.z(t, cols[k]) / var;
      g_sigma2 += -0.5 * vt * vt / (var * params.sigma_x2[i]) + 0.5 / params.sigma_x2[i];
      if (config.log_form) g_sigma2 += 0.5 * vt * params.dt / var;
    }
    out.push_back(g_kappa);
    for (Eigen::Index k = 0; k < g_w.size(); ++k) out.push_back(g_w[k]);
    out.push_back(g_sigma2);
  }
  return Eigen::Map<Vec>(out.data(), static_cast<Eigen::Index>(out.size()));
}

CalibResult calibrate(const MarketPath& path, const Mat& loading_mask,
                      const CalibConfig& config) {
  const Eigen::Index N = path.x.cols();
  const Eigen::Index T = path.x.rows() - 1;
  if (T < 1) throw std::invalid_argument("calibrate: need at least 2 observations");
  if (loading_mask.rows() != N || loading_mask.cols() != path.z.cols())
    throw DimensionError("calibrate: loading mask shape");

  CalibResult result;
  result.assets.resize(N);
  const double c0 = config.phi_structural + (1.0 + config.phi_structural) * config.r_f;

  for (Eigen::Index i = 0; i < N; ++i) {
    std::vector<Eigen::Index> cols;
    for (Eigen::Index j = 0; j < loading_mask.cols(); ++j)
      if (loading_mask(i, j) != 0.0) cols.push_back(j);
    const Eigen::Index K = static_cast<Eigen::Index>(cols.size());

    // design matrix: column 0 is -dt*x (kappa), then (1+phi)*z_k (weights)
    Mat X(T, K + 1);
    Vec target(T);
    for (Eigen::Index t = 0; t < T; ++t) {
      const double x = path.x(t, i);
      X(t, 0) = -config.dt * x;
      for (Eigen::Index k = 0; k < K; ++k)
        X(t, k + 1) = (1.0 + config.phi_structural) * path.z(t, cols[k]);
      if (config.log_form) {
        if (!(x > 0.0) || !(path.x(t + 1, i) > 0.0))
          throw std::domain_error("calibrate: non-positive x under log form");
        target[t] = std::log(path.x(t + 1, i) / x) - c0;
      } else {
        target[t] = (path.x(t + 1, i) - x) / x - c0;
      }
    }

    AssetCalibration& fit = result.assets[i];
    Vec p = Vec::Zero(K + 1);
    double sigma2 = (target - X * p).squaredNorm() / static_cast<double>(T) / config.dt;
    if (!(sigma2 > 0.0)) sigma2 = 1e-12;
    for (int it = 0; it < config.max_iter; ++it) {
      Vec r = target;
      if (config.log_form) r.array() += 0.5 * sigma2 * config.dt;
      const double ssr_cur = (r - X * p).squaredNorm();
      const double c = static_cast<double>(T) / std::max(ssr_cur, 1e-300);
      Vec p_new = penalized_ls(X, r, 0.5 * c, config.reg_lambda);
      const double ssr_new = (r - X * p_new).squaredNorm();
      const double sigma2_new = ssr_new / static_cast<double>(T) / config.dt;
      const double step = (p_new - p).cwiseAbs().maxCoeff() + std::abs(sigma2_new - sigma2);
      p = p_new;
      sigma2 = std::max(sigma2_new, 1e-300);
      fit.iterations = it + 1;
      if (step < config.tol) {
        fit.converged = true;
        break;
      }
    }
    fit.kappa = p[0];
    fit.w = p.tail(K);
    fit.sigma2 = sigma2;

    GmrParams single;
    single.kappa = Vec::Constant(1, fit.kappa);
    single.w = Mat::Zero(1, path.z.cols());
    for (Eigen::Index k = 0; k < K; ++k) single.w(0, cols[k]) = fit.w[k];
    single.sigma_x2 = Vec::Constant(1, fit.sigma2);
    single.phi = Vec::Constant(1, config.phi_structural);
    single.mu = Vec::Zero(1);
    single.r_f = config.r_f;
    single.dt = config.dt;
    MarketPath slice;
    slice.x = path.x.col(i);
    slice.z = path.z;
    slice.dt = path.dt;
    fit.nll = neg_log_likelihood(single, slice, config);

    result.all_converged = result.all_converged && fit.converged;
  }
  return result;
}

GmrParams from_structural(const Vec& mu, const Vec& phi, double r_f, const Mat& W,
                          const Mat& Sigma_r, double dt) {
  if (mu.size() != phi.size() || W.rows() != mu.size() || Sigma_r.rows() != mu.size())
    throw DimensionError("from_structural: dimensions");
  if (!(mu.minCoeff() > 0.0) || !(phi.minCoeff() > 0.0))
    throw std::domain_error(
        "from_structural: mu and phi must be > 0; the mu, phi -> 0 limit is the "
        "log-normal return model");
  GmrParams p;
  p.kappa = mu.array() * phi.array() * (1.0 + phi.array()) / dt;
  p.w = W;
  p.sigma_x2 = (1.0 + phi.array()).square() * Sigma_r.diagonal().array();
  p.phi = phi;
  p.mu = mu;
  p.r_f = r_f;
  p.dt = dt;
  return p;
}

}  // namespace mirl
