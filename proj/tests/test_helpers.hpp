#pragma once

#include "mirl/model.hpp"
#include "mirl/rng.hpp"

namespace helpers {

using mirl::Mat;
using mirl::Vec;

inline Mat random_spd(mirl::Rng& rng, Eigen::Index n, double scale = 1.0) {
  Mat a(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) a(i, j) = rng.normal();
  return scale * (a * a.transpose() / static_cast<double>(n) +
                  0.25 * Mat::Identity(n, n));
}

inline Mat random_mat(mirl::Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Mat a(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) a(i, j) = scale * rng.normal();
  return a;
}

inline mirl::ModelParams random_params(mirl::Rng& rng, Eigen::Index n, Eigen::Index k) {
  mirl::ModelParams p;
  p.r_f = 0.01 * std::abs(rng.normal());
  p.W = random_mat(rng, n, k, 0.1);
  p.mu = 0.1 * rng.normal_vector(n).cwiseAbs();
  p.Sigma_r = random_spd(rng, n, 0.05);
  p.phi = 0.5 * (rng.normal_vector(k).array().sin() + 1.0).matrix() * 0.9;
  p.Sigma_z = random_spd(rng, k, 0.1);
  p.lambda = std::abs(rng.normal());
  p.Gamma_plus = random_mat(rng, n, n, 0.05);
  p.Gamma_minus = random_mat(rng, n, n, 0.05);
  p.Upsilon = random_mat(rng, n, k, 0.05);
  p.nu_plus = 0.01 * rng.normal_vector(n).cwiseAbs();
  p.nu_minus = 0.01 * rng.normal_vector(n).cwiseAbs();
  p.gamma_disc = 0.9;
  p.beta = 1.0;
  return p;
}

// Reward assembled term by term from its four components; the independent
// route against the RewardCoeffs quadratic form.
inline double component_sum_reward(const mirl::ModelParams& p, const Vec& x, const Vec& z,
                                   const Vec& u_plus, const Vec& u_minus) {
  const Vec u = u_plus - u_minus;
  const Vec xu = x + u;
  double r0 = (p.W * z - p.mu.cwiseProduct(u)).dot(xu);
  double risk = -p.lambda * xu.dot(p.Sigma_r * xu);
  double impact = -x.dot(p.Gamma_plus * u_plus) - x.dot(p.Gamma_minus * u_minus) -
                  x.dot(p.Upsilon * z);
  double fee = -p.nu_plus.dot(u_plus) - p.nu_minus.dot(u_minus);
  return r0 + risk + impact + fee;
}

}  // namespace helpers
