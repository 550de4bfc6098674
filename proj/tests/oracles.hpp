#pragma once

// Test-only numerical oracles, independent of the library's closed forms:
// quadrature rules, finite differences, and small fit helpers.

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

namespace oracles {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Gauss-Hermite rule via Golub-Welsch; integrates exp(-t^2) weighted f.
struct GaussHermite {
  Vec nodes;
  Vec weights;

  explicit GaussHermite(int n) {
    Mat j = Mat::Zero(n, n);
    for (int i = 1; i < n; ++i) {
      double b = std::sqrt(i / 2.0);
      j(i, i - 1) = b;
      j(i - 1, i) = b;
    }
    Eigen::SelfAdjointEigenSolver<Mat> es(j);
    nodes = es.eigenvalues();
    weights = Vec(n);
    const double sqrt_pi = std::sqrt(M_PI);
    for (int i = 0; i < n; ++i) {
      double v0 = es.eigenvectors()(0, i);
      weights[i] = sqrt_pi * v0 * v0;
    }
  }

  // E[f(X)] for X ~ N(mean, sd^2).
  double gaussian_expectation(double mean, double sd,
                              const std::function<double(double)>& f) const {
    double acc = 0.0;
    for (int i = 0; i < nodes.size(); ++i)
      acc += weights[i] * f(mean + std::sqrt(2.0) * sd * nodes[i]);
    return acc / std::sqrt(M_PI);
  }
};

// Adaptive Simpson on [a, b].
inline double adaptive_simpson(const std::function<double(double)>& f, double a, double b,
                               double tol = 1e-12, int depth = 30) {
  std::function<double(double, double, double, double, double, double, double, int)> rec =
      [&](double lo, double hi, double flo, double fmid, double fhi, double whole,
          double eps, int d) -> double {
    double m = 0.5 * (lo + hi);
    double lm = 0.5 * (lo + m), rm = 0.5 * (m + hi);
    double flm = f(lm), frm = f(rm);
    double left = (m - lo) / 6.0 * (flo + 4.0 * flm + fmid);
    double right = (hi - m) / 6.0 * (fmid + 4.0 * frm + fhi);
    if (d <= 0 || std::abs(left + right - whole) < 15.0 * eps)
      return left + right + (left + right - whole) / 15.0;
    return rec(lo, m, flo, flm, fmid, left, eps * 0.5, d - 1) +
           rec(m, hi, fmid, frm, fhi, right, eps * 0.5, d - 1);
  };
  double m = 0.5 * (a + b);
  double fa = f(a), fm = f(m), fb = f(b);
  double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
  return rec(a, m + (b - m), fa, fm, fb, whole, tol, depth);
}

inline double central_difference(const std::function<double(double)>& f, double x,
                                 double h) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

inline double second_difference(const std::function<double(double)>& f, double x, double h) {
  return (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h);
}

// Five-point fourth-order central first derivative; the independent check
// for the configured two-point gradients.
inline double central_difference_4(const std::function<double(double)>& f, double x,
                                   double h) {
  return (-f(x + 2.0 * h) + 8.0 * f(x + h) - 8.0 * f(x - h) + f(x - 2.0 * h)) / (12.0 * h);
}

// Least-squares fit of a scalar quadratic c0 + c1 x + c2 x^2 through sample
// points; returns coefficients and the max fit residual (a self-check that
// the sampled function really is quadratic).
struct QuadraticFit {
  double c0 = 0.0, c1 = 0.0, c2 = 0.0;
  double max_residual = 0.0;

  static QuadraticFit fit(const Vec& xs, const Vec& ys) {
    Mat a(xs.size(), 3);
    for (int i = 0; i < xs.size(); ++i) {
      a(i, 0) = 1.0;
      a(i, 1) = xs[i];
      a(i, 2) = xs[i] * xs[i];
    }
    Vec c = (a.transpose() * a).ldlt().solve(a.transpose() * ys);
    QuadraticFit q;
    q.c0 = c[0];
    q.c1 = c[1];
    q.c2 = c[2];
    q.max_residual = (a * c - ys).cwiseAbs().maxCoeff();
    return q;
  }
  double operator()(double x) const { return c0 + c1 * x + c2 * x * x; }
};

// Quadratic in two variables, for value functions over (x, z) states.
struct Quadratic2Fit {
  Vec c = Vec::Zero(6);  // 1, x, z, x^2, xz, z^2
  double max_residual = 0.0;

  static Quadratic2Fit fit(const Mat& pts, const Vec& ys) {
    Mat a(pts.rows(), 6);
    for (int i = 0; i < pts.rows(); ++i) {
      double x = pts(i, 0), z = pts(i, 1);
      a.row(i) << 1.0, x, z, x * x, x * z, z * z;
    }
    Quadratic2Fit q;
    q.c = (a.transpose() * a).ldlt().solve(a.transpose() * ys);
    q.max_residual = (a * q.c - ys).cwiseAbs().maxCoeff();
    return q;
  }
  double operator()(double x, double z) const {
    return c[0] + c[1] * x + c[2] * z + c[3] * x * x + c[4] * x * z + c[5] * z * z;
  }
};

}  // namespace oracles
