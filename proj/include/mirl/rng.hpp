#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include <Eigen/Dense>

namespace mirl {

// Seeded normal generator. std::normal_distribution is not guaranteed to
// produce the same stream across standard libraries, so we roll Box-Muller
// on top of the (fully specified) mt19937_64 engine. Streams derived from
// the same seed with different stream ids are independent for practical
// purposes (splitmix64 scrambling).
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
      : engine_(scramble(seed) ^ scramble(stream * 0x9e3779b97f4a7c15ULL + 1)) {}

  double uniform() {
    // 53-bit mantissa uniform in (0,1); never returns exactly 0.
    return (static_cast<double>(engine_() >> 11) + 0.5) * (1.0 / 9007199254740992.0);
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  Eigen::VectorXd normal_vector(Eigen::Index n) {
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = normal();
    return v;
  }

  std::uint64_t next_u64() { return engine_(); }

 private:
  static std::uint64_t scramble(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Draws from N(0, Sigma) using the (lower) Cholesky factor of Sigma.
inline Eigen::VectorXd mvn_draw(Rng& rng, const Eigen::MatrixXd& chol_lower) {
  return chol_lower * rng.normal_vector(chol_lower.rows());
}

}  // namespace mirl
