#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "mirl/model.hpp"
#include "mirl/rng.hpp"

namespace mirl {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense market-cap panel. Caps are rescaled exactly once at load time by the
// average total market cap over the window; the factor is kept for reports.
struct MarketPanel {
  std::vector<std::string> tickers;
  std::vector<std::string> dates;  // ISO-8601, strictly increasing
  Mat caps;                        // T x N, rescaled
  double rescale_factor = 1.0;

  Eigen::Index n_dates() const { return caps.rows(); }
  Eigen::Index n_assets() const { return caps.cols(); }
};

struct SignalSpec {
  std::string kind;      // "ema" | "oracle" | "noise" | "ou" | "file"
  double gamma = 0.0;    // ema smoothing
  bool demeaned = true;
  std::uint64_t seed = 0;
};

struct SignalPanel {
  Mat values;  // T x (K*N) stacked per asset
  std::vector<SignalSpec> specs;
  Mat loading_mask;  // N x (K*N), 1 where w may be non-zero

  Eigen::Index n_dates() const { return values.rows(); }
};

// Forward-looking series: entry t uses information from t+1. valid_length()
// excludes the final date; reading past it is a range error by design.
class OracleSignal {
 public:
  OracleSignal(Vec values, Eigen::Index valid) : values_(std::move(values)), valid_(valid) {}
  Eigen::Index valid_length() const { return valid_; }
  double at(Eigen::Index t) const {
    if (t < 0 || t >= valid_)
      throw std::out_of_range("OracleSignal: index past the usable range (look-ahead)");
    return values_[t];
  }
  Vec usable() const { return values_.head(valid_); }

 private:
  Vec values_;
  Eigen::Index valid_;
};

// Parses "date,ticker,cap" delimited text, validates completeness, rescales.
MarketPanel load_market_caps(std::istream& in);
MarketPanel load_market_caps_file(const std::string& path);

// e_t = gamma e_{t-1} + (1 - gamma) x_t, e_0 = x_0, optionally demeaned over
// the full window.
Vec ema_signal(const Vec& series, double gamma, bool demean);

// Demeaned realized next-step relative return; last entry unusable.
OracleSignal oracle_signal(const Vec& series);

Vec noise_signal(Eigen::Index length, std::uint64_t seed);

SignalPanel simulate_ou_signals(const Vec& phi, const Mat& Sigma_z, const Vec& z0,
                                Eigen::Index steps, std::uint64_t seed);

// Stacks K per-asset signal series into a T x (K*N) panel and the matching
// block-sparsity mask for the loading matrix w.
SignalPanel stack_predictors(const std::vector<std::vector<Vec>>& per_asset_signals);

}  // namespace mirl
