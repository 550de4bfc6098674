#include "mirl/signals.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace mirl {

MarketPanel load_market_caps(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("load_market_caps: empty input");
  // tolerate a UTF-8 BOM
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  if (line != "date,ticker,cap")
    throw DataError("load_market_caps: expected header 'date,ticker,cap', got '" + line + "'");

  std::map<std::string, std::map<std::string, double>> by_date;  // date -> ticker -> cap
  std::set<std::string> tickers;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string date, ticker, cap_str;
    if (!std::getline(ss, date, ',') || !std::getline(ss, ticker, ',') ||
        !std::getline(ss, cap_str))
      throw DataError("load_market_caps: malformed row at line " + std::to_string(lineno));
    double cap = 0.0;
    try {
      cap = std::stod(cap_str);
    } catch (const std::exception&) {
      throw DataError("load_market_caps: bad cap value at line " + std::to_string(lineno));
    }
    if (!(cap > 0.0))
      throw DataError("load_market_caps: non-positive cap for (" + date + "," + ticker + ")");
    auto [it, inserted] = by_date[date].emplace(ticker, cap);
    if (!inserted)
      throw DataError("load_market_caps: duplicate entry for (" + date + "," + ticker + ")");
    tickers.insert(ticker);
  }
  if (by_date.empty()) throw DataError("load_market_caps: no rows");

  MarketPanel panel;
  panel.tickers.assign(tickers.begin(), tickers.end());
  for (const auto& [date, row] : by_date) {
    for (const auto& t : panel.tickers)
      if (row.find(t) == row.end())
        throw DataError("load_market_caps: missing cell for (" + date + "," + t + ")");
    panel.dates.push_back(date);
  }

  const Eigen::Index T = static_cast<Eigen::Index>(panel.dates.size());
  const Eigen::Index N = static_cast<Eigen::Index>(panel.tickers.size());
  panel.caps.resize(T, N);
  double total = 0.0;
  for (Eigen::Index t = 0; t < T; ++t) {
    const auto& row = by_date.at(panel.dates[t]);
    for (Eigen::Index i = 0; i < N; ++i) panel.caps(t, i) = row.at(panel.tickers[i]);
    total += panel.caps.row(t).sum();
  }
  panel.rescale_factor = total / static_cast<double>(T);
  panel.caps /= panel.rescale_factor;
  return panel;
}

MarketPanel load_market_caps_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("load_market_caps: cannot open " + path);
  return load_market_caps(in);
}

Vec ema_signal(const Vec& series, double gamma, bool demean) {
  if (gamma < 0.0 || gamma >= 1.0)
    throw std::invalid_argument("ema_signal: gamma must be in [0, 1)");
  Vec e(series.size());
  if (series.size() == 0) return e;
  e[0] = series[0];
  for (Eigen::Index t = 1; t < series.size(); ++t)
    e[t] = gamma * e[t - 1] + (1.0 - gamma) * series[t];
  if (demean) e.array() -= e.mean();
  return e;
}

OracleSignal oracle_signal(const Vec& series) {
  if (series.size() < 2) throw std::invalid_argument("oracle_signal: need at least 2 points");
  const Eigen::Index T = series.size();
  Vec r(T - 1);
  for (Eigen::Index t = 0; t + 1 < T; ++t) r[t] = (series[t + 1] - series[t]) / series[t];
  const double mean = r.mean();
  Vec values = Vec::Zero(T);
  values.head(T - 1) = r.array() - mean;
  return OracleSignal(std::move(values), T - 1);
}

Vec noise_signal(Eigen::Index length, std::uint64_t seed) {
  Rng rng(seed);
  Vec v = rng.normal_vector(length);
  if (length > 0) v.array() -= v.mean();
  return v;
}

SignalPanel simulate_ou_signals(const Vec& phi, const Mat& Sigma_z, const Vec& z0,
                                Eigen::Index steps, std::uint64_t seed) {
  if (phi.size() > 0 && (phi.minCoeff() < 0.0 || phi.maxCoeff() > 1.0))
    throw std::invalid_argument("simulate_ou_signals: Phi entries must be in [0, 1]");
  const Eigen::Index k = z0.size();
  if (phi.size() != k || Sigma_z.rows() != k || Sigma_z.cols() != k)
    throw DimensionError("simulate_ou_signals: dimensions");

  Eigen::LLT<Mat> llt(Sigma_z);
  Mat chol = Mat::Zero(k, k);
  if (Sigma_z.cwiseAbs().maxCoeff() > 0.0) {
    if (llt.info() != Eigen::Success)
      throw std::invalid_argument("simulate_ou_signals: Sigma_z not PSD");
    chol = llt.matrixL();
  }

  SignalPanel panel;
  panel.values.resize(steps + 1, k);
  Rng rng(seed);
  Vec z = z0;
  panel.values.row(0) = z.transpose();
  for (Eigen::Index t = 1; t <= steps; ++t) {
    z = (1.0 - phi.array()).matrix().cwiseProduct(z) + mvn_draw(rng, chol);
    panel.values.row(t) = z.transpose();
  }
  panel.loading_mask = Mat::Ones(1, k);
  return panel;
}

SignalPanel stack_predictors(const std::vector<std::vector<Vec>>& per_asset_signals) {
  const Eigen::Index n = static_cast<Eigen::Index>(per_asset_signals.size());
  if (n == 0) throw std::invalid_argument("stack_predictors: no assets");
  const Eigen::Index k = static_cast<Eigen::Index>(per_asset_signals[0].size());
  if (k == 0) throw std::invalid_argument("stack_predictors: no signals");
  const Eigen::Index T = per_asset_signals[0][0].size();
  for (const auto& sigs : per_asset_signals) {
    if (static_cast<Eigen::Index>(sigs.size()) != k)
      throw DimensionError("stack_predictors: ragged signal count");
    for (const auto& s : sigs)
      if (s.size() != T) throw DimensionError("stack_predictors: ragged signal length");
  }

  SignalPanel panel;
  panel.values.resize(T, k * n);
  panel.loading_mask = Mat::Zero(n, k * n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < k; ++j) {
      panel.values.col(i * k + j) = per_asset_signals[i][j];
      panel.loading_mask(i, i * k + j) = 1.0;
    }
  }
  return panel;
}

}  // namespace mirl
