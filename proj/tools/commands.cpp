#include "commands.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "mirl/gmr.hpp"
#include "mirl/irl.hpp"
#include "mirl/signals.hpp"

namespace mirl::cli {

namespace fs = std::filesystem;

namespace {

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::istringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    out.push_back(std::stod(tok));
  }
  return out;
}

std::vector<std::string> parse_names(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

// civil-date arithmetic for synthetic daily timestamps
long days_from_civil(int y, int m, int d) {
  y -= m <= 2;
  const long era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153u * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<long>(doe) - 719468;
}

std::string civil_from_days(long z) {
  z += 719468;
  const long era = (z >= 0 ? z : z - 146096) / 146097;
  const unsigned doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  const long y = static_cast<long>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  const unsigned d = doy - (153 * mp + 2) / 5 + 1;
  const unsigned m = mp + (mp < 10 ? 3 : -9);
  std::ostringstream out;
  out << (y + (m <= 2)) << '-' << std::setw(2) << std::setfill('0') << m << '-'
      << std::setw(2) << std::setfill('0') << d;
  return out.str();
}

std::vector<std::string> make_dates(Eigen::Index count, const std::string& start) {
  const long base = days_from_civil(std::stoi(start.substr(0, 4)),
                                    std::stoi(start.substr(5, 2)),
                                    std::stoi(start.substr(8, 2)));
  std::vector<std::string> out;
  out.reserve(count);
  for (Eigen::Index i = 0; i < count; ++i) out.push_back(civil_from_days(base + i));
  return out;
}

std::string ticker_name(Eigen::Index i) {
  std::ostringstream out;
  out << 'A' << std::setw(2) << std::setfill('0') << i;
  return out.str();
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << content;
}

void write_manifest(const fs::path& dir, const RunConfig& cfg, std::uint64_t seed) {
  std::ostringstream out;
  out << "seed = " << seed << '\n' << cfg.resolved();
  write_file(dir / "manifest.txt", out.str());
}

std::string fmt(double v) {
  std::ostringstream out;
  out << std::setprecision(17) << v;
  return out.str();
}

// --- signal assembly for calibrate/irl ------------------------------------

struct BuiltSignals {
  Mat values;        // T x (K*N)
  Mat mask;          // N x (K*N)
  Eigen::Index usable;  // rows valid as transition starts
  std::string note;
};

BuiltSignals build_signals(const MarketPanel& panel, const RunConfig& cfg,
                           std::uint64_t seed) {
  const Eigen::Index T = panel.n_dates();
  const Eigen::Index N = panel.n_assets();
  const std::string kind = cfg.str("signals");
  BuiltSignals out;
  out.usable = T - 1;
  if (kind == "ema") {
    std::vector<double> gammas = parse_list(cfg.str("ema_gammas"));
    if (gammas.empty()) throw ConfigError("config: ema_gammas is empty");
    std::vector<std::vector<Vec>> per_asset(N);
    for (Eigen::Index i = 0; i < N; ++i)
      for (double g : gammas)
        per_asset[i].push_back(ema_signal(panel.caps.col(i), g, cfg.flag("demean")));
    SignalPanel sp = stack_predictors(per_asset);
    out.values = sp.values;
    out.mask = sp.loading_mask;
    out.note = "ema";
  } else if (kind == "oracle_noise") {
    std::vector<std::vector<Vec>> per_asset(N);
    for (Eigen::Index i = 0; i < N; ++i) {
      OracleSignal o = oracle_signal(panel.caps.col(i));
      Vec padded = Vec::Zero(T);
      padded.head(o.valid_length()) = o.usable();
      per_asset[i].push_back(padded);
      per_asset[i].push_back(noise_signal(T, seed + 7919 * (i + 1)));
    }
    SignalPanel sp = stack_predictors(per_asset);
    out.values = sp.values;
    out.mask = sp.loading_mask;
    out.usable = T - 2;  // last oracle entry is outside the usable range
    out.note = "oracle+noise";
  } else if (kind == "noise_only") {
    std::vector<std::vector<Vec>> per_asset(N);
    for (Eigen::Index i = 0; i < N; ++i) {
      per_asset[i].push_back(noise_signal(T, seed + 7919 * (i + 1)));
      per_asset[i].push_back(noise_signal(T, seed + 104729 * (i + 1)));
    }
    SignalPanel sp = stack_predictors(per_asset);
    out.values = sp.values;
    out.mask = sp.loading_mask;
    out.note = "noise only";
  } else if (kind == "file") {
    std::ifstream in(cfg.str("signals_file"));
    if (!in) throw ConfigError("config: cannot open signals_file");
    std::string line;
    std::getline(in, line);  // header
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::istringstream ss(line);
      std::string tok;
      std::getline(ss, tok, ',');  // date
      std::vector<double> row;
      while (std::getline(ss, tok, ',')) row.push_back(std::stod(tok));
      rows.push_back(row);
    }
    if (rows.empty()) throw ConfigError("signals_file: no rows");
    const Eigen::Index cols = static_cast<Eigen::Index>(rows[0].size());
    if (cols % N != 0)
      throw ConfigError("signals_file: column count not a multiple of the asset count");
    out.values.resize(static_cast<Eigen::Index>(rows.size()), cols);
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (Eigen::Index c = 0; c < cols; ++c) out.values(static_cast<Eigen::Index>(r), c) = rows[r][c];
    const Eigen::Index K = cols / N;
    out.mask = Mat::Zero(N, cols);
    for (Eigen::Index i = 0; i < N; ++i)
      for (Eigen::Index k = 0; k < K; ++k) out.mask(i, i * K + k) = 1.0;
    out.usable = std::min<Eigen::Index>(T - 1, out.values.rows());
    out.note = "file";
  } else {
    throw ConfigError("config: unknown signals kind '" + kind + "'");
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

int cmd_simulate(const GlobalOptions& opts) {
  RunConfig cfg = opts.config_path.empty() ? RunConfig()
                                           : RunConfig::parse_file(opts.config_path);
  cfg.declare("mode", "gmr");  // gmr | lognormal
  cfg.declare("n_assets", "1");
  cfg.declare("n_signals", "2");
  cfg.declare("steps", "1000");
  cfg.declare("x0", "1.0");
  cfg.declare("kappa", "0.7");
  cfg.declare("w", "0.6,0.4");
  cfg.declare("sigma2", "1e-4");
  cfg.declare("phi", "0.7");
  cfg.declare("r_f", "0.0");
  cfg.declare("dt", "1.0");
  cfg.declare("signal_phi", "0.1,0.04");
  cfg.declare("signal_var", "1e-5,4e-6");
  cfg.declare("start_date", "2015-01-01");
  cfg.check_unknown_keys();

  const fs::path dir(opts.out_dir);
  fs::create_directories(dir);
  const std::uint64_t seed = opts.seed;

  try {
    const Eigen::Index n = cfg.integer("n_assets");
    const Eigen::Index k = cfg.integer("n_signals");
    const Eigen::Index steps = cfg.integer("steps");
    const bool lognormal = cfg.str("mode") == "lognormal";
    if (cfg.str("mode") != "gmr" && cfg.str("mode") != "lognormal")
      throw ConfigError("config: mode must be gmr or lognormal");

    std::vector<double> w_row = parse_list(cfg.str("w"));
    if (static_cast<Eigen::Index>(w_row.size()) != k)
      throw ConfigError("config: w must list n_signals weights");
    std::vector<double> sphi = parse_list(cfg.str("signal_phi"));
    std::vector<double> svar = parse_list(cfg.str("signal_var"));
    if (static_cast<Eigen::Index>(sphi.size()) != k ||
        static_cast<Eigen::Index>(svar.size()) != k)
      throw ConfigError("config: signal_phi/signal_var must list n_signals entries");

    GmrParams params;
    params.kappa = Vec::Constant(n, lognormal ? 0.0 : cfg.num("kappa"));
    params.w = Mat::Zero(n, k * n);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < k; ++j) params.w(i, i * k + j) = w_row[j];
    params.sigma_x2 = Vec::Constant(n, cfg.num("sigma2"));
    params.phi = Vec::Constant(n, lognormal ? 0.0 : cfg.num("phi"));
    params.mu = Vec::Zero(n);
    params.r_f = cfg.num("r_f");
    params.dt = cfg.num("dt");

    // exogenous OU signals, one block per asset
    Mat z(steps + 1, k * n);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < k; ++j) {
        SignalPanel sp = simulate_ou_signals(
            Vec::Constant(1, sphi[j]), Mat::Constant(1, 1, svar[j]), Vec::Zero(1), steps,
            seed + 1000003 * (i * k + j + 1));
        z.col(i * k + j) = sp.values;
      }

    std::vector<std::string> dates = make_dates(steps + 1, cfg.str("start_date"));

    std::ostringstream caps;
    caps << "date,ticker,cap\n";
    std::ostringstream signals;
    signals << "date";
    for (Eigen::Index c = 0; c < k * n; ++c) signals << ",z" << c;
    signals << '\n';

    if (steps > 0) {
      MarketPath path =
          simulate_gmr(params, Vec::Constant(n, cfg.num("x0")), z, seed, steps);
      if (!path.x.allFinite()) {
        std::cerr << "simulate: path not finite\n";
        return 3;
      }
      if (path.went_nonpositive)
        std::cerr << "simulate: warning: path crossed zero (kept, not clamped)\n";
      for (Eigen::Index t = 0; t <= steps; ++t) {
        for (Eigen::Index i = 0; i < n; ++i)
          caps << dates[t] << ',' << ticker_name(i) << ',' << fmt(path.x(t, i)) << '\n';
        signals << dates[t];
        for (Eigen::Index c = 0; c < k * n; ++c) signals << ',' << fmt(z(t, c));
        signals << '\n';
      }
    }
    write_file(dir / "caps.csv", caps.str());
    write_file(dir / "signals.csv", signals.str());
    write_manifest(dir, cfg, seed);
  } catch (const ConfigError& e) {
    std::cerr << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "simulate: " << e.what() << '\n';
    return 3;
  }
  return 0;
}

// ---------------------------------------------------------------------------

namespace {

struct WindowSlice {
  std::string label;
  Eigen::Index begin = 0;  // row range [begin, end)
  Eigen::Index end = 0;
};

std::vector<WindowSlice> make_windows(const MarketPanel& panel, const std::string& kind,
                                      Eigen::Index usable) {
  std::vector<WindowSlice> out;
  if (kind == "full") {
    out.push_back({"full", 0, usable + 1});
    return out;
  }
  if (kind != "annual") throw ConfigError("config: windows must be full or annual");
  std::string year;
  for (Eigen::Index t = 0; t <= usable; ++t) {
    std::string y = panel.dates[t].substr(0, 4);
    if (y != year) {
      out.push_back({y, t, t + 1});
      year = y;
    } else {
      out.back().end = t + 1;
    }
  }
  return out;
}

std::string csv_table(const std::vector<std::string>& tickers,
                      const std::vector<std::string>& cols,
                      const std::vector<std::vector<std::string>>& cells) {
  std::ostringstream out;
  out << "ticker";
  for (const auto& c : cols) out << ',' << c;
  out << '\n';
  for (std::size_t i = 0; i < tickers.size(); ++i) {
    out << tickers[i];
    for (std::size_t j = 0; j < cols.size(); ++j) out << ',' << cells[i][j];
    out << '\n';
  }
  return out.str();
}

}  // namespace

int cmd_calibrate_gmr(const GlobalOptions& opts) {
  RunConfig cfg = opts.config_path.empty() ? RunConfig()
                                           : RunConfig::parse_file(opts.config_path);
  cfg.declare("caps", "");
  cfg.declare("signals", "ema");  // ema | oracle_noise | noise_only | file
  cfg.declare("signals_file", "");
  cfg.declare("ema_gammas", "0.9,0.96");
  cfg.declare("demean", "true");
  cfg.declare("windows", "full");  // full | annual
  cfg.declare("reg_lambda", "1e-2");
  cfg.declare("likelihood", "arithmetic");  // arithmetic | log
  cfg.declare("phi", "0.0");
  cfg.declare("r_f", "0.0");
  cfg.declare("dt", "1.0");
  cfg.declare("min_window_rows", "30");

  const fs::path dir(opts.out_dir);
  try {
    cfg.check_unknown_keys();
    if (cfg.str("caps").empty()) throw ConfigError("config: caps path is required");
    fs::create_directories(dir);

    MarketPanel panel = load_market_caps_file(cfg.str("caps"));
    BuiltSignals sig = build_signals(panel, cfg, opts.seed);

    CalibConfig ccfg;
    ccfg.reg_lambda = cfg.num("reg_lambda");
    ccfg.log_form = cfg.str("likelihood") == "log";
    ccfg.phi_structural = cfg.num("phi");
    ccfg.r_f = cfg.num("r_f");
    ccfg.dt = cfg.num("dt");

    std::vector<WindowSlice> windows = make_windows(panel, cfg.str("windows"), sig.usable);
    const Eigen::Index min_rows = cfg.integer("min_window_rows");
    const Eigen::Index N = panel.n_assets();

    std::vector<std::string> cols;
    for (const auto& w : windows) cols.push_back(w.label);
    std::vector<std::vector<std::string>> kappa_cells(N,
                                                      std::vector<std::string>(cols.size()));
    auto sigma_cells = kappa_cells;
    auto weight_cells = kappa_cells;
    std::vector<std::string> unconverged;

    // per-asset fitted level series over the full usable range
    Mat levels = Mat::Constant(sig.usable + 1, N,
                               std::numeric_limits<double>::quiet_NaN());

    std::vector<CalibResult> results(windows.size());
    auto run_window = [&](std::size_t wi) {
      const WindowSlice& w = windows[wi];
      if (w.end - w.begin < min_rows) return;  // skipped
      MarketPath slice;
      slice.x = panel.caps.middleRows(w.begin, w.end - w.begin);
      slice.z = sig.values.middleRows(w.begin, w.end - w.begin);
      slice.dt = ccfg.dt;
      results[wi] = calibrate(slice, sig.mask, ccfg);
    };
    if (opts.threads > 1) {
      std::vector<std::future<void>> futs;
      for (std::size_t wi = 0; wi < windows.size(); ++wi)
        futs.push_back(std::async(std::launch::async, run_window, wi));
      for (auto& f : futs) f.get();
    } else {
      for (std::size_t wi = 0; wi < windows.size(); ++wi) run_window(wi);
    }

    for (std::size_t wi = 0; wi < windows.size(); ++wi) {
      const WindowSlice& w = windows[wi];
      if (w.end - w.begin < min_rows) {
        for (Eigen::Index i = 0; i < N; ++i) {
          kappa_cells[i][wi] = "skip";
          sigma_cells[i][wi] = "skip";
          weight_cells[i][wi] = "skip";
        }
        continue;
      }
      const CalibResult& res = results[wi];
      for (Eigen::Index i = 0; i < N; ++i) {
        const AssetCalibration& fit = res.assets[i];
        kappa_cells[i][wi] = fmt(fit.kappa);
        sigma_cells[i][wi] = fmt(fit.sigma2);
        std::ostringstream ws;
        for (Eigen::Index j = 0; j < fit.w.size(); ++j)
          ws << (j ? ";" : "") << fit.w[j];
        weight_cells[i][wi] = ws.str();
        if (!fit.converged)
          unconverged.push_back(panel.tickers[i] + "@" + w.label);

        // fitted mean-reversion level theta(z_t) = kdt_theta / (kappa dt)
        GmrParams single;
        single.kappa = Vec::Constant(1, fit.kappa);
        single.w = Mat::Zero(1, sig.values.cols());
        Eigen::Index kk = 0;
        for (Eigen::Index c = 0; c < sig.values.cols(); ++c)
          if (sig.mask(i, c) != 0.0) single.w(0, c) = fit.w[kk++];
        single.sigma_x2 = Vec::Constant(1, fit.sigma2);
        single.phi = Vec::Constant(1, ccfg.phi_structural);
        single.mu = Vec::Zero(1);
        single.r_f = ccfg.r_f;
        single.dt = ccfg.dt;
        for (Eigen::Index t = w.begin; t < w.end; ++t) {
          if (std::abs(fit.kappa * ccfg.dt) < 1e-12) continue;
          levels(t, i) =
              kappa_dt_theta(single, sig.values.row(t).transpose())[0] /
              (fit.kappa * ccfg.dt);
        }
      }
    }

    write_file(dir / "kappa_table.csv", csv_table(panel.tickers, cols, kappa_cells));
    write_file(dir / "sigma2_table.csv", csv_table(panel.tickers, cols, sigma_cells));
    write_file(dir / "weights_table.csv", csv_table(panel.tickers, cols, weight_cells));
    for (Eigen::Index i = 0; i < N; ++i) {
      std::ostringstream out;
      out << "date,cap,level\n";
      for (Eigen::Index t = 0; t <= sig.usable; ++t)
        out << panel.dates[t] << ',' << fmt(panel.caps(t, i)) << ',' << fmt(levels(t, i))
            << '\n';
      write_file(dir / ("fitted_levels_" + panel.tickers[i] + ".csv"), out.str());
    }
    {
      std::ostringstream meta;
      meta << "rescale_factor = " << fmt(panel.rescale_factor) << '\n'
           << "signals = " << sig.note << '\n';
      write_file(dir / "panel_info.txt", meta.str());
    }
    write_manifest(dir, cfg, opts.seed);

    if (!unconverged.empty()) {
      std::cerr << "calibrate-gmr: unconverged fits:";
      for (const auto& u : unconverged) std::cerr << ' ' << u;
      std::cerr << '\n';
      return 4;
    }
  } catch (const ConfigError& e) {
    std::cerr << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    std::cerr << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "calibrate-gmr: " << e.what() << '\n';
    return 3;
  }
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_irl(const GlobalOptions& opts) {
  RunConfig cfg = opts.config_path.empty() ? RunConfig()
                                           : RunConfig::parse_file(opts.config_path);
  cfg.declare("caps", "");
  cfg.declare("signals", "ema");
  cfg.declare("signals_file", "");
  cfg.declare("ema_gammas", "0.9");
  cfg.declare("demean", "true");
  cfg.declare("mode", "market");  // market | investor
  cfg.declare("window_len", "5");
  cfg.declare("actions_file", "");
  cfg.declare("iterations", "50");
  cfg.declare("batch_size", "0");
  cfg.declare("alpha_theta", "0.25");
  cfg.declare("alpha_omega", "0.25");
  cfg.declare("rel_tol", "1e-7");
  cfg.declare("beta0", "0.5");
  cfg.declare("lambda0", "0.5");
  cfg.declare("mu0", "0.01");
  cfg.declare("w0", "0.01");
  cfg.declare("gamma_disc", "0.9");
  cfg.declare("r_f", "0.0");
  cfg.declare("sigma_r", "1e-4");
  cfg.declare("signal_phi", "0.2");
  cfg.declare("sigma_z", "1e-4");
  cfg.declare("fit_w", "true");
  cfg.declare("fit_mu", "true");
  cfg.declare("fit_lambda", "true");
  cfg.declare("fit_beta", "true");
  cfg.declare("prior_a0", "0.01");
  cfg.declare("prior_sigma_p", "0.02");
  cfg.declare("prior_rho", "0.0");
  cfg.declare("sigma_a0", "0.01");
  cfg.declare("sigma_y0", "0.02");
  cfg.declare("sigma_delta0", "0.001");

  const fs::path dir(opts.out_dir);
  try {
    cfg.check_unknown_keys();
    if (cfg.str("caps").empty()) throw ConfigError("config: caps path is required");
    const std::string mode = cfg.str("mode");
    if (mode != "market" && mode != "investor")
      throw ConfigError("config: mode must be market or investor");
    fs::create_directories(dir);

    MarketPanel panel = load_market_caps_file(cfg.str("caps"));
    BuiltSignals sig = build_signals(panel, cfg, opts.seed);
    const Eigen::Index N = panel.n_assets();
    const Eigen::Index Nz = sig.values.cols();

    ModelParams theta0 = ModelParams::scalar_costs(N, Nz, 0.0, 0.0, 0.0);
    theta0.r_f = cfg.num("r_f");
    theta0.W = cfg.num("w0") * sig.mask;
    theta0.mu = Vec::Constant(N, cfg.num("mu0"));
    theta0.Sigma_r = cfg.num("sigma_r") * Mat::Identity(N, N);
    theta0.phi = Vec::Constant(Nz, cfg.num("signal_phi"));
    theta0.Sigma_z = cfg.num("sigma_z") * Mat::Identity(Nz, Nz);
    theta0.lambda = cfg.num("lambda0");
    theta0.gamma_disc = cfg.num("gamma_disc");
    theta0.beta = cfg.num("beta0");
    theta0.validate();

    GaussianPolicy prior = GaussianPolicy::from_scalars(
        2 * N, N + Nz, cfg.num("prior_a0"), 0.0, cfg.num("prior_rho"),
        cfg.num("prior_sigma_p"));
    VariationalParams omega0 = VariationalParams::centered(
        2 * N, N + Nz, cfg.num("sigma_a0"), cfg.num("sigma_y0"), cfg.num("sigma_delta0"));
    EmState init = make_initial_state(theta0, omega0, prior);

    EmConfig ecfg;
    ecfg.max_iter = static_cast<int>(cfg.integer("iterations"));
    ecfg.batch_size = static_cast<int>(cfg.integer("batch_size"));
    ecfg.alpha_theta = cfg.num("alpha_theta");
    ecfg.alpha_omega = cfg.num("alpha_omega");
    ecfg.rel_tol = cfg.num("rel_tol");
    ecfg.seed = opts.seed;
    ecfg.theta_map.fit_W = cfg.flag("fit_w");
    ecfg.theta_map.fit_mu = cfg.flag("fit_mu");
    ecfg.theta_map.fit_lambda = cfg.flag("fit_lambda");
    ecfg.theta_map.fit_beta = cfg.flag("fit_beta");
    ecfg.theta_map.W_mask = sig.mask;

    std::ofstream diag(dir / "diagnostics.csv", std::ios::binary);
    diag << "iteration,free_energy,grad_norm_omega,grad_norm_theta,step_omega,step_theta\n";
    ecfg.diag_stream = &diag;

    EmRunResult result;
    bool complete_data_path = false;
    if (mode == "market") {
      TransitionBatch data;
      for (Eigen::Index t = 0; t + 1 <= sig.usable; ++t) {
        Vec y(N + Nz), yn(N + Nz);
        y << panel.caps.row(t).transpose(), sig.values.row(t).transpose();
        yn << panel.caps.row(t + 1).transpose(), sig.values.row(t + 1).transpose();
        data.push_back(Transition{y, yn, std::nullopt});
      }
      result = ih_if_run(data, ecfg, init);
    } else {
      // investor mode: fixed-length windows; optional observed actions
      std::map<std::string, std::map<std::string, double>> actions;
      if (!cfg.str("actions_file").empty()) {
        std::ifstream in(cfg.str("actions_file"));
        if (!in) throw ConfigError("config: cannot open actions_file");
        std::string line;
        std::getline(in, line);
        if (line != "date,ticker,u")
          throw ConfigError("actions_file: expected header date,ticker,u");
        while (std::getline(in, line)) {
          if (line.empty()) continue;
          std::istringstream ss(line);
          std::string date, ticker, u;
          std::getline(ss, date, ',');
          std::getline(ss, ticker, ',');
          std::getline(ss, u);
          actions[date][ticker] = std::stod(u);
        }
        complete_data_path = true;
      }
      const Eigen::Index L = cfg.integer("window_len");
      if (L < 1) throw ConfigError("config: window_len must be >= 1");
      std::vector<Trajectory> windows;
      for (Eigen::Index start = 0; start + L <= sig.usable; start += L) {
        Trajectory w;
        for (Eigen::Index t = start; t <= start + L; ++t) {
          ExtendedState s;
          s.t = static_cast<int>(t - start);
          s.x = panel.caps.row(t).transpose();
          s.z = sig.values.row(t).transpose();
          w.states.push_back(s);
          if (complete_data_path && t < start + L) {
            Vec u(N);
            auto it = actions.find(panel.dates[t]);
            for (Eigen::Index i = 0; i < N; ++i) {
              if (it == actions.end() || !it->second.count(panel.tickers[i]))
                throw ConfigError("actions_file: missing action for (" + panel.dates[t] +
                                  "," + panel.tickers[i] + ")");
              u[i] = it->second.at(panel.tickers[i]) / panel.rescale_factor;
            }
            w.actions.push_back(Action::from_net(u));
          }
        }
        windows.push_back(std::move(w));
      }
      if (windows.empty()) throw ConfigError("config: no complete windows in the data");
      result = single_investor_run(windows, ecfg, init);
    }

    {
      std::ofstream out(dir / "checkpoint.txt", std::ios::binary);
      save_checkpoint(out, result.state);
    }
    {
      std::ostringstream hist;
      hist << "iteration,free_energy\n";
      for (std::size_t i = 0; i < result.state.history.size(); ++i)
        hist << (i + 1) << ',' << fmt(result.state.history[i]) << '\n';
      write_file(dir / "free_energy.csv", hist.str());
    }
    {
      std::ostringstream rep;
      rep << "mode = " << mode << '\n';
      rep << "iterations = " << result.iterations << '\n';
      rep << "converged = " << (result.converged ? "yes" : "no") << '\n';
      rep << "stop_reason = " << result.stop_reason << '\n';
      if (complete_data_path)
        rep << "estimation = complete-data likelihood (observed actions)\n";
      rep << "rationality index beta = " << fmt(result.state.theta.beta) << '\n';
      rep << "risk aversion lambda = " << fmt(result.state.theta.lambda) << '\n';
      rep << "impact mu =";
      for (Eigen::Index i = 0; i < result.state.theta.mu.size(); ++i)
        rep << ' ' << fmt(result.state.theta.mu[i]);
      rep << '\n' << "loadings W =";
      for (Eigen::Index i = 0; i < result.state.theta.W.rows(); ++i)
        for (Eigen::Index j = 0; j < result.state.theta.W.cols(); ++j)
          if (sig.mask(i, j) != 0.0) rep << ' ' << fmt(result.state.theta.W(i, j));
      rep << '\n';
      rep << "policy A1 max |entry| = "
          << fmt(result.state.policy.A1.cwiseAbs().maxCoeff()) << '\n';
      if (!result.state.history.empty())
        rep << "final free energy = " << fmt(result.state.history.back()) << '\n';
      write_file(dir / "report.txt", rep.str());
    }
    write_manifest(dir, cfg, opts.seed);

    if (result.stop_reason.rfind("failure", 0) == 0) {
      std::cerr << "irl: " << result.stop_reason << " (last checkpoint retained)\n";
      return 5;
    }
  } catch (const ConfigError& e) {
    std::cerr << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    std::cerr << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "irl: " << e.what() << '\n';
    return 5;
  }
  return 0;
}

// ---------------------------------------------------------------------------

namespace {

std::string svg_line_chart(const std::vector<double>& xs,
                           const std::vector<std::vector<double>>& series,
                           const std::vector<std::string>& colors,
                           const std::string& title) {
  const int width = 860, height = 420, margin = 50;
  double lo = 1e300, hi = -1e300;
  for (const auto& s : series)
    for (double v : s)
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
  if (!(hi > lo)) {
    lo -= 1.0;
    hi += 1.0;
  }
  const double x0 = xs.front(), x1 = xs.back();
  auto px = [&](double x) {
    return margin + (x - x0) / (x1 - x0 + 1e-300) * (width - 2 * margin);
  };
  auto py = [&](double y) {
    return height - margin - (y - lo) / (hi - lo) * (height - 2 * margin);
  };
  std::ostringstream out;
  out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='"
      << height << "'>\n";
  out << "<rect width='100%' height='100%' fill='white'/>\n";
  out << "<text x='" << margin << "' y='24' font-size='15'>" << title << "</text>\n";
  out << "<line x1='" << margin << "' y1='" << height - margin << "' x2='"
      << width - margin << "' y2='" << height - margin << "' stroke='black'/>\n";
  out << "<line x1='" << margin << "' y1='" << margin << "' x2='" << margin << "' y2='"
      << height - margin << "' stroke='black'/>\n";
  out << "<text x='4' y='" << py(lo) << "' font-size='11'>" << std::setprecision(4) << lo
      << "</text>\n";
  out << "<text x='4' y='" << py(hi) + 10 << "' font-size='11'>" << std::setprecision(4)
      << hi << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    out << "<polyline fill='none' stroke='" << colors[s] << "' stroke-width='1' points='";
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (!std::isfinite(series[s][i])) continue;
      out << px(xs[i]) << ',' << py(series[s][i]) << ' ';
    }
    out << "'/>\n";
  }
  out << "</svg>\n";
  return out.str();
}

}  // namespace

int cmd_report(const GlobalOptions& opts) {
  RunConfig cfg = opts.config_path.empty() ? RunConfig()
                                           : RunConfig::parse_file(opts.config_path);
  cfg.declare("inputs", "");
  const fs::path dir(opts.out_dir);
  try {
    cfg.check_unknown_keys();
    std::vector<std::string> inputs = parse_names(cfg.str("inputs"));
    if (inputs.empty()) throw ConfigError("config: inputs is required");
    fs::create_directories(dir);

    std::ostringstream rep;
    rep << "calibration summary\n===================\n";
    for (const auto& input : inputs) {
      fs::path in_dir(input);
      if (!fs::exists(in_dir / "manifest.txt"))
        throw ConfigError("report: missing manifest in " + input);
      // a manifest must parse as flat key-value text
      RunConfig::parse_file((in_dir / "manifest.txt").string());
      rep << "\n[" << input << "]\n";
      for (const char* table : {"kappa_table.csv", "sigma2_table.csv"}) {
        fs::path t = in_dir / table;
        if (!fs::exists(t)) throw ConfigError("report: missing " + t.string());
        std::ifstream in(t);
        rep << table << ":\n" << in.rdbuf() << '\n';
      }
      // plot-ready series + svg for each asset with a fitted level
      for (const auto& entry : fs::directory_iterator(in_dir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("fitted_levels_", 0) != 0) continue;
        std::ifstream in(entry.path());
        std::string line;
        std::getline(in, line);
        std::vector<double> xs;
        std::vector<double> cap, level;
        while (std::getline(in, line)) {
          std::istringstream ss(line);
          std::string date, c, l;
          std::getline(ss, date, ',');
          std::getline(ss, c, ',');
          std::getline(ss, l);
          xs.push_back(static_cast<double>(xs.size()));
          cap.push_back(std::stod(c));
          level.push_back(l == "nan" || l == "-nan" ? std::nan("") : std::stod(l));
        }
        if (xs.empty()) continue;
        std::string ticker = name.substr(14, name.size() - 18);
        write_file(dir / (ticker + "_level_vs_cap.svg"),
                   svg_line_chart(xs, {cap, level}, {"steelblue", "darkorange"},
                                  ticker + ": market cap vs estimated mean level"));
        std::ostringstream csv;
        csv << "index,cap,level\n";
        for (std::size_t i = 0; i < xs.size(); ++i)
          csv << xs[i] << ',' << fmt(cap[i]) << ',' << fmt(level[i]) << '\n';
        write_file(dir / (ticker + "_level_vs_cap.csv"), csv.str());
      }
    }
    write_file(dir / "report.txt", rep.str());
    write_manifest(dir, cfg, opts.seed);
  } catch (const ConfigError& e) {
    std::cerr << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "report: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

// ---------------------------------------------------------------------------

int run(const std::vector<std::string>& args) {
  CLI::App app{"market dynamics toolkit: simulation, calibration, inverse RL"};
  app.require_subcommand(1);

  GlobalOptions opts;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opts.config_path, "flat key = value configuration file");
    sub->add_option("--out", opts.out_dir, "output directory")->required();
    sub->add_option("--seed", opts.seed, "random seed");
    sub->add_option("--threads", opts.threads, "worker threads");
  };
  CLI::App* sim = app.add_subcommand("simulate", "simulate market paths and signals");
  CLI::App* cal = app.add_subcommand("calibrate-gmr", "maximum-likelihood calibration");
  CLI::App* irl = app.add_subcommand("irl", "variational EM inverse RL");
  CLI::App* rep = app.add_subcommand("report", "merge run outputs into a summary");
  for (CLI::App* sub : {sim, cal, irl, rep}) add_common(sub);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (sim->parsed()) return cmd_simulate(opts);
    if (cal->parsed()) return cmd_calibrate_gmr(opts);
    if (irl->parsed()) return cmd_irl(opts);
    if (rep->parsed()) return cmd_report(opts);
  } catch (const ConfigError& e) {
    std::cerr << e.what() << '\n';
    return 2;
  }
  return 2;
}

}  // namespace mirl::cli
