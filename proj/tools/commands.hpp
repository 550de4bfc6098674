#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mirl/config.hpp"

namespace mirl::cli {

struct GlobalOptions {
  std::string config_path;
  std::string out_dir = ".";
  std::uint64_t seed = 0;
  bool seed_given = false;
  int threads = 1;
};

// exit codes: 0 success, 2 config/input error, 3 numeric failure,
// 4 unconverged assets, 5 EM failure
int cmd_simulate(const GlobalOptions& opts);
int cmd_calibrate_gmr(const GlobalOptions& opts);
int cmd_irl(const GlobalOptions& opts);
int cmd_report(const GlobalOptions& opts);

// Argument-vector entry point (the binary's main forwards argv here).
int run(const std::vector<std::string>& args);

}  // namespace mirl::cli
