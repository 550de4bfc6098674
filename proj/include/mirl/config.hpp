#pragma once

#include <cstdint>
#include <stdexcept>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace mirl {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flat key-value run configuration ("key = value" lines, '#' comments).
// Commands declare their schema up front; unknown keys are rejected and every
// resolved value (defaults included) is echoed next to the outputs.
class RunConfig {
 public:
  RunConfig() = default;
  static RunConfig parse(std::istream& in);
  static RunConfig parse_file(const std::string& path);

  void declare(const std::string& key, const std::string& default_value);
  // Throws ConfigError when a file key was never declared.
  void check_unknown_keys() const;

  bool has(const std::string& key) const;
  std::string str(const std::string& key) const;
  double num(const std::string& key) const;
  std::int64_t integer(const std::string& key) const;
  bool flag(const std::string& key) const;

  void set(const std::string& key, const std::string& value);

  // All declared keys with their resolved values, sorted by key.
  std::string resolved() const;

 private:
  std::map<std::string, std::string> values_;    // file-provided
  std::map<std::string, std::string> declared_;  // schema with defaults
};

}  // namespace mirl
