#include "mirl/config.hpp"

#include <fstream>
#include <sstream>

namespace mirl {

namespace {
void trim(std::string& s) {
  s.erase(0, s.find_first_not_of(" \t\r"));
  auto last = s.find_last_not_of(" \t\r");
  s.erase(last == std::string::npos ? 0 : last + 1);
}
}  // namespace

RunConfig RunConfig::parse(std::istream& in) {
  RunConfig cfg;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    trim(line);
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: missing '=' at line " + std::to_string(lineno));
    std::string key = line.substr(0, eq);
    std::string val = line.substr(eq + 1);
    trim(key);
    trim(val);
    if (key.empty()) throw ConfigError("config: empty key at line " + std::to_string(lineno));
    if (cfg.values_.count(key))
      throw ConfigError("config: duplicate key '" + key + "'");
    cfg.values_[key] = val;
  }
  return cfg;
}

RunConfig RunConfig::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  return parse(in);
}

void RunConfig::declare(const std::string& key, const std::string& default_value) {
  declared_[key] = default_value;
}

void RunConfig::check_unknown_keys() const {
  for (const auto& [key, _] : values_)
    if (!declared_.count(key)) throw ConfigError("config: unknown key '" + key + "'");
}

bool RunConfig::has(const std::string& key) const { return values_.count(key) > 0; }

std::string RunConfig::str(const std::string& key) const {
  auto it = values_.find(key);
  if (it != values_.end()) return it->second;
  auto d = declared_.find(key);
  if (d != declared_.end()) return d->second;
  throw ConfigError("config: undeclared key '" + key + "'");
}

double RunConfig::num(const std::string& key) const {
  try {
    return std::stod(str(key));
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' is not a number");
  }
}

std::int64_t RunConfig::integer(const std::string& key) const {
  try {
    return std::stoll(str(key));
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' is not an integer");
  }
}

bool RunConfig::flag(const std::string& key) const {
  std::string v = str(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config: key '" + key + "' is not a boolean");
}

void RunConfig::set(const std::string& key, const std::string& value) {
  values_[key] = value;
}

std::string RunConfig::resolved() const {
  std::ostringstream out;
  for (const auto& [key, def] : declared_) {
    auto it = values_.find(key);
    out << key << " = " << (it != values_.end() ? it->second : def) << '\n';
  }
  return out.str();
}

}  // namespace mirl
