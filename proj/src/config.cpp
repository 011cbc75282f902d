#include "reidforge/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <istream>

#include "reidforge/errors.hpp"

namespace reidforge {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

}  // namespace

Config Config::parse(std::istream& in) {
  Config cfg;
  std::string section;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t.front() == '#' || t.front() == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']' || t.size() < 3) throw ParseError(lineno, "malformed section header");
      section = trim(std::string_view(t).substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ParseError(lineno, "expected key = value");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    if (key.empty()) throw ParseError(lineno, "empty key");
    const std::string full = section.empty() ? key : section + "." + key;
    if (cfg.has(full)) throw ParseError(lineno, "duplicate key '" + full + "'");
    cfg.values_[full] = trim(std::string_view(t).substr(eq + 1));
  }
  return cfg;
}

Config Config::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(FormatErrorKind::kIo, "cannot open config '" + path + "'");
  return parse(in);
}

std::string Config::get_string(const std::string& key, const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

std::string Config::require_string(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end() || it->second.empty()) throw ParseError(0, "missing required config key '" + key + "'");
  return it->second;
}

double Config::get_double(const std::string& key, double fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const auto& s = it->second;
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw ParseError(0, "key '" + key + "' is not a number");
  return v;
}

std::int64_t Config::get_int(const std::string& key, std::int64_t fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const auto& s = it->second;
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw ParseError(0, "key '" + key + "' is not an integer");
  return v;
}

std::size_t Config::get_size(const std::string& key, std::size_t fallback) const {
  const auto v = get_int(key, static_cast<std::int64_t>(fallback));
  if (v < 0) throw ParseError(0, "key '" + key + "' must be non-negative");
  return static_cast<std::size_t>(v);
}

bool Config::get_bool(const std::string& key, bool fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const auto& s = it->second;
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ParseError(0, "key '" + key + "' is not a boolean");
}

std::vector<std::string> Config::get_list(const std::string& key) const {
  std::vector<std::string> out;
  auto it = values_.find(key);
  if (it == values_.end()) return out;
  std::string_view rest(it->second);
  while (!rest.empty()) {
    const auto pos = rest.find(',');
    auto item = trim(rest.substr(0, pos));
    if (!item.empty()) out.push_back(std::move(item));
    if (pos == std::string_view::npos) break;
    rest.remove_prefix(pos + 1);
  }
  return out;
}

void apply_env_overrides(Config& config) {
  if (const char* seed = std::getenv("REIDFORGE_SEED"); seed != nullptr && *seed != '\0') {
    config.set("seed", seed);
    (void)config.get_int("seed", 0);  // reject a non-integer override early
  }
}

}  // namespace reidforge
