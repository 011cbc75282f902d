#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace reidforge {

/// Flat key=value text with [section] headers. Keys are addressed as
/// "section.key"; keys before the first header live at the top level.
/// '#' and ';' start comment lines.
class Config {
 public:
  static Config parse(std::istream& in);
  static Config load(const std::string& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  std::string require_string(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  std::size_t get_size(const std::string& key, std::size_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  /// Comma-separated list; empty when absent.
  std::vector<std::string> get_list(const std::string& key) const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

/// Applies REIDFORGE_SEED, when set, to the top-level "seed" key.
void apply_env_overrides(Config& config);

}  // namespace reidforge
