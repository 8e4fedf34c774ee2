#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "ctxcomp/errors.hpp"

namespace ctxcomp {

// Minimal TOML subset: [sections], key = value with integers, floats,
// booleans and quoted strings; # comments. Enough for a lab config file.
class ConfigFile {
 public:
  static ConfigFile parse_file(const std::string& path);
  static ConfigFile parse_string(const std::string& text);

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  std::string get_string(const std::string& key, const std::string& fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

 private:
  std::map<std::string, std::string> values_;  // "section.key" -> raw value
};

}  // namespace ctxcomp
