#pragma once

#include <map>
#include <string>

namespace loma {

// Flat "section.key = value" configuration with an INI-style file format
// ([section] headers, # comments). Every run writes its resolved snapshot
// back into the output directory.
class KeyValueConfig {
 public:
  static KeyValueConfig from_file(const std::string& path);
  static KeyValueConfig from_text(const std::string& text);

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string get_str(const std::string& key, const std::string& fallback) const;
  long get_int(const std::string& key, long fallback) const;
  double get_f64(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  // Grouped by section, keys sorted; parseable by from_text.
  std::string to_ini() const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace loma
