#pragma once

// Flat key=value configuration. Lines are `section.key=value`, `#` starts a
// comment, blank lines are ignored. Every key a run consumes is tracked so
// misspelled keys surface as errors instead of silently keeping defaults.

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace scanenc {

class KvConfig {
 public:
  KvConfig() = default;

  static KvConfig parse_string(const std::string& text);
  static KvConfig parse_file(const std::string& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string get_str(const std::string& key, const std::string& def) const;
  double get_f64(const std::string& key, double def) const;
  std::int64_t get_int(const std::string& key, std::int64_t def) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t def) const;
  bool get_bool(const std::string& key, bool def) const;

  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  // One sorted `key=value` line per entry, newline-terminated.
  std::string serialize() const;

  // Keys present in the source that no getter consumed.
  std::vector<std::string> unread_keys() const;
  // Throws ValueError naming every unread key.
  void require_all_read() const;

 private:
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> read_;
};

}  // namespace scanenc
