#include "scanenc/config.hpp"

#include "scanenc/tensor.hpp"  // ValueError

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

namespace scanenc {

namespace {

std::string strip(const std::string& s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

}  // namespace

KvConfig KvConfig::parse_string(const std::string& text) {
  KvConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = strip(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValueError("config line " + std::to_string(lineno) + " is not key=value: " + line);
    std::string key = strip(line.substr(0, eq));
    std::string value = strip(line.substr(eq + 1));
    if (key.empty())
      throw ValueError("config line " + std::to_string(lineno) + " has an empty key");
    if (cfg.values_.count(key))
      throw ValueError("duplicate config key: " + key);
    cfg.values_[key] = value;
  }
  return cfg;
}

KvConfig KvConfig::parse_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValueError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_string(ss.str());
}

std::string KvConfig::get_str(const std::string& key, const std::string& def) const {
  read_.insert(key);
  auto it = values_.find(key);
  return it == values_.end() ? def : it->second;
}

double KvConfig::get_f64(const std::string& key, double def) const {
  read_.insert(key);
  auto it = values_.find(key);
  if (it == values_.end()) return def;
  try {
    size_t pos = 0;
    double v = std::stod(it->second, &pos);
    if (pos == it->second.size()) return v;
  } catch (const std::exception&) {
  }
  throw ValueError("config key " + key + " is not a number: " + it->second);
}

std::int64_t KvConfig::get_int(const std::string& key, std::int64_t def) const {
  read_.insert(key);
  auto it = values_.find(key);
  if (it == values_.end()) return def;
  try {
    size_t pos = 0;
    std::int64_t v = std::stoll(it->second, &pos);
    if (pos == it->second.size()) return v;
  } catch (const std::exception&) {
  }
  throw ValueError("config key " + key + " is not an integer: " + it->second);
}

std::uint64_t KvConfig::get_u64(const std::string& key, std::uint64_t def) const {
  read_.insert(key);
  auto it = values_.find(key);
  if (it == values_.end()) return def;
  try {
    size_t pos = 0;
    std::uint64_t v = std::stoull(it->second, &pos);
    if (pos == it->second.size()) return v;
  } catch (const std::exception&) {
  }
  throw ValueError("config key " + key + " is not an integer: " + it->second);
}

bool KvConfig::get_bool(const std::string& key, bool def) const {
  read_.insert(key);
  auto it = values_.find(key);
  if (it == values_.end()) return def;
  std::string v = it->second;
  std::transform(v.begin(), v.end(), v.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ValueError("config key " + key + " is not a boolean: " + it->second);
}

std::string KvConfig::serialize() const {
  std::ostringstream os;
  for (const auto& [k, v] : values_) os << k << '=' << v << '\n';
  return os.str();
}

std::vector<std::string> KvConfig::unread_keys() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : values_)
    if (!read_.count(k)) out.push_back(k);
  return out;
}

void KvConfig::require_all_read() const {
  auto unread = unread_keys();
  if (unread.empty()) return;
  std::string msg = "unknown config keys:";
  for (const auto& k : unread) msg += " " + k;
  throw ValueError(msg);
}

}  // namespace scanenc
