#pragma once

// A small TOML subset for experiment files: [section] headers, `key = value`
// lines, `#` comments, and values that are strings, integers, floats, booleans
// or single-line arrays of those. Keys are stored as "section.key".

#include <cctype>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace oplab {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ConfigValue {
  using Scalar = std::variant<std::string, std::int64_t, double, bool>;
  std::variant<Scalar, std::vector<Scalar>> v;
  int line = 0;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

// Drops a trailing comment, ignoring '#' inside quoted strings.
inline std::string_view strip_comment(std::string_view s) {
  bool quoted = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"') quoted = !quoted;
    if (s[i] == '#' && !quoted) return s.substr(0, i);
  }
  return s;
}

inline ConfigValue::Scalar parse_scalar(std::string_view s, int line) {
  s = trim(s);
  auto fail = [&](const std::string& why) -> ConfigError {
    return ConfigError("line " + std::to_string(line) + ": " + why + " '" + std::string(s) + "'");
  };
  if (s.empty()) throw fail("missing value");
  if (s.front() == '"') {
    if (s.size() < 2 || s.back() != '"') throw fail("unterminated string");
    return std::string(s.substr(1, s.size() - 2));
  }
  if (s == "true") return true;
  if (s == "false") return false;
  std::string cleaned;
  for (char c : s) {
    if (c != '_') cleaned.push_back(c);
  }
  const bool floating = cleaned.find_first_of(".eE") != std::string::npos || cleaned == "inf" || cleaned == "nan";
  if (!floating) {
    std::int64_t i = 0;
    auto [p, ec] = std::from_chars(cleaned.data(), cleaned.data() + cleaned.size(), i);
    if (ec == std::errc() && p == cleaned.data() + cleaned.size()) return i;
    throw fail("not a value");
  }
  std::istringstream in(cleaned);
  double d = 0.0;
  in >> d;
  if (!in || !in.eof()) throw fail("not a number");
  return d;
}

}  // namespace detail

class ConfigFile {
 public:
  static ConfigFile parse(std::string_view text) {
    ConfigFile cfg;
    std::string section;
    int line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
      const std::size_t end = std::min(text.find('\n', pos), text.size());
      ++line_no;
      const std::string_view line = detail::trim(detail::strip_comment(text.substr(pos, end - pos)));
      pos = end + 1;
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError("line " + std::to_string(line_no) + ": malformed section header");
        section = std::string(detail::trim(line.substr(1, line.size() - 2)));
        if (section.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty section name");
        continue;
      }
      const std::size_t eq = line.find('=');
      if (eq == std::string_view::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
      const std::string key_part(detail::trim(line.substr(0, eq)));
      if (key_part.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
      const std::string key = section.empty() ? key_part : section + "." + key_part;
      const std::string_view rhs = detail::trim(line.substr(eq + 1));
      ConfigValue value;
      value.line = line_no;
      if (!rhs.empty() && rhs.front() == '[') {
        if (rhs.back() != ']') throw ConfigError("line " + std::to_string(line_no) + ": unterminated array");
        std::vector<ConfigValue::Scalar> items;
        const std::string_view body = detail::trim(rhs.substr(1, rhs.size() - 2));
        std::size_t start = 0;
        bool quoted = false;
        for (std::size_t i = 0; i <= body.size(); ++i) {
          if (i < body.size() && body[i] == '"') quoted = !quoted;
          if (i == body.size() || (body[i] == ',' && !quoted)) {
            const auto item = detail::trim(body.substr(start, i - start));
            if (!item.empty()) items.push_back(detail::parse_scalar(item, line_no));
            start = i + 1;
          }
        }
        value.v = std::move(items);
      } else {
        value.v = detail::parse_scalar(rhs, line_no);
      }
      if (cfg.values_.count(key)) throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
      cfg.values_.emplace(key, std::move(value));
    }
    return cfg;
  }

  static ConfigFile load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse(buffer.str());
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    return get<std::string>(key, fallback, "a string");
  }

  bool get_bool(const std::string& key, bool fallback) const { return get<bool>(key, fallback, "a boolean"); }

  std::int64_t get_int(const std::string& key, std::int64_t fallback) const {
    return get<std::int64_t>(key, fallback, "an integer");
  }

  double get_double(const std::string& key, double fallback) const {
    const auto it = lookup(key);
    if (!it) return fallback;
    const auto* s = std::get_if<ConfigValue::Scalar>(&it->v);
    if (s) {
      if (const auto* d = std::get_if<double>(s)) return *d;
      if (const auto* i = std::get_if<std::int64_t>(s)) return static_cast<double>(*i);
    }
    throw type_error(key, *it, "a number");
  }

  std::vector<std::string> get_strings(const std::string& key, const std::vector<std::string>& fallback) const {
    const auto it = lookup(key);
    if (!it) return fallback;
    const auto* list = std::get_if<std::vector<ConfigValue::Scalar>>(&it->v);
    if (!list) throw type_error(key, *it, "an array of strings");
    std::vector<std::string> out;
    for (const auto& item : *list) {
      const auto* s = std::get_if<std::string>(&item);
      if (!s) throw type_error(key, *it, "an array of strings");
      out.push_back(*s);
    }
    return out;
  }

  /// Throws on any key outside `known`; catches typos in experiment files.
  void require_known(const std::set<std::string>& known) const {
    for (const auto& [key, value] : values_) {
      if (!known.count(key)) {
        throw ConfigError("line " + std::to_string(value.line) + ": unknown key '" + key + "'");
      }
    }
  }

 private:
  const ConfigValue* lookup(const std::string& key) const {
    const auto it = values_.find(key);
    return it == values_.end() ? nullptr : &it->second;
  }

  static ConfigError type_error(const std::string& key, const ConfigValue& v, const char* expected) {
    return ConfigError("line " + std::to_string(v.line) + ": '" + key + "' must be " + expected);
  }

  template <class T>
  T get(const std::string& key, const T& fallback, const char* expected) const {
    const auto it = lookup(key);
    if (!it) return fallback;
    if (const auto* s = std::get_if<ConfigValue::Scalar>(&it->v)) {
      if (const auto* t = std::get_if<T>(s)) return *t;
    }
    throw type_error(key, *it, expected);
  }

  std::map<std::string, ConfigValue> values_;
};

}  // namespace oplab
