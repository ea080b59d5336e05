/* Copyright 2026 The mfsr Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

// Plain hierarchical config text (a TOML subset):
//
//   # comment
//   [section.sub]
//   key = 12            # int
//   rate = 3e-4         # real
//   flag = true
//   name = "text"
//   widths = [16, 16]
//
// Values are kept as text under dotted keys ("section.sub.key") and decoded
// on demand into bound struct fields.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "mfsr/io/archive.hpp"

namespace mfsr::io {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline std::string strip_comment(const std::string& s) {
  bool quoted = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"') quoted = !quoted;
    if (s[i] == '#' && !quoted) return s.substr(0, i);
  }
  return s;
}

inline bool valid_key(const std::string& k) {
  return !k.empty() && std::all_of(k.begin(), k.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' || c == '-';
  });
}

}  // namespace detail

class Config {
 public:
  static Config parse(const std::string& text, const std::string& origin = "<config>") {
    Config cfg;
    std::istringstream in(text);
    std::string raw, section;
    int lineno = 0;
    while (std::getline(in, raw)) {
      ++lineno;
      const std::string line = detail::trim(detail::strip_comment(raw));
      if (line.empty()) continue;
      auto fail = [&](const std::string& why) {
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + why);
      };
      if (line.front() == '[') {
        if (line.back() != ']') fail("unterminated section header");
        section = detail::trim(line.substr(1, line.size() - 2));
        if (!detail::valid_key(section)) fail("invalid section name '" + section + "'");
        continue;
      }
      const std::size_t eq = line.find('=');
      if (eq == std::string::npos) fail("expected 'key = value'");
      const std::string key = detail::trim(line.substr(0, eq));
      const std::string value = detail::trim(line.substr(eq + 1));
      if (!detail::valid_key(key)) fail("invalid key '" + key + "'");
      if (value.empty()) fail("missing value for '" + key + "'");
      const std::string full = section.empty() ? key : section + "." + key;
      if (cfg.values_.count(full)) fail("duplicate key '" + full + "'");
      cfg.values_[full] = value;
    }
    return cfg;
  }

  static Config load(const std::filesystem::path& path) {
    return parse(read_file(path), path.string());
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& raw) { values_[key] = raw; }
  const std::map<std::string, std::string>& values() const { return values_; }

  // Later entries win.
  void merge(const Config& other) {
    for (const auto& [k, v] : other.values_) values_[k] = v;
  }

  std::vector<std::string> keys_under(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& [k, _] : values_)
      if (k.rfind(prefix + ".", 0) == 0) out.push_back(k);
    return out;
  }

  const std::string& raw(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing config key '" + key + "'");
    return it->second;
  }

 private:
  std::map<std::string, std::string> values_;
};

namespace detail {

inline long long parse_int(const std::string& key, const std::string& s) {
  long long v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + s + "'");
  }
  return v;
}

inline double parse_real(const std::string& key, const std::string& s) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + s + "'");
  }
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + s + "'");
}

inline std::string parse_string(const std::string& key, const std::string& s) {
  if (s.size() < 2 || s.front() != '"' || s.back() != '"') {
    throw ConfigError("config key '" + key + "': expected a quoted string, got '" + s + "'");
  }
  return s.substr(1, s.size() - 2);
}

inline std::vector<std::string> parse_list(const std::string& key, const std::string& s) {
  if (s.size() < 2 || s.front() != '[' || s.back() != ']') {
    throw ConfigError("config key '" + key + "': expected a [list], got '" + s + "'");
  }
  std::vector<std::string> out;
  std::string inner = trim(s.substr(1, s.size() - 2));
  if (inner.empty()) return out;
  std::istringstream is(inner);
  std::string item;
  while (std::getline(is, item, ',')) out.push_back(trim(item));
  return out;
}

}  // namespace detail

// Two-way binding between dotted keys and struct fields.
class FieldSet {
 public:
  using Ref = std::variant<int*, std::int64_t*, std::uint64_t*, double*, bool*, std::string*,
                           std::vector<int>*, std::vector<double>*>;

  FieldSet& add(const std::string& key, Ref ref) {
    fields_.emplace_back(key, ref);
    return *this;
  }

  // Reads every bound key present in `cfg`; unknown keys under `prefix` are
  // rejected so typos do not silently fall back to defaults.
  void read(const Config& cfg, const std::string& prefix) const {
    std::set<std::string> known;
    for (const auto& [key, ref] : fields_) {
      const std::string full = prefix + "." + key;
      known.insert(full);
      if (!cfg.has(full)) continue;
      const std::string& s = cfg.raw(full);
      std::visit(
          [&](auto* p) {
            using P = std::remove_pointer_t<decltype(p)>;
            if constexpr (std::is_same_v<P, int>) {
              *p = static_cast<int>(detail::parse_int(full, s));
            } else if constexpr (std::is_same_v<P, std::int64_t>) {
              *p = detail::parse_int(full, s);
            } else if constexpr (std::is_same_v<P, std::uint64_t>) {
              const long long v = detail::parse_int(full, s);
              if (v < 0) throw ConfigError("config key '" + full + "': must be >= 0");
              *p = static_cast<std::uint64_t>(v);
            } else if constexpr (std::is_same_v<P, double>) {
              *p = detail::parse_real(full, s);
            } else if constexpr (std::is_same_v<P, bool>) {
              *p = detail::parse_bool(full, s);
            } else if constexpr (std::is_same_v<P, std::string>) {
              *p = detail::parse_string(full, s);
            } else if constexpr (std::is_same_v<P, std::vector<int>>) {
              p->clear();
              for (const auto& item : detail::parse_list(full, s))
                p->push_back(static_cast<int>(detail::parse_int(full, item)));
            } else {
              p->clear();
              for (const auto& item : detail::parse_list(full, s))
                p->push_back(detail::parse_real(full, item));
            }
          },
          ref);
    }
    for (const auto& k : cfg.keys_under(prefix)) {
      if (!known.count(k)) throw ConfigError("unknown config key '" + k + "'");
    }
  }

  // Resolved values as a [prefix] section.
  std::string write(const std::string& prefix) const {
    std::ostringstream os;
    os << "[" << prefix << "]\n";
    for (const auto& [key, ref] : fields_) {
      os << key << " = ";
      std::visit(
          [&](auto* p) {
            using P = std::remove_pointer_t<decltype(p)>;
            if constexpr (std::is_same_v<P, double>) {
              os << format_double(*p);
            } else if constexpr (std::is_same_v<P, bool>) {
              os << (*p ? "true" : "false");
            } else if constexpr (std::is_same_v<P, std::string>) {
              os << '"' << *p << '"';
            } else if constexpr (std::is_same_v<P, std::vector<int>>) {
              os << '[';
              for (std::size_t i = 0; i < p->size(); ++i) os << (i ? ", " : "") << (*p)[i];
              os << ']';
            } else if constexpr (std::is_same_v<P, std::vector<double>>) {
              os << '[';
              for (std::size_t i = 0; i < p->size(); ++i) os << (i ? ", " : "") << format_double((*p)[i]);
              os << ']';
            } else {
              os << *p;
            }
          },
          ref);
      os << '\n';
    }
    return os.str();
  }

 private:
  std::vector<std::pair<std::string, Ref>> fields_;
};

}  // namespace mfsr::io
