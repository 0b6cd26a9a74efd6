#pragma once

// Flat `key = value` records. Nested keys are dotted
// (model.stages.0.out_channels = 16); '#' starts a comment.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "rethseg/tensor.hpp"

namespace rethseg {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class KeyValues {
 public:
  static KeyValues parse(std::string_view text) {
    KeyValues kv;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
      const std::size_t end = std::min(text.find('\n', pos), text.size());
      std::string_view line = text.substr(pos, end - pos);
      pos = end + 1;
      ++line_no;
      if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) {
        if (end == text.size()) break;
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) {
        throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value', got '" + std::string(line) + "'");
      }
      const std::string key(trim(line.substr(0, eq)));
      if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
      kv.set(key, std::string(trim(line.substr(eq + 1))));
      if (end == text.size()) break;
    }
    return kv;
  }

  static KeyValues load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse(buffer.str());
  }

  [[nodiscard]] std::string dump() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  template <class V>
  void set_number(const std::string& key, V value) {
    if constexpr (std::is_floating_point_v<V>) {
      std::ostringstream os;
      os.precision(17);
      os << value;
      values_[key] = os.str();
    } else {
      values_[key] = std::to_string(value);
    }
  }

  [[nodiscard]] bool contains(const std::string& key) const { return values_.count(key) != 0; }

  [[nodiscard]] const std::string& get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing config key '" + key + "'");
    return it->second;
  }

  [[nodiscard]] std::string get_or(const std::string& key, const std::string& fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  template <class V>
  [[nodiscard]] V number(const std::string& key) const {
    return parse_number<V>(key, get(key));
  }

  template <class V>
  [[nodiscard]] V number_or(const std::string& key, V fallback) const {
    return contains(key) ? number<V>(key) : fallback;
  }

  /// Keys sharing `prefix.`, with the prefix stripped.
  [[nodiscard]] KeyValues subtree(const std::string& prefix) const {
    KeyValues out;
    const std::string p = prefix + ".";
    for (const auto& [k, v] : values_) {
      if (k.rfind(p, 0) == 0) out.values_[k.substr(p.size())] = v;
    }
    return out;
  }

  void merge(const KeyValues& other, const std::string& prefix = "") {
    for (const auto& [k, v] : other.values_) values_[prefix.empty() ? k : prefix + "." + k] = v;
  }

  [[nodiscard]] const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  static std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
  }

  template <class V>
  static V parse_number(const std::string& key, const std::string& text) {
    V value{};
    if constexpr (std::is_floating_point_v<V>) {
      try {
        std::size_t used = 0;
        const double d = std::stod(text, &used);
        if (used != text.size()) throw std::invalid_argument(text);
        return static_cast<V>(d);
      } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': '" + text + "' is not a number");
      }
    } else {
      const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
      if (ec != std::errc() || ptr != text.data() + text.size()) {
        throw ConfigError("config key '" + key + "': '" + text + "' is not an integer");
      }
      return value;
    }
  }

  std::map<std::string, std::string> values_;
};

inline std::vector<std::string> split(std::string_view text, char sep) {
  std::vector<std::string> parts;
  std::size_t pos = 0;
  while (true) {
    const auto next = text.find(sep, pos);
    std::string_view piece = text.substr(pos, next == std::string_view::npos ? std::string_view::npos : next - pos);
    while (!piece.empty() && (piece.front() == ' ' || piece.front() == '\t')) piece.remove_prefix(1);
    while (!piece.empty() && (piece.back() == ' ' || piece.back() == '\t')) piece.remove_suffix(1);
    if (!piece.empty()) parts.emplace_back(piece);
    if (next == std::string_view::npos) break;
    pos = next + 1;
  }
  return parts;
}

}  // namespace rethseg
