#pragma once

// Flat key/value text files: `key = value` lines, optional `[section]`
// headers that prefix following keys as `section.key`, `#` comments.
// Used for run configs, dataset manifests, and report files.

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace dlbl {

class KeyValues {
 public:
  KeyValues() = default;

  static KeyValues parse(const std::string& text, const std::string& origin = "<text>");
  static KeyValues read(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  std::optional<std::string> get(const std::string& key) const;
  // The typed getters throw ConfigError on malformed values; they mark the key
  // as consumed.
  std::string str(const std::string& key, const std::string& fallback) const;
  std::string require(const std::string& key) const;
  long long integer(const std::string& key, long long fallback) const;
  double real(const std::string& key, double fallback) const;
  bool boolean(const std::string& key, bool fallback) const;

  void set(const std::string& key, const std::string& value);
  const std::map<std::string, std::string>& entries() const { return values_; }
  // Keys starting with `prefix`.
  std::vector<std::string> keys_with_prefix(const std::string& prefix) const;

  // Throws ConfigError naming every key that no getter has read.
  void reject_unconsumed() const;

  std::string dump() const;
  void write(const std::filesystem::path& path) const;

 private:
  std::map<std::string, std::string> values_;
  std::map<std::string, int> lines_;
  std::string origin_;
  mutable std::set<std::string> consumed_;
};

}  // namespace dlbl
