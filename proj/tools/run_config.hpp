// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

// Flat key-value run configuration with documented defaults.

#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace cmivld::cli {

enum class KeyType { kInt, kUInt, kDouble, kString, kBool };

struct KeySpec {
  const char* name;
  KeyType type;
  const char* default_value;
  const char* help;
};

// Every recognized key, in documentation order.
const std::vector<KeySpec>& key_specs();
const KeySpec* find_key(const std::string& name);

// A malformed or unknown setting.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A config file that cannot be opened.
class MissingFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class RunConfig {
 public:
  // All keys at their defaults.
  RunConfig();

  // Parses `key = value` lines; `#` starts a comment. Unknown keys and
  // malformed values throw ConfigError.
  void merge_text(const std::string& text, const std::string& origin);
  // A `key = value` file, or a run.json manifest whose "config" object is used.
  void merge_file(const std::string& path);
  void merge_json(const nlohmann::json& config, const std::string& origin);
  void set(const std::string& key, const std::string& value, const std::string& origin);

  const std::string& str(const std::string& key) const;
  long long integer(const std::string& key) const;
  std::uint64_t uinteger(const std::string& key) const;
  double real(const std::string& key) const;
  bool boolean(const std::string& key) const;
  // Where the value came from: "default", a file path, or "flag".
  const std::string& origin(const std::string& key) const;

  nlohmann::json to_json() const;
  std::string to_text() const;

 private:
  std::map<std::string, std::string> values_;
  std::map<std::string, std::string> origins_;
};

// Comma-separated numbers; "a,b,...,z" expands an arithmetic progression
// whose step is b - a.
std::vector<double> parse_value_list(const std::string& text);

}  // namespace cmivld::cli
