// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

#include "run_config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace cmivld::cli {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
bool parse_number(const std::string& s, T& out) {
  const char* first = s.data();
  const char* last = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last;
}

bool parse_bool(const std::string& s, bool& out) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") {
    out = true;
    return true;
  }
  if (s == "false" || s == "0" || s == "no" || s == "off") {
    out = false;
    return true;
  }
  return false;
}

void check_value(const KeySpec& spec, const std::string& value, const std::string& origin) {
  bool ok = true;
  switch (spec.type) {
    case KeyType::kInt: {
      long long v = 0;
      ok = parse_number(value, v);
      break;
    }
    case KeyType::kUInt: {
      std::uint64_t v = 0;
      ok = parse_number(value, v);
      break;
    }
    case KeyType::kDouble: {
      double v = 0;
      ok = parse_number(value, v) && std::isfinite(v);
      break;
    }
    case KeyType::kBool: {
      bool v = false;
      ok = parse_bool(value, v);
      break;
    }
    case KeyType::kString:
      break;
  }
  if (!ok) {
    throw ConfigError(origin + ": invalid value '" + value + "' for key '" + spec.name + "'");
  }
}

}  // namespace

const std::vector<KeySpec>& key_specs() {
  static const std::vector<KeySpec> specs{
      // Run plumbing.
      {"seed", KeyType::kUInt, "0", "root seed; every random stream derives from it"},
      {"out_dir", KeyType::kString, "runs/latest", "run directory (run.json, results.jsonl)"},
      {"corpus_dir", KeyType::kString, "data/corpus", "corpus root with train/purifier/heldout"},
      {"model_path", KeyType::kString, "data/model.ckpt", "backbone checkpoint"},
      {"purifier_path", KeyType::kString, "data/purifier.ckpt", "purifier checkpoint"},
      {"split", KeyType::kString, "heldout", "corpus split evaluated by decode and eval"},
      {"scenes", KeyType::kInt, "0", "scenes of the split to use (0: all)"},
      // Synthetic world.
      {"catalog_size", KeyType::kInt, "24", "number of object types"},
      {"n_visual", KeyType::kInt, "16", "visual tokens per scene"},
      {"patch_dim", KeyType::kInt, "16", "visual feature width"},
      {"patches_per_object", KeyType::kInt, "4", "patches drawn for each present object"},
      {"pair_prob", KeyType::kDouble, "0.9", "chance a picked object brings its companion"},
      {"patch_noise", KeyType::kDouble, "1.0", "stddev of per-entry patch noise"},
      {"confuser_prob", KeyType::kDouble, "0.3", "chance a background patch shows an absent object"},
      {"confuser_amplitude", KeyType::kDouble, "0.3", "strength of confuser patches"},
      {"confuser_companion_prob", KeyType::kDouble, "0.0",
       "chance a confuser shows an absent companion"},
      {"world_seed", KeyType::kUInt, "1234", "seed of the object prototypes"},
      // Corpus.
      {"train_scenes", KeyType::kInt, "2000", "scenes in the backbone training split"},
      {"purifier_scenes", KeyType::kInt, "2000", "scenes in the purifier training split"},
      {"heldout_scenes", KeyType::kInt, "200", "scenes in the held-out split"},
      {"objects_per_scene", KeyType::kInt, "3", "objects picked per scene"},
      {"bias", KeyType::kDouble, "0.3", "caption bias rate of the train and held-out splits"},
      {"purifier_bias", KeyType::kDouble, "0.0", "caption bias rate of the purifier split"},
      // Backbone.
      {"vocab_size", KeyType::kInt, "256", "vocabulary size"},
      {"d_model", KeyType::kInt, "64", "hidden width"},
      {"n_heads", KeyType::kInt, "4", "attention heads"},
      {"d_head", KeyType::kInt, "16", "width per head"},
      {"n_layers", KeyType::kInt, "4", "transformer layers"},
      {"mlp_hidden", KeyType::kInt, "256", "MLP hidden width"},
      {"max_seq", KeyType::kInt, "64", "maximum sequence length"},
      {"purify_layer", KeyType::kInt, "2", "layer whose attention scores the mask"},
      {"model_epochs", KeyType::kInt, "6", "backbone training epochs"},
      {"model_lr", KeyType::kDouble, "3e-3", "backbone learning rate"},
      {"model_batch", KeyType::kInt, "16", "backbone batch size"},
      {"image_dropout", KeyType::kDouble, "0.5", "chance a training example drops its image"},
      {"grad_clip", KeyType::kDouble, "1.0", "global gradient-norm clip (0: off)"},
      {"qa_per_scene", KeyType::kInt, "1", "presence questions per training scene"},
      // Purifier.
      {"alpha", KeyType::kDouble, "100", "attention weight of the mask objective"},
      {"beta", KeyType::kDouble, "500", "retention penalty weight"},
      {"gamma", KeyType::kDouble, "0.8", "retained fraction of visual tokens"},
      {"tau", KeyType::kDouble, "0.5", "Gumbel-Softmax temperature"},
      {"purifier_lr", KeyType::kDouble, "1e-3", "purifier learning rate"},
      {"purifier_epochs", KeyType::kInt, "5", "purifier training epochs"},
      {"purifier_batch", KeyType::kInt, "8", "purifier batch size"},
      {"attention", KeyType::kString, "masked", "attention source: masked or unmasked"},
      // Decoding.
      {"variant", KeyType::kString, "full",
       "full, text_only, vision_only, learning_free or baseline"},
      {"lambda", KeyType::kDouble, "0.5", "calibration strength"},
      {"delta", KeyType::kDouble, "0.1", "truncation threshold relative to the top token"},
      {"sampler", KeyType::kString, "greedy", "greedy, multinomial or top_p"},
      {"top_p", KeyType::kDouble, "0.9", "nucleus mass for top_p sampling"},
      {"max_new_tokens", KeyType::kInt, "16", "generation budget"},
      {"step_order", KeyType::kString, "mask_then_sample", "mask_then_sample or sample_then_mask"},
      // Evaluation and verification.
      {"pope_questions", KeyType::kInt, "200", "presence questions for eval-pope"},
      {"trials", KeyType::kInt, "100", "random models for the factorization check"},
      {"oracle_scenes", KeyType::kInt, "0", "scenes compared against the exhaustive oracle"},
      {"oracle_k", KeyType::kInt, "0", "tokens kept by oracle masks (0: round(gamma * n_visual))"},
      {"gradcheck_configs", KeyType::kInt, "5", "random configurations for gradcheck"},
      {"gradcheck_step", KeyType::kDouble, "1e-5", "central-difference step"},
      {"param", KeyType::kString, "lambda", "swept parameter: lambda, gamma, delta or alpha"},
      {"values", KeyType::kString, "0,0.1,...,0.9", "sweep values; a,b,...,z expands a range"},
  };
  return specs;
}

const KeySpec* find_key(const std::string& name) {
  for (const auto& s : key_specs()) {
    if (name == s.name) return &s;
  }
  return nullptr;
}

RunConfig::RunConfig() {
  for (const auto& s : key_specs()) {
    values_[s.name] = s.default_value;
    origins_[s.name] = "default";
  }
}

void RunConfig::set(const std::string& key, const std::string& value,
                    const std::string& origin) {
  const KeySpec* spec = find_key(key);
  if (spec == nullptr) throw ConfigError(origin + ": unknown key '" + key + "'");
  check_value(*spec, value, origin);
  values_[key] = value;
  origins_[key] = origin;
}

void RunConfig::merge_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + ": empty key");
    const KeySpec* spec = find_key(key);
    if (spec == nullptr) throw ConfigError(where + ": unknown key '" + key + "'");
    check_value(*spec, value, where);
    values_[key] = value;
    origins_[key] = origin;
  }
}

void RunConfig::merge_json(const nlohmann::json& config, const std::string& origin) {
  if (!config.is_object()) throw ConfigError(origin + ": config must be an object");
  for (const auto& [key, v] : config.items()) {
    set(key, v.is_string() ? v.get<std::string>() : v.dump(), origin);
  }
}

void RunConfig::merge_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingFileError("cannot open config file " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  const bool is_json = path.size() >= 5 && path.compare(path.size() - 5, 5, ".json") == 0;
  if (!is_json) {
    merge_text(text, path);
    return;
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  if (!j.contains("config")) throw ConfigError(path + ": manifest has no config object");
  merge_json(j.at("config"), path);
}

const std::string& RunConfig::str(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown key '" + key + "'");
  return it->second;
}

long long RunConfig::integer(const std::string& key) const {
  long long v = 0;
  if (!parse_number(str(key), v)) throw ConfigError("key '" + key + "' is not an integer");
  return v;
}

std::uint64_t RunConfig::uinteger(const std::string& key) const {
  std::uint64_t v = 0;
  if (!parse_number(str(key), v)) {
    throw ConfigError("key '" + key + "' is not a non-negative integer");
  }
  return v;
}

double RunConfig::real(const std::string& key) const {
  double v = 0;
  if (!parse_number(str(key), v)) throw ConfigError("key '" + key + "' is not a number");
  return v;
}

bool RunConfig::boolean(const std::string& key) const {
  bool v = false;
  if (!parse_bool(str(key), v)) throw ConfigError("key '" + key + "' is not a boolean");
  return v;
}

const std::string& RunConfig::origin(const std::string& key) const {
  const auto it = origins_.find(key);
  if (it == origins_.end()) throw ConfigError("unknown key '" + key + "'");
  return it->second;
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& s : key_specs()) j[s.name] = values_.at(s.name);
  return j;
}

std::string RunConfig::to_text() const {
  std::ostringstream out;
  for (const auto& s : key_specs()) {
    out << "# " << s.help << "\n" << s.name << " = " << values_.at(s.name) << "\n";
  }
  return out.str();
}

std::vector<double> parse_value_list(const std::string& text) {
  std::vector<std::string> parts;
  std::string cur;
  std::istringstream in(text);
  while (std::getline(in, cur, ',')) parts.push_back(trim(cur));
  std::vector<double> out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i] == "...") {
      if (out.size() < 2 || i + 1 >= parts.size()) {
        throw ConfigError("values: '...' needs two leading values and an end value");
      }
      double end = 0;
      if (!parse_number(parts[i + 1], end)) throw ConfigError("values: bad number " + parts[i + 1]);
      const double step = out[out.size() - 1] - out[out.size() - 2];
      if (!(step > 0) || end < out.back()) {
        throw ConfigError("values: a range needs an increasing progression");
      }
      const double last = out.back();
      const long n = std::lround((end - last) / step);
      if (std::abs(last + n * step - end) > 1e-9 * std::max(1.0, std::abs(end))) {
        throw ConfigError("values: range end is not on the progression");
      }
      for (long k = 1; k <= n; ++k) out.push_back(last + k * step);
      out.back() = end;
      ++i;
      continue;
    }
    double v = 0;
    if (!parse_number(parts[i], v) || !std::isfinite(v)) {
      throw ConfigError("values: bad number '" + parts[i] + "'");
    }
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("values: empty list");
  return out;
}

}  // namespace cmivld::cli
