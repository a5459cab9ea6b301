// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

#include "commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>

#include "CLI11.hpp"
#include "cmivld/cmivld.h"
#include "json.hpp"
#include "run_config.hpp"

namespace cmivld::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// A failed C API call.
class ApiError : public std::runtime_error {
 public:
  ApiError(cmivld_status status, const std::string& message)
      : std::runtime_error(message), status_(status) {}
  cmivld_status status() const { return status_; }

 private:
  cmivld_status status_;
};

void check(cmivld_status s) {
  if (s != CMIVLD_OK) throw ApiError(s, cmivld_last_error());
}

json take(char* s) {
  json j = json::parse(s);
  cmivld_free_string(s);
  return j;
}

struct CorpusDeleter {
  void operator()(cmivld_corpus* p) const { cmivld_corpus_free(p); }
};
struct ModelDeleter {
  void operator()(cmivld_model* p) const { cmivld_model_free(p); }
};
struct PurifierDeleter {
  void operator()(cmivld_purifier* p) const { cmivld_purifier_free(p); }
};
using CorpusPtr = std::unique_ptr<cmivld_corpus, CorpusDeleter>;
using ModelPtr = std::unique_ptr<cmivld_model, ModelDeleter>;
using PurifierPtr = std::unique_ptr<cmivld_purifier, PurifierDeleter>;

const char* const kSplits[] = {"train", "purifier", "heldout"};

int first_scene_id(const std::string& split) {
  if (split == "train") return 0;
  if (split == "purifier") return 100000;
  return 200000;
}

std::uint64_t derive(const RunConfig& cfg, const std::string& label) {
  return cmivld_derive_seed(cfg.uinteger("seed"), label.c_str());
}

json world_json(const RunConfig& c) {
  return {{"catalog_size", c.integer("catalog_size")},
          {"n_visual", c.integer("n_visual")},
          {"patch_dim", c.integer("patch_dim")},
          {"patches_per_object", c.integer("patches_per_object")},
          {"pair_prob", c.real("pair_prob")},
          {"patch_noise", c.real("patch_noise")},
          {"confuser_prob", c.real("confuser_prob")},
          {"confuser_amplitude", c.real("confuser_amplitude")},
          {"confuser_companion_prob", c.real("confuser_companion_prob")},
          {"world_seed", c.uinteger("world_seed")}};
}

json corpus_json(const RunConfig& c, const std::string& split) {
  const bool purifier = split == "purifier";
  return {{"world", world_json(c)},
          {"n_scenes", c.integer(split + "_scenes")},
          {"objects_per_scene", c.integer("objects_per_scene")},
          {"bias", c.real(purifier ? "purifier_bias" : "bias")},
          {"seed", derive(c, "corpus/" + split)},
          {"first_scene_id", first_scene_id(split)}};
}

json model_json(const RunConfig& c) {
  return {{"vocab_size", c.integer("vocab_size")}, {"n_visual", c.integer("n_visual")},
          {"patch_dim", c.integer("patch_dim")},   {"d_model", c.integer("d_model")},
          {"n_heads", c.integer("n_heads")},       {"d_head", c.integer("d_head")},
          {"n_layers", c.integer("n_layers")},     {"mlp_hidden", c.integer("mlp_hidden")},
          {"max_seq", c.integer("max_seq")},       {"purify_layer", c.integer("purify_layer")}};
}

json model_train_json(const RunConfig& c) {
  return {{"learning_rate", c.real("model_lr")},
          {"epochs", c.integer("model_epochs")},
          {"batch_size", c.integer("model_batch")},
          {"image_dropout", c.real("image_dropout")},
          {"grad_clip", c.real("grad_clip")},
          {"qa_per_scene", c.integer("qa_per_scene")},
          {"seed", derive(c, "model/train")}};
}

json purifier_train_json(const RunConfig& c) {
  return {{"alpha", c.real("alpha")},
          {"beta", c.real("beta")},
          {"gamma", c.real("gamma")},
          {"tau", c.real("tau")},
          {"learning_rate", c.real("purifier_lr")},
          {"epochs", c.integer("purifier_epochs")},
          {"batch_size", c.integer("purifier_batch")},
          {"attention", c.str("attention")},
          {"seed", derive(c, "purifier/train")}};
}

json decode_json(const RunConfig& c) {
  return {{"variant", c.str("variant")},
          {"lambda", c.real("lambda")},
          {"gamma", c.real("gamma")},
          {"tau", c.real("tau")},
          {"delta", c.real("delta")},
          {"alpha", c.real("alpha")},
          {"sampler", c.str("sampler")},
          {"top_p", c.real("top_p")},
          {"seed", derive(c, "decode")},
          {"max_new_tokens", c.integer("max_new_tokens")},
          {"step_order", c.str("step_order")}};
}

bool variant_uses_purifier(const std::string& v) { return v == "full" || v == "vision_only"; }

void require_file(const std::string& path, const char* what) {
  if (!fs::exists(path)) throw ApiError(CMIVLD_NOT_FOUND, std::string(what) + " not found: " + path);
}

CorpusPtr load_corpus(const RunConfig& c, const std::string& split) {
  const std::string dir = (fs::path(c.str("corpus_dir")) / split).string();
  require_file(dir, "corpus split");
  cmivld_corpus* raw = nullptr;
  check(cmivld_corpus_load(dir.c_str(), &raw));
  CorpusPtr corpus(raw);
  const long long limit = c.integer("scenes");
  if (limit < 0) throw ConfigError("scenes must be >= 0");
  if (limit > 0) {
    cmivld_corpus* sub = nullptr;
    check(cmivld_corpus_subset(corpus.get(), static_cast<size_t>(limit), &sub));
    corpus.reset(sub);
  }
  return corpus;
}

ModelPtr load_model(const RunConfig& c) {
  require_file(c.str("model_path"), "model checkpoint");
  cmivld_model* raw = nullptr;
  check(cmivld_model_load(c.str("model_path").c_str(), &raw));
  return ModelPtr(raw);
}

PurifierPtr load_purifier(const RunConfig& c) {
  require_file(c.str("purifier_path"), "purifier checkpoint");
  cmivld_purifier* raw = nullptr;
  check(cmivld_purifier_load(c.str("purifier_path").c_str(), &raw));
  return PurifierPtr(raw);
}

PurifierPtr load_purifier_for(const RunConfig& c, const std::string& variant) {
  return variant_uses_purifier(variant) ? load_purifier(c) : PurifierPtr();
}

// Timing fields vary run to run; result files keep only deterministic content.
json without_timing(json j) {
  j.erase("wall_time");
  j.erase("tokens_per_second");
  return j;
}

// One command invocation: results.jsonl rows, then a run.json manifest.
class Run {
 public:
  Run(std::string command, const RunConfig& cfg)
      : command_(std::move(command)), cfg_(cfg), start_(std::chrono::steady_clock::now()) {
    dir_ = cfg.str("out_dir");
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw ApiError(CMIVLD_IO, "cannot create " + dir_.string() + ": " + ec.message());
    results_.open(dir_ / "results.jsonl", std::ios::trunc);
    if (!results_) throw ApiError(CMIVLD_IO, "cannot write " + (dir_ / "results.jsonl").string());
  }

  const RunConfig& cfg() const { return cfg_; }
  json& summary() { return summary_; }
  json& timing() { return timing_; }

  void row(const json& j) { results_ << j.dump() << "\n"; }

  void finish(const json* error = nullptr) {
    results_.close();
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    json m{{"command", command_},
           {"version", cmivld_version()},
           {"seed", cfg_.uinteger("seed")},
           {"config", cfg_.to_json()},
           {"wall_time", wall},
           {"status", error == nullptr ? "ok" : "error"},
           {"summary", summary_},
           {"timing", timing_},
           {"results", "results.jsonl"}};
    if (error != nullptr) m["error"] = *error;
    const fs::path tmp = dir_ / "run.json.tmp";
    {
      std::ofstream out(tmp, std::ios::trunc);
      out << m.dump(2) << "\n";
      if (!out) throw ApiError(CMIVLD_IO, "cannot write " + tmp.string());
    }
    fs::rename(tmp, dir_ / "run.json");
  }

 private:
  std::string command_;
  RunConfig cfg_;
  fs::path dir_;
  std::ofstream results_;
  json summary_ = json::object();
  json timing_ = json::object();
  std::chrono::steady_clock::time_point start_;
};

void cmd_synth_gen(Run& run) {
  const auto& c = run.cfg();
  for (const char* split : kSplits) {
    cmivld_corpus* raw = nullptr;
    check(cmivld_corpus_generate(corpus_json(c, split).dump().c_str(), &raw));
    CorpusPtr corpus(raw);
    const std::string dir = (fs::path(c.str("corpus_dir")) / split).string();
    check(cmivld_corpus_save(corpus.get(), dir.c_str()));
    char* info = nullptr;
    check(cmivld_corpus_info(corpus.get(), &info));
    json j = take(info);
    json row{{"split", split},
             {"dir", dir},
             {"n_scenes", j["n_scenes"]},
             {"n_captions", j["n_captions"]},
             {"biased_captions", j["biased_captions"]}};
    run.row(row);
    run.summary()[split] = row;
  }
}

void cmd_train_model(Run& run) {
  const auto& c = run.cfg();
  const CorpusPtr corpus = load_corpus(c, "train");
  cmivld_model* raw = nullptr;
  check(cmivld_model_create(model_json(c).dump().c_str(), derive(c, "model/init"), &raw));
  ModelPtr model(raw);
  char* report = nullptr;
  check(cmivld_model_train(model.get(), corpus.get(), model_train_json(c).dump().c_str(),
                           &report));
  json r = take(report);
  const auto& losses = r["epoch_loss"];
  for (std::size_t e = 0; e < losses.size(); ++e) {
    run.row({{"epoch", e + 1}, {"loss", losses[e]}});
  }
  const fs::path path(c.str("model_path"));
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  check(cmivld_model_save(model.get(), path.c_str()));
  run.timing()["train_seconds"] = r["seconds"];
  r.erase("seconds");
  run.summary() = r;
  run.summary()["model_path"] = path.string();
}

void cmd_train_purifier(Run& run) {
  const auto& c = run.cfg();
  const ModelPtr model = load_model(c);
  const CorpusPtr corpus = load_corpus(c, "purifier");
  cmivld_purifier* raw = nullptr;
  check(cmivld_purifier_create(model.get(), nullptr, derive(c, "purifier/init"), &raw));
  PurifierPtr purifier(raw);
  char* report = nullptr;
  check(cmivld_purifier_train(purifier.get(), model.get(), corpus.get(),
                              purifier_train_json(c).dump().c_str(), &report));
  json r = take(report);
  for (std::size_t e = 0; e < r["epoch_loss"].size(); ++e) {
    run.row({{"epoch", e + 1},
             {"loss", r["epoch_loss"][e]},
             {"retained_fraction", r["epoch_retained_fraction"][e]}});
  }
  const fs::path path(c.str("purifier_path"));
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  check(cmivld_purifier_save(purifier.get(), path.c_str()));
  run.timing()["train_seconds"] = r["seconds"];
  r.erase("seconds");

  const CorpusPtr heldout = load_corpus(c, c.str("split"));
  char* ret = nullptr;
  check(cmivld_purifier_retention(purifier.get(), model.get(), heldout.get(), c.real("gamma"),
                                  derive(c, "purifier/retention"), &ret));
  json retention = take(ret);
  run.row({{"retention", retention}});
  retention.erase("counts");
  run.summary() = r;
  run.summary()["retention"] = retention;
  run.summary()["purifier_path"] = path.string();
}

void cmd_decode(Run& run) {
  const auto& c = run.cfg();
  const ModelPtr model = load_model(c);
  const PurifierPtr purifier = load_purifier_for(c, c.str("variant"));
  const CorpusPtr corpus = load_corpus(c, c.str("split"));
  char* info = nullptr;
  check(cmivld_corpus_info(corpus.get(), &info));
  const json ids = take(info)["scene_ids"];
  const std::string dj = decode_json(c).dump();
  double secs = 0;
  std::size_t tokens = 0;
  for (const auto& id : ids) {
    char* out = nullptr;
    check(cmivld_decode(model.get(), purifier.get(), corpus.get(), id.get<int>(), dj.c_str(),
                        &out));
    json r = take(out);
    secs += r["wall_time"].get<double>();
    tokens += r["tokens"].size();
    r.erase("config");
    run.row(without_timing(r));
  }
  run.summary() = {{"scenes", ids.size()}, {"tokens", tokens}, {"decode", json::parse(dj)}};
  run.timing() = {{"seconds", secs}, {"tokens_per_second", secs > 0 ? tokens / secs : 0.0}};
}

json eval_chair(const cmivld_model* model, const cmivld_purifier* purifier,
                const cmivld_corpus* corpus, const json& dj) {
  char* out = nullptr;
  check(cmivld_eval_chair(model, purifier, corpus, dj.dump().c_str(), &out));
  return take(out);
}

void cmd_eval_chair(Run& run) {
  const auto& c = run.cfg();
  const ModelPtr model = load_model(c);
  const PurifierPtr purifier = load_purifier_for(c, c.str("variant"));
  const CorpusPtr corpus = load_corpus(c, c.str("split"));
  const json r = eval_chair(model.get(), purifier.get(), corpus.get(), decode_json(c));
  for (const auto& cap : r["captions"]) run.row(without_timing(cap));
  run.summary() = {{"chair", r["chair"]}, {"tokens", r["tokens"]}, {"decode", r["config"]}};
  run.timing() = {{"seconds", r["seconds"]}, {"tokens_per_second", r["tokens_per_second"]}};
}

void cmd_eval_pope(Run& run) {
  const auto& c = run.cfg();
  const ModelPtr model = load_model(c);
  const PurifierPtr purifier = load_purifier_for(c, c.str("variant"));
  const CorpusPtr corpus = load_corpus(c, c.str("split"));
  char* out = nullptr;
  check(cmivld_eval_pope(model.get(), purifier.get(), corpus.get(), decode_json(c).dump().c_str(),
                         static_cast<int>(c.integer("pope_questions")), derive(c, "pope"), &out));
  const json r = take(out);
  for (const auto& a : r["answers"]) run.row(a);
  run.summary() = {{"pope", r["pope"]}, {"decode", r["config"]}};
}

void cmd_oracle_check(Run& run) {
  const auto& c = run.cfg();
  char* out = nullptr;
  check(cmivld_verify_factorization(nullptr, model_json(c).dump().c_str(),
                                    static_cast<int>(c.integer("trials")),
                                    derive(c, "oracle/factorization"), &out));
  json fact = take(out);
  run.timing()["factorization_seconds"] = fact["seconds"];
  fact.erase("seconds");
  run.row({{"factorization", fact}});
  run.summary()["factorization"] = fact;
  run.summary()["max_factorization_deviation"] = fact["max_deviation"];

  const long long n_scenes = c.integer("oracle_scenes");
  if (n_scenes <= 0) return;
  const ModelPtr model = load_model(c);
  const PurifierPtr purifier = load_purifier(c);
  RunConfig limited = c;
  limited.set("scenes", std::to_string(n_scenes), "oracle_scenes");
  const CorpusPtr corpus = load_corpus(limited, c.str("split"));
  char* info = nullptr;
  check(cmivld_corpus_info(corpus.get(), &info));
  const json ids = take(info)["scene_ids"];
  json q = json::object();
  if (c.integer("oracle_k") > 0) q["k"] = c.integer("oracle_k");
  q["alpha"] = c.real("alpha");
  const json base{{"variant", "baseline"}, {"max_new_tokens", c.integer("max_new_tokens")}};
  double sum_oracle = 0;
  double sum_purifier = 0;
  long dominance_violations = 0;
  long contexts = 0;
  for (const auto& id : ids) {
    char* dec = nullptr;
    check(cmivld_decode(model.get(), nullptr, corpus.get(), id.get<int>(), base.dump().c_str(),
                        &dec));
    const auto tokens = take(dec)["tokens"].get<std::vector<int>>();
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      json qt = q;
      qt["prefix"] = std::vector<int>(tokens.begin(), tokens.begin() + t);
      qt["target"] = tokens[t];
      char* res = nullptr;
      check(cmivld_oracle_search(model.get(), purifier.get(), corpus.get(), id.get<int>(),
                                 qt.dump().c_str(), &res));
      json r = take(res);
      const double best = r["best_score"].get<double>();
      const double mine = r["purifier_score"].get<double>();
      sum_oracle += best;
      sum_purifier += mine;
      dominance_violations += best < mine ? 1 : 0;
      ++contexts;
      r["step"] = t;
      run.row(r);
    }
  }
  run.summary()["oracle"] = {
      {"contexts", contexts},
      {"mean_oracle_score", contexts ? sum_oracle / contexts : 0.0},
      {"mean_purifier_score", contexts ? sum_purifier / contexts : 0.0},
      {"score_ratio", sum_oracle != 0 ? sum_purifier / sum_oracle : 0.0},
      {"dominance_violations", dominance_violations}};
}

void cmd_gradcheck(Run& run) {
  const auto& c = run.cfg();
  char* out = nullptr;
  check(cmivld_gradcheck(static_cast<int>(c.integer("gradcheck_configs")), derive(c, "gradcheck"),
                         c.real("gradcheck_step"), &out));
  const json r = take(out);
  const auto& per = r["per_config"];
  for (std::size_t i = 0; i < per.size(); ++i) {
    run.row({{"config", i}, {"rel_error", per[i]}});
  }
  run.summary() = r;
}

// Variant that decodes like `variant` at lambda 0.
std::string contrast_off(const std::string& variant) {
  if (variant == "full") return "vision_only";
  if (variant == "text_only") return "baseline";
  return variant;
}

void cmd_sweep(Run& run) {
  const auto& c = run.cfg();
  const std::string param = c.str("param");
  static const char* const kSweepable[] = {"lambda", "gamma", "delta", "alpha"};
  if (std::find(std::begin(kSweepable), std::end(kSweepable), param) == std::end(kSweepable)) {
    throw ConfigError("sweep: param must be lambda, gamma, delta or alpha");
  }
  const std::vector<double> values = parse_value_list(c.str("values"));
  const std::string variant = c.str("variant");
  const ModelPtr model = load_model(c);
  const CorpusPtr corpus = load_corpus(c, c.str("split"));
  const bool retrain = param == "alpha" && variant_uses_purifier(variant);
  PurifierPtr shared = retrain ? PurifierPtr() : load_purifier_for(c, variant);
  CorpusPtr purifier_corpus = retrain ? load_corpus(c, "purifier") : CorpusPtr();

  std::vector<double> scores;
  std::map<double, json> captions_by_value;
  json timing = json::array();
  for (double v : values) {
    RunConfig point = c;
    point.set(param, json(v).dump(), "sweep");
    PurifierPtr own;
    if (retrain) {
      cmivld_purifier* raw = nullptr;
      check(cmivld_purifier_create(model.get(), nullptr, derive(point, "purifier/init"), &raw));
      own.reset(raw);
      char* rep = nullptr;
      check(cmivld_purifier_train(own.get(), model.get(), purifier_corpus.get(),
                                  purifier_train_json(point).dump().c_str(), &rep));
      cmivld_free_string(rep);
    }
    const cmivld_purifier* p = retrain ? own.get() : shared.get();
    const json r = eval_chair(model.get(), p, corpus.get(), decode_json(point));
    scores.push_back(r["chair"]["c_s"].get<double>());
    run.row({{"param", param}, {"value", v}, {"chair", r["chair"]}});
    timing.push_back({{"value", v}, {"tokens_per_second", r["tokens_per_second"]}});
    if (v == 0.0) captions_by_value[v] = r["captions"];
  }

  const auto min_it = std::min_element(scores.begin(), scores.end());
  const std::size_t arg = static_cast<std::size_t>(min_it - scores.begin());
  json& s = run.summary();
  s = {{"param", param},
       {"variant", variant},
       {"values", values},
       {"c_s", scores},
       {"argmin_value", values[arg]},
       {"min_c_s", *min_it},
       {"interior_minimum", *min_it < scores.front() && *min_it < scores.back()}};
  run.timing()["points"] = timing;

  if (param == "lambda" && captions_by_value.count(0.0) > 0 && contrast_off(variant) != variant) {
    RunConfig ref = c;
    ref.set("variant", contrast_off(variant), "sweep");
    ref.set("lambda", "0", "sweep");
    const json r = eval_chair(model.get(), shared.get(), corpus.get(), decode_json(ref));
    json a = captions_by_value[0.0];
    json b = r["captions"];
    for (auto& x : a) x = without_timing(x);
    for (auto& x : b) x = without_timing(x);
    const bool same = a == b;
    run.row({{"reference", contrast_off(variant)}, {"chair", r["chair"]},
             {"matches_lambda_zero", same}});
    s["contrast_off_variant"] = contrast_off(variant);
    s["zero_matches_contrast_off"] = same;
  }
}

using Command = std::function<void(Run&)>;

const std::map<std::string, std::pair<Command, const char*>>& commands() {
  static const std::map<std::string, std::pair<Command, const char*>> table{
      {"synth-gen", {cmd_synth_gen, "generate the train, purifier and held-out corpora"}},
      {"train-model", {cmd_train_model, "train the backbone on the train split"}},
      {"train-purifier", {cmd_train_purifier, "train the purifier on the purifier split"}},
      {"decode", {cmd_decode, "caption every scene of a split"}},
      {"eval-chair", {cmd_eval_chair, "caption a split and score hallucinated objects"}},
      {"eval-pope", {cmd_eval_pope, "yes/no object presence probe"}},
      {"oracle-check", {cmd_oracle_check, "factorization identity and oracle comparison"}},
      {"gradcheck", {cmd_gradcheck, "finite-difference check of the purifier loss"}},
      {"sweep", {cmd_sweep, "CHAIR over a range of one hyperparameter"}},
  };
  return table;
}

std::string flag_name(const std::string& key) {
  std::string f = key;
  std::replace(f.begin(), f.end(), '_', '-');
  return "--" + f;
}

int exit_code_for(cmivld_status s) {
  switch (s) {
    case CMIVLD_NOT_FOUND:
    case CMIVLD_IO:
      return kExitMissingFile;
    case CMIVLD_INVALID_CONFIG:
    case CMIVLD_INVALID_INPUT:
      return kExitInvalidConfig;
    case CMIVLD_NUMERICAL:
      return kExitNumerical;
    default:
      return kExitFailure;
  }
}

int report(std::ostream& err, const std::string& command, int code, const std::string& kind,
           const std::string& message, Run* run) {
  const json e{{"command", command}, {"exit_code", code}, {"kind", kind}, {"message", message}};
  err << json{{"error", e}}.dump() << std::endl;
  if (run != nullptr) {
    try {
      run->finish(&e);
    } catch (const std::exception&) {
      // The error record on stderr is the primary report.
    }
  }
  return code;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Conditional mutual information visual decoding on a synthetic benchmark",
               "cmivld"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(cmivld_version()));

  struct Sub {
    CLI::App* app = nullptr;
    std::string config_path;
    bool print_config = false;
    std::map<std::string, std::string> flags;
  };
  std::map<std::string, Sub> subs;
  for (const auto& [name, entry] : commands()) {
    Sub& s = subs[name];
    s.app = app.add_subcommand(name, entry.second);
    s.app->add_option("--config", s.config_path,
                      "key = value file, or a run.json manifest to replay");
    s.app->add_flag("--print-config", s.print_config, "print the resolved config and exit");
    for (const auto& spec : key_specs()) {
      s.app->add_option(flag_name(spec.name), s.flags[spec.name],
                        std::string(spec.help) + " [default: " + spec.default_value + "]");
    }
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << cmivld_version() << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    return report(err, "", kExitInvalidConfig, "usage", e.what(), nullptr);
  }

  std::string command;
  for (const auto& [name, s] : subs) {
    if (s.app->parsed()) command = name;
  }
  const Sub& sub = subs.at(command);

  RunConfig cfg;
  try {
    if (!sub.config_path.empty()) cfg.merge_file(sub.config_path);
    for (const auto& spec : key_specs()) {
      const CLI::Option* opt = sub.app->get_option(flag_name(spec.name));
      if (opt->count() > 0) cfg.set(spec.name, sub.flags.at(spec.name), "flag");
    }
  } catch (const MissingFileError& e) {
    return report(err, command, kExitMissingFile, "missing_file", e.what(), nullptr);
  } catch (const ConfigError& e) {
    return report(err, command, kExitInvalidConfig, "invalid_config", e.what(), nullptr);
  }

  if (sub.print_config) {
    json j = json::object();
    for (const auto& spec : key_specs()) {
      j[spec.name] = {{"value", cfg.str(spec.name)}, {"origin", cfg.origin(spec.name)}};
    }
    out << j.dump() << std::endl;
    return kExitOk;
  }

  std::unique_ptr<Run> run;
  try {
    run = std::make_unique<Run>(command, cfg);
    commands().at(command).first(*run);
    run->finish();
    out << json{{"command", command}, {"summary", run->summary()}}.dump() << std::endl;
    return kExitOk;
  } catch (const ApiError& e) {
    return report(err, command, exit_code_for(e.status()), cmivld_status_name(e.status()),
                  e.what(), run.get());
  } catch (const MissingFileError& e) {
    return report(err, command, kExitMissingFile, "missing_file", e.what(), run.get());
  } catch (const ConfigError& e) {
    return report(err, command, kExitInvalidConfig, "invalid_config", e.what(), run.get());
  } catch (const std::exception& e) {
    return report(err, command, kExitFailure, "internal", e.what(), run.get());
  }
}

}  // namespace cmivld::cli
