// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

#include "cmivld/cmivld.h"

#include <chrono>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "capi_internal.hpp"
#include "cpmi.hpp"
#include "decoding.hpp"
#include "error.hpp"
#include "model.hpp"
#include "oracle.hpp"
#include "purifier.hpp"
#include "rng.hpp"
#include "store.hpp"
#include "synthbench.hpp"

struct cmivld_corpus {
  cmivld::Corpus corpus;
};

struct cmivld_model {
  cmivld::ModelConfig config;
  cmivld::TinyLvlmParams params;
};

struct cmivld_purifier {
  cmivld::Purifier purifier;
};

namespace {

using nlohmann::json;
using namespace cmivld;

#ifndef CMIVLD_VERSION_STRING
#define CMIVLD_VERSION_STRING "0.0.0"
#endif

thread_local std::string g_last_error;

cmivld_status to_status(ErrorCode code) { return static_cast<cmivld_status>(code); }

// Runs body, translating exceptions into a status and the thread's last error.
template <typename F>
cmivld_status guarded(F&& body) {
  try {
    body();
    return CMIVLD_OK;
  } catch (const Error& e) {
    g_last_error = e.what();
    return to_status(e.code());
  } catch (const json::exception& e) {
    g_last_error = std::string("json: ") + e.what();
    return CMIVLD_INVALID_CONFIG;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return CMIVLD_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return CMIVLD_INTERNAL;
  } catch (...) {
    g_last_error = "unknown exception";
    return CMIVLD_INTERNAL;
  }
}

char* dup_string(const std::string& s) {
  char* p = static_cast<char*>(std::malloc(s.size() + 1));
  if (p == nullptr) throw std::bad_alloc();
  std::memcpy(p, s.data(), s.size() + 1);
  return p;
}

void emit(const json& j, char** out) {
  require(out != nullptr, ErrorCode::kInvalidInput, "null output pointer");
  *out = dup_string(j.dump());
}

template <typename T>
void require_handle(const T* p, const char* what) {
  require(p != nullptr, ErrorCode::kInvalidInput, std::string("null ") + what);
}

json parse_object(const char* text, const char* what) {
  if (text == nullptr || *text == '\0') return json::object();
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::kInvalidConfig, std::string(what) + ": " + e.what());
  }
  require(j.is_object(), ErrorCode::kInvalidConfig, std::string(what) + ": expected an object");
  return j;
}

void reject_unknown(const json& j, std::initializer_list<const char*> known, const char* what) {
  const std::set<std::string> allowed(known.begin(), known.end());
  for (const auto& [key, _] : j.items()) {
    require(allowed.count(key) > 0, ErrorCode::kInvalidConfig,
            std::string(what) + ": unknown key '" + key + "'");
  }
}

CorpusConfig corpus_config_from(const json& j) {
  reject_unknown(j, {"world", "n_scenes", "objects_per_scene", "bias", "seed", "first_scene_id"},
                 "corpus config");
  CorpusConfig c;
  c.world = WorldConfig::from_json(j.value("world", json::object()));
  c.n_scenes = j.value("n_scenes", c.n_scenes);
  c.objects_per_scene = j.value("objects_per_scene", c.objects_per_scene);
  c.bias = j.value("bias", c.bias);
  c.seed = j.value("seed", c.seed);
  c.first_scene_id = j.value("first_scene_id", c.first_scene_id);
  c.validate();
  return c;
}

struct ModelTrainRequest {
  LvlmTrainOptions options;
  int qa_per_scene = 1;
};

ModelTrainRequest model_train_from(const json& j) {
  reject_unknown(j,
                 {"learning_rate", "epochs", "batch_size", "max_steps", "image_dropout",
                  "grad_clip", "qa_per_scene", "seed"},
                 "model training options");
  ModelTrainRequest r;
  auto& o = r.options;
  o.learning_rate = j.value("learning_rate", o.learning_rate);
  o.epochs = j.value("epochs", o.epochs);
  o.batch_size = j.value("batch_size", o.batch_size);
  o.max_steps = j.value("max_steps", o.max_steps);
  o.image_dropout = j.value("image_dropout", o.image_dropout);
  o.grad_clip = j.value("grad_clip", o.grad_clip);
  o.seed = j.value("seed", o.seed);
  r.qa_per_scene = j.value("qa_per_scene", r.qa_per_scene);
  require(o.learning_rate > 0 && o.epochs >= 0 && o.batch_size >= 1 && o.max_steps >= 0 &&
              o.image_dropout >= 0 && o.image_dropout <= 1 && o.grad_clip >= 0 &&
              r.qa_per_scene >= 0,
          ErrorCode::kInvalidConfig, "model training options out of range");
  return r;
}

TrainConfig purifier_train_from(const json& j) {
  reject_unknown(j,
                 {"alpha", "beta", "gamma", "tau", "learning_rate", "epochs", "batch_size",
                  "attention", "seed"},
                 "purifier training options");
  TrainConfig t;
  t.alpha = j.value("alpha", t.alpha);
  t.beta = j.value("beta", t.beta);
  t.gamma = j.value("gamma", t.gamma);
  t.tau = j.value("tau", t.tau);
  t.learning_rate = j.value("learning_rate", t.learning_rate);
  t.epochs = j.value("epochs", t.epochs);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.seed = j.value("seed", t.seed);
  const std::string attention = j.value("attention", std::string("masked"));
  if (attention == "masked") {
    t.attention = AttentionSource::kMasked;
  } else if (attention == "unmasked") {
    t.attention = AttentionSource::kUnmasked;
  } else {
    fail(ErrorCode::kInvalidConfig, "purifier training options: unknown attention '" +
                                        attention + "'");
  }
  t.validate();
  return t;
}

// Purifier training pairs: every caption of the corpus against its scene.
std::vector<TrainingExample> caption_examples(const Corpus& corpus) {
  std::vector<TrainingExample> out;
  out.reserve(corpus.captions.size());
  for (const auto& c : corpus.captions) {
    out.push_back({&corpus.scene(c.scene_id).patches, vocab::describe_prompt(), c.tokens});
  }
  return out;
}

const Purifier* checked_purifier(const cmivld_purifier* p, const cmivld_model* m) {
  if (p == nullptr) return nullptr;
  check_compatible(p->purifier.config, p->purifier.params, m->config,
                   m->params.parameter_count());
  return &p->purifier;
}

DecodeConfig decode_config_from(const char* text) {
  return DecodeConfig::from_json(parse_object(text, "decode config"));
}

void require_purifier_if_needed(const DecodeConfig& cfg, const Purifier* p) {
  const bool needs = cfg.variant == Variant::kFull || cfg.variant == Variant::kVisionOnly;
  require(!needs || p != nullptr, ErrorCode::kInvalidInput,
          "variant " + to_string(cfg.variant) + " needs a purifier");
}

DecodeResult run_decode(const cmivld_model* m, const Purifier* p, const Tensor& visual,
                        std::span<const int> prompt, const DecodeConfig& cfg) {
  if (cfg.variant == Variant::kLearningFree) {
    return lf_decode(m->params, m->config, visual, prompt, cfg);
  }
  return decode(m->params, m->config, p, visual, prompt, cfg);
}

json caption_json(const CaptionRecord& c, const DecodeResult& r) {
  json j = caption_to_json(c);
  j.erase("biased");
  j["tokens_per_second"] = r.tokens_per_second;
  j["wall_time"] = r.wall_time;
  return j;
}

}  // namespace

extern "C" {

const char* cmivld_version(void) { return CMIVLD_VERSION_STRING; }

const char* cmivld_status_name(cmivld_status status) {
  if (status == CMIVLD_OK) return "ok";
  if (status == CMIVLD_INTERNAL) return "internal";
  if (status >= CMIVLD_INVALID_INPUT && status <= CMIVLD_NUMERICAL) {
    return error_code_name(static_cast<ErrorCode>(status));
  }
  return "unknown";
}

const char* cmivld_last_error(void) { return g_last_error.c_str(); }

void cmivld_free_string(char* s) { std::free(s); }

uint64_t cmivld_derive_seed(uint64_t root, const char* label) {
  return Rng(root).fork(std::string_view(label == nullptr ? "" : label)).seed();
}

cmivld_status cmivld_corpus_generate(const char* config_json, cmivld_corpus** out) {
  return guarded([&] {
    require(out != nullptr, ErrorCode::kInvalidInput, "null output pointer");
    const CorpusConfig cfg = corpus_config_from(parse_object(config_json, "corpus config"));
    auto c = std::make_unique<cmivld_corpus>();
    c->corpus = generate_corpus(cfg);
    *out = c.release();
  });
}

cmivld_status cmivld_corpus_load(const char* dir, cmivld_corpus** out) {
  return guarded([&] {
    require(dir != nullptr && out != nullptr, ErrorCode::kInvalidInput, "null argument");
    const std::filesystem::path root(dir);
    const auto world_path = root / "world.json";
    std::ifstream in(world_path);
    require(in.good(), ErrorCode::kNotFound, "corpus: cannot open " + world_path.string());
    json wj;
    try {
      wj = json::parse(in);
    } catch (const json::exception& e) {
      fail(ErrorCode::kInvalidInput, "corpus: " + world_path.string() + ": " + e.what());
    }
    auto c = std::make_unique<cmivld_corpus>();
    c->corpus.world = WorldConfig::from_json(wj);
    c->corpus.scenes = read_scenes((root / "scenes.jsonl").string(), c->corpus.world);
    c->corpus.captions = read_captions((root / "captions.jsonl").string(), c->corpus.world);
    c->corpus.reindex();
    for (const auto& cap : c->corpus.captions) {
      require(c->corpus.find_scene(cap.scene_id) != nullptr, ErrorCode::kInvalidInput,
              "corpus: caption for unknown scene " + std::to_string(cap.scene_id));
    }
    *out = c.release();
  });
}

cmivld_status cmivld_corpus_save(const cmivld_corpus* corpus, const char* dir) {
  return guarded([&] {
    require_handle(corpus, "corpus");
    require(dir != nullptr, ErrorCode::kInvalidInput, "null directory");
    const std::filesystem::path root(dir);
    std::error_code ec;
    std::filesystem::create_directories(root, ec);
    require(!ec, ErrorCode::kIo, "corpus: cannot create " + root.string() + ": " + ec.message());
    std::ofstream out(root / "world.json");
    out << corpus->corpus.world.to_json().dump(2) << "\n";
    require(out.good(), ErrorCode::kIo, "corpus: cannot write world.json");
    out.close();
    write_scenes((root / "scenes.jsonl").string(), corpus->corpus.scenes);
    write_captions((root / "captions.jsonl").string(), corpus->corpus.captions);
  });
}

cmivld_status cmivld_corpus_subset(const cmivld_corpus* corpus, size_t max_scenes,
                                   cmivld_corpus** out) {
  return guarded([&] {
    require_handle(corpus, "corpus");
    require(out != nullptr, ErrorCode::kInvalidInput, "null output pointer");
    const auto& src = corpus->corpus;
    auto c = std::make_unique<cmivld_corpus>();
    c->corpus.world = src.world;
    std::set<int> kept;
    for (const auto& s : src.scenes) {
      if (c->corpus.scenes.size() >= max_scenes) break;
      c->corpus.scenes.push_back(s);
      kept.insert(s.scene_id);
    }
    for (const auto& cap : src.captions) {
      if (kept.count(cap.scene_id) > 0) c->corpus.captions.push_back(cap);
    }
    c->corpus.reindex();
    *out = c.release();
  });
}

cmivld_status cmivld_corpus_info(const cmivld_corpus* corpus, char** out_json) {
  return guarded([&] {
    require_handle(corpus, "corpus");
    const auto& c = corpus->corpus;
    std::size_t biased = 0;
    for (const auto& cap : c.captions) biased += cap.biased ? 1 : 0;
    std::vector<int> ids;
    ids.reserve(c.scenes.size());
    for (const auto& s : c.scenes) ids.push_back(s.scene_id);
    emit({{"world", c.world.to_json()},
          {"n_scenes", c.scenes.size()},
          {"n_captions", c.captions.size()},
          {"biased_captions", biased},
          {"scene_ids", ids}},
         out_json);
  });
}

void cmivld_corpus_free(cmivld_corpus* corpus) { delete corpus; }

cmivld_status cmivld_model_create(const char* config_json, uint64_t seed, cmivld_model** out) {
  return guarded([&] {
    require(out != nullptr, ErrorCode::kInvalidInput, "null output pointer");
    auto m = std::make_unique<cmivld_model>();
    m->config = ModelConfig::from_json(parse_object(config_json, "model config"));
    m->params = init_params(m->config, seed);
    *out = m.release();
  });
}

cmivld_status cmivld_model_train(cmivld_model* model, const cmivld_corpus* corpus,
                                 const char* options_json, char** out_report) {
  return guarded([&] {
    require_handle(model, "model");
    require_handle(corpus, "corpus");
    const auto req = model_train_from(parse_object(options_json, "model training options"));
    require(corpus->corpus.world.n_visual == model->config.n_visual &&
                corpus->corpus.world.patch_dim == model->config.patch_dim,
            ErrorCode::kInvalidInput, "model and corpus disagree on visual shape");
    const auto examples =
        lvlm_training_examples(corpus->corpus, req.qa_per_scene,
                               Rng(req.options.seed).fork("qa").seed());
    const auto t0 = std::chrono::steady_clock::now();
    const auto rep = train_lvlm(model->params, model->config, examples, req.options);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (out_report != nullptr) {
      emit({{"epoch_loss", rep.epoch_loss},
            {"initial_loss", rep.initial_loss},
            {"final_loss", rep.final_loss},
            {"steps", rep.steps},
            {"examples", examples.size()},
            {"seconds", secs}},
           out_report);
    }
  });
}

cmivld_status cmivld_model_save(const cmivld_model* model, const char* path) {
  return guarded([&] {
    require_handle(model, "model");
    require(path != nullptr, ErrorCode::kInvalidInput, "null path");
    save_model(path, model->config, model->params);
  });
}

cmivld_status cmivld_model_load(const char* path, cmivld_model** out) {
  return guarded([&] {
    require(path != nullptr && out != nullptr, ErrorCode::kInvalidInput, "null argument");
    auto [config, params] = load_model(path);
    auto m = std::make_unique<cmivld_model>();
    m->config = config;
    m->params = std::move(params);
    *out = m.release();
  });
}

cmivld_status cmivld_model_info(const cmivld_model* model, char** out_json) {
  return guarded([&] {
    require_handle(model, "model");
    emit({{"config", model->config.to_json()},
          {"parameter_count", model->params.parameter_count()}},
         out_json);
  });
}

void cmivld_model_free(cmivld_model* model) { delete model; }

cmivld_status cmivld_purifier_create(const cmivld_model* model, const char* config_json,
                                     uint64_t seed, cmivld_purifier** out) {
  return guarded([&] {
    require_handle(model, "model");
    require(out != nullptr, ErrorCode::kInvalidInput, "null output pointer");
    auto p = std::make_unique<cmivld_purifier>();
    p->purifier.config = config_json == nullptr
                             ? PurifierConfig::for_model(model->config)
                             : PurifierConfig::from_json(parse_object(config_json,
                                                                      "purifier config"));
    p->purifier.params = init_purifier(p->purifier.config, seed);
    check_compatible(p->purifier.config, p->purifier.params, model->config,
                     model->params.parameter_count());
    *out = p.release();
  });
}

cmivld_status cmivld_purifier_train(cmivld_purifier* purifier, const cmivld_model* model,
                                    const cmivld_corpus* corpus, const char* options_json,
                                    char** out_report) {
  return guarded([&] {
    require_handle(purifier, "purifier");
    require_handle(model, "model");
    require_handle(corpus, "corpus");
    checked_purifier(purifier, model);
    const TrainConfig tc = purifier_train_from(parse_object(options_json,
                                                            "purifier training options"));
    const auto examples = caption_examples(corpus->corpus);
    const auto t0 = std::chrono::steady_clock::now();
    const auto rep = train_purifier(model->params, model->config, purifier->purifier.params,
                                    purifier->purifier.config, examples, tc);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (out_report != nullptr) {
      emit({{"epoch_loss", rep.epoch_loss},
            {"epoch_retained_fraction", rep.epoch_retained_fraction},
            {"steps", rep.steps},
            {"train_config", tc.to_json()},
            {"seconds", secs}},
           out_report);
    }
  });
}

cmivld_status cmivld_purifier_retention(const cmivld_purifier* purifier,
                                        const cmivld_model* model, const cmivld_corpus* corpus,
                                        double gamma, uint64_t seed, char** out_json) {
  return guarded([&] {
    require_handle(purifier, "purifier");
    require_handle(model, "model");
    require_handle(corpus, "corpus");
    checked_purifier(purifier, model);
    require(gamma > 0 && gamma <= 1, ErrorCode::kInvalidInput, "gamma must lie in (0, 1]");
    const auto examples = caption_examples(corpus->corpus);
    const auto counts =
        heldout_retained_counts(model->params, model->config, purifier->purifier.params,
                                purifier->purifier.config, examples, seed);
    const auto target = static_cast<long>(retained_count(gamma, purifier->purifier.config.n_visual));
    std::size_t within = 0;
    for (auto c : counts) within += std::labs(static_cast<long>(c) - target) <= 1 ? 1 : 0;
    emit({{"counts", counts},
          {"target", target},
          {"within_one", within},
          {"fraction_within_one",
           counts.empty() ? 0.0 : static_cast<double>(within) / counts.size()}},
         out_json);
  });
}

cmivld_status cmivld_purifier_save(const cmivld_purifier* purifier, const char* path) {
  return guarded([&] {
    require_handle(purifier, "purifier");
    require(path != nullptr, ErrorCode::kInvalidInput, "null path");
    save_purifier(path, purifier->purifier);
  });
}

cmivld_status cmivld_purifier_load(const char* path, cmivld_purifier** out) {
  return guarded([&] {
    require(path != nullptr && out != nullptr, ErrorCode::kInvalidInput, "null argument");
    auto p = std::make_unique<cmivld_purifier>();
    p->purifier = load_purifier(path);
    *out = p.release();
  });
}

cmivld_status cmivld_purifier_info(const cmivld_purifier* purifier, char** out_json) {
  return guarded([&] {
    require_handle(purifier, "purifier");
    emit({{"config", purifier->purifier.config.to_json()},
          {"parameter_count", purifier->purifier.params.parameter_count()}},
         out_json);
  });
}

void cmivld_purifier_free(cmivld_purifier* purifier) { delete purifier; }

cmivld_status cmivld_decode(const cmivld_model* model, const cmivld_purifier* purifier,
                            const cmivld_corpus* corpus, int scene_id, const char* decode_json,
                            char** out_json) {
  return guarded([&] {
    require_handle(model, "model");
    require_handle(corpus, "corpus");
    const DecodeConfig cfg = decode_config_from(decode_json);
    const Purifier* p = checked_purifier(purifier, model);
    require_purifier_if_needed(cfg, p);
    const auto& scene = corpus->corpus.scene(scene_id);
    const auto r = run_decode(model, p, scene.patches, vocab::describe_prompt(), cfg);
    json j = r.to_json();
    j["scene_id"] = scene_id;
    j["mentioned_object_ids"] = parse_mentions(corpus->corpus.world, r.tokens);
    j["config"] = cfg.to_json();
    emit(j, out_json);
  });
}

cmivld_status cmivld_eval_chair(const cmivld_model* model, const cmivld_purifier* purifier,
                                const cmivld_corpus* corpus, const char* decode_json,
                                char** out_json) {
  return guarded([&] {
    require_handle(model, "model");
    require_handle(corpus, "corpus");
    const DecodeConfig cfg = decode_config_from(decode_json);
    const Purifier* p = checked_purifier(purifier, model);
    require_purifier_if_needed(cfg, p);
    const auto& c = corpus->corpus;
    std::vector<CaptionRecord> captions;
    json rows = json::array();
    std::vector<RunTiming> timings;
    for (const auto& scene : c.scenes) {
      const auto r = run_decode(model, p, scene.patches, vocab::describe_prompt(), cfg);
      captions.push_back(make_caption(c.world, scene.scene_id, r.tokens));
      rows.push_back(caption_json(captions.back(), r));
      timings.push_back({r.tokens.size(), r.wall_time});
    }
    const auto tps = throughput(timings);
    std::size_t tokens = 0;
    double secs = 0;
    for (const auto& t : timings) {
      tokens += t.tokens;
      secs += t.seconds;
    }
    emit({{"chair", chair_scores(c, captions).to_json()},
          {"captions", rows},
          {"tokens", tokens},
          {"seconds", secs},
          {"tokens_per_second", secs > 0 ? tokens / secs : 0.0},
          {"mean_run_tps", tps.mean_tps},
          {"stdev_run_tps", tps.stdev_tps},
          {"config", cfg.to_json()}},
         out_json);
  });
}

cmivld_status cmivld_eval_pope(const cmivld_model* model, const cmivld_purifier* purifier,
                               const cmivld_corpus* corpus, const char* decode_json,
                               int n_questions, uint64_t seed, char** out_json) {
  return guarded([&] {
    require_handle(model, "model");
    require_handle(corpus, "corpus");
    DecodeConfig cfg = decode_config_from(decode_json);
    cfg.max_new_tokens = 1;
    const Purifier* p = checked_purifier(purifier, model);
    require_purifier_if_needed(cfg, p);
    json rows = json::array();
    const Answerer answer = [&](const SceneRecord& scene, std::span<const int> prompt) {
      auto r = run_decode(model, p, scene.patches, prompt, cfg);
      rows.push_back({{"scene_id", scene.scene_id},
                      {"question", std::vector<int>(prompt.begin(), prompt.end())},
                      {"reply", r.tokens}});
      return r.tokens;
    };
    const PopeReport rep = pope_probe(answer, corpus->corpus, n_questions, seed);
    emit({{"pope", rep.to_json()}, {"answers", rows}, {"config", cfg.to_json()}}, out_json);
  });
}

cmivld_status cmivld_oracle_search(const cmivld_model* model, const cmivld_purifier* purifier,
                                   const cmivld_corpus* corpus, int scene_id,
                                   const char* query_json, char** out_json) {
  return guarded([&] {
    require_handle(model, "model");
    require_handle(corpus, "corpus");
    const json q = parse_object(query_json, "oracle query");
    reject_unknown(q, {"prefix", "target", "k", "alpha", "keep_all", "cap"}, "oracle query");
    const Purifier* p = checked_purifier(purifier, model);
    const auto& scene = corpus->corpus.scene(scene_id);
    const auto prefix = q.value("prefix", std::vector<int>{});
    const auto& prompt = vocab::describe_prompt();
    const int target = q.contains("target")
                           ? q.at("target").get<int>()
                           : greedy_candidate(model->params, model->config, scene.patches,
                                              prompt, prefix);
    const auto k = q.value("k", static_cast<std::size_t>(
                                    retained_count(0.8, static_cast<std::size_t>(
                                                            model->config.n_visual))));
    const double alpha = q.value("alpha", 100.0);
    OracleOptions opts;
    opts.keep_all = q.value("keep_all", false);
    opts.cap = q.value("cap", opts.cap);
    const auto r = oracle_mask_search(model->params, model->config, scene.patches, prompt,
                                      prefix, target, k, alpha, opts);
    json j = r.to_json();
    j["scene_id"] = scene_id;
    j["k"] = k;
    j["alpha"] = alpha;
    if (p != nullptr) {
      const ModelInput in{&scene.patches, prompt, prefix};
      const Tensor z = context_embeddings(model->params, model->config, in);
      const auto mask = top_k_mask(purifier_forward(p->params, p->config, z), k);
      std::vector<int> bits;
      for (auto w : mask.weights.data) bits.push_back(w > 0 ? 1 : 0);
      j["purifier_mask"] = bits;
      j["purifier_score"] = oracle_score(model->params, model->config, scene.patches, prompt,
                                         prefix, target, mask, alpha);
    }
    emit(j, out_json);
  });
}

cmivld_status cmivld_verify_factorization(const cmivld_model* model, const char* config_json,
                                          int trials, uint64_t seed, char** out_json) {
  return guarded([&] {
    require(trials >= 1, ErrorCode::kInvalidInput, "trials must be positive");
    FactorizationReport rep;
    if (model != nullptr) {
      Rng rng(seed);
      rep = verify_factorization(model->params, model->config, trials, rng);
    } else {
      const ModelConfig mc = ModelConfig::from_json(parse_object(config_json, "model config"));
      rep = verify_factorization_random(mc, trials, seed);
    }
    emit(rep.to_json(), out_json);
  });
}

cmivld_status cmivld_cpmi(const cmivld_model* model, const cmivld_corpus* corpus, int scene_id,
                          const int* tokens, size_t n_tokens, char** out_json) {
  return guarded([&] {
    require_handle(model, "model");
    require_handle(corpus, "corpus");
    require(tokens != nullptr || n_tokens == 0, ErrorCode::kInvalidInput, "null tokens");
    const auto& scene = corpus->corpus.scene(scene_id);
    const std::vector<int> y(tokens, tokens + n_tokens);
    json j = cpmi_pointwise(model->params, model->config, scene.patches,
                            vocab::describe_prompt(), y)
                 .to_json();
    j["scene_id"] = scene_id;
    j["tokens"] = y;
    emit(j, out_json);
  });
}

cmivld_status cmivld_gradcheck(int n_configs, uint64_t seed, double h, char** out_json) {
  return guarded([&] {
    require(n_configs >= 1, ErrorCode::kInvalidInput, "n_configs must be positive");
    require(h > 0, ErrorCode::kInvalidInput, "step must be positive");
    emit(cmivld::capi_detail::loss_gradcheck(n_configs, seed, h), out_json);
  });
}

}  // extern "C"
