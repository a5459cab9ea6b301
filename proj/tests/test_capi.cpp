// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

// The C interface, exercised through the shared library only.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "cmivld/cmivld.h"
#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json take(char* s) {
  REQUIRE(s != nullptr);
  json j = json::parse(s);
  cmivld_free_string(s);
  return j;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cmivld_capi_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

const char* kSmallCorpus = R"({"n_scenes": 60, "seed": 3, "bias": 0.3})";

struct Fixture {
  cmivld_corpus* corpus = nullptr;
  cmivld_model* model = nullptr;
  cmivld_purifier* purifier = nullptr;

  Fixture() {
    REQUIRE(cmivld_corpus_generate(kSmallCorpus, &corpus) == CMIVLD_OK);
    REQUIRE(cmivld_model_create(nullptr, 5, &model) == CMIVLD_OK);
    REQUIRE(cmivld_model_train(model, corpus, R"({"epochs": 1, "max_steps": 4})", nullptr) ==
            CMIVLD_OK);
    REQUIRE(cmivld_purifier_create(model, nullptr, 9, &purifier) == CMIVLD_OK);
  }
  ~Fixture() {
    cmivld_purifier_free(purifier);
    cmivld_model_free(model);
    cmivld_corpus_free(corpus);
  }
  Fixture(const Fixture&) = delete;
  Fixture& operator=(const Fixture&) = delete;

  int first_scene() const {
    char* info = nullptr;
    REQUIRE(cmivld_corpus_info(corpus, &info) == CMIVLD_OK);
    return take(info)["scene_ids"][0].get<int>();
  }
};

}  // namespace

TEST_CASE("version and status names") {
  CHECK(std::string(cmivld_version()).size() > 0);
  CHECK(std::string(cmivld_status_name(CMIVLD_OK)) == "ok");
  CHECK(std::string(cmivld_status_name(CMIVLD_NOT_FOUND)) != "unknown");
  CHECK(std::string(cmivld_status_name(static_cast<cmivld_status>(55))) == "unknown");
}

TEST_CASE("null handles are rejected with a message") {
  char* out = nullptr;
  CHECK(cmivld_corpus_info(nullptr, &out) == CMIVLD_INVALID_INPUT);
  CHECK(std::string(cmivld_last_error()).find("corpus") != std::string::npos);
  CHECK(out == nullptr);
  cmivld_corpus_free(nullptr);
  cmivld_model_free(nullptr);
  cmivld_purifier_free(nullptr);
  cmivld_free_string(nullptr);
}

TEST_CASE("config errors map to status codes") {
  cmivld_corpus* c = nullptr;
  CHECK(cmivld_corpus_generate(R"({"n_scene": 5})", &c) == CMIVLD_INVALID_CONFIG);
  CHECK(std::string(cmivld_last_error()).find("n_scene") != std::string::npos);
  CHECK(cmivld_corpus_generate("not json", &c) == CMIVLD_INVALID_CONFIG);
  CHECK(cmivld_corpus_generate(R"({"world": {"pair_prob": 2}})", &c) != CMIVLD_OK);
  CHECK(c == nullptr);
  cmivld_model* m = nullptr;
  CHECK(cmivld_model_create(R"({"d_model": 63})", 0, &m) == CMIVLD_INVALID_CONFIG);
  CHECK(m == nullptr);
}

TEST_CASE("seed derivation is stable and label dependent") {
  CHECK(cmivld_derive_seed(7, "corpus/train") == cmivld_derive_seed(7, "corpus/train"));
  CHECK(cmivld_derive_seed(7, "corpus/train") != cmivld_derive_seed(7, "corpus/heldout"));
  CHECK(cmivld_derive_seed(7, "decode") != cmivld_derive_seed(8, "decode"));
}

TEST_CASE("corpus round-trips through a directory") {
  cmivld_corpus* c = nullptr;
  REQUIRE(cmivld_corpus_generate(kSmallCorpus, &c) == CMIVLD_OK);
  const fs::path dir = scratch_dir("corpus");
  REQUIRE(cmivld_corpus_save(c, dir.c_str()) == CMIVLD_OK);
  CHECK(fs::exists(dir / "world.json"));
  CHECK(fs::exists(dir / "scenes.jsonl"));
  CHECK(fs::exists(dir / "captions.jsonl"));
  cmivld_corpus* back = nullptr;
  REQUIRE(cmivld_corpus_load(dir.c_str(), &back) == CMIVLD_OK);
  char* a = nullptr;
  char* b = nullptr;
  REQUIRE(cmivld_corpus_info(c, &a) == CMIVLD_OK);
  REQUIRE(cmivld_corpus_info(back, &b) == CMIVLD_OK);
  const json ja = take(a);
  CHECK(ja == take(b));
  CHECK(ja["n_scenes"] == 60);

  cmivld_corpus* sub = nullptr;
  REQUIRE(cmivld_corpus_subset(back, 7, &sub) == CMIVLD_OK);
  char* s = nullptr;
  REQUIRE(cmivld_corpus_info(sub, &s) == CMIVLD_OK);
  const json js = take(s);
  CHECK(js["n_scenes"] == 7);
  CHECK(js["n_captions"] == 7);
  cmivld_corpus_free(sub);
  cmivld_corpus_free(back);
  cmivld_corpus_free(c);

  cmivld_corpus* missing = nullptr;
  CHECK(cmivld_corpus_load((dir / "absent").c_str(), &missing) == CMIVLD_NOT_FOUND);
}

TEST_CASE("checkpoints round-trip and decoding is deterministic") {
  Fixture f;
  const int scene = f.first_scene();
  const char* cfg = R"({"variant": "full", "lambda": 0.5, "gamma": 0.8, "seed": 7})";
  char* first = nullptr;
  REQUIRE(cmivld_decode(f.model, f.purifier, f.corpus, scene, cfg, &first) == CMIVLD_OK);
  json a = take(first);

  const fs::path dir = scratch_dir("ckpt");
  REQUIRE(cmivld_model_save(f.model, (dir / "m.ckpt").c_str()) == CMIVLD_OK);
  REQUIRE(cmivld_purifier_save(f.purifier, (dir / "p.ckpt").c_str()) == CMIVLD_OK);
  cmivld_model* m = nullptr;
  cmivld_purifier* p = nullptr;
  REQUIRE(cmivld_model_load((dir / "m.ckpt").c_str(), &m) == CMIVLD_OK);
  REQUIRE(cmivld_purifier_load((dir / "p.ckpt").c_str(), &p) == CMIVLD_OK);
  char* second = nullptr;
  REQUIRE(cmivld_decode(m, p, f.corpus, scene, cfg, &second) == CMIVLD_OK);
  json b = take(second);
  CHECK(a["tokens"] == b["tokens"]);
  CHECK(a["per_step"] == b["per_step"]);

  char* mi = nullptr;
  char* mo = nullptr;
  REQUIRE(cmivld_model_info(f.model, &mi) == CMIVLD_OK);
  REQUIRE(cmivld_model_info(m, &mo) == CMIVLD_OK);
  CHECK(take(mi) == take(mo));
  cmivld_purifier_free(p);
  cmivld_model_free(m);

  cmivld_model* none = nullptr;
  CHECK(cmivld_model_load((dir / "absent.ckpt").c_str(), &none) == CMIVLD_NOT_FOUND);
  {
    std::ofstream junk(dir / "junk.ckpt", std::ios::binary);
    junk << "not a checkpoint at all";
  }
  CHECK(cmivld_model_load((dir / "junk.ckpt").c_str(), &none) == CMIVLD_UNSUPPORTED_FORMAT);
  CHECK(none == nullptr);
}

TEST_CASE("variants that need a purifier refuse to run without one") {
  Fixture f;
  char* out = nullptr;
  CHECK(cmivld_decode(f.model, nullptr, f.corpus, f.first_scene(), R"({"variant": "full"})",
                      &out) == CMIVLD_INVALID_INPUT);
  CHECK(cmivld_decode(f.model, nullptr, f.corpus, f.first_scene(),
                      R"({"variant": "text_only"})", &out) == CMIVLD_OK);
  cmivld_free_string(out);
  CHECK(cmivld_decode(f.model, nullptr, f.corpus, -5, R"({"variant": "baseline"})", &out) ==
        CMIVLD_INVALID_INPUT);
}

TEST_CASE("evaluation entry points report scores") {
  Fixture f;
  cmivld_corpus* sub = nullptr;
  REQUIRE(cmivld_corpus_subset(f.corpus, 5, &sub) == CMIVLD_OK);
  char* out = nullptr;
  REQUIRE(cmivld_eval_chair(f.model, f.purifier, sub, R"({"variant": "full"})", &out) ==
          CMIVLD_OK);
  const json chair = take(out);
  CHECK(chair["captions"].size() == 5);
  CHECK(chair["chair"]["c_s"].get<double>() >= 0.0);
  CHECK(chair["chair"]["c_s"].get<double>() <= 1.0);

  REQUIRE(cmivld_eval_pope(f.model, nullptr, sub, R"({"variant": "baseline"})", 10, 3, &out) ==
          CMIVLD_OK);
  const json pope = take(out);
  CHECK(pope["pope"]["questions"] == 10);
  CHECK(pope["answers"].size() == 10);
  cmivld_corpus_free(sub);
}

TEST_CASE("retention report counts hard-mask sizes") {
  Fixture f;
  cmivld_corpus* sub = nullptr;
  REQUIRE(cmivld_corpus_subset(f.corpus, 4, &sub) == CMIVLD_OK);
  char* out = nullptr;
  REQUIRE(cmivld_purifier_retention(f.purifier, f.model, sub, 0.8, 1, &out) == CMIVLD_OK);
  const json r = take(out);
  CHECK(r["target"] == 13);
  CHECK(r["counts"].size() > 0);
  CHECK(r["within_one"].get<int>() <= static_cast<int>(r["counts"].size()));
  cmivld_corpus_free(sub);
}

TEST_CASE("oracle never scores below the purifier's mask") {
  Fixture f;
  char* out = nullptr;
  REQUIRE(cmivld_oracle_search(f.model, f.purifier, f.corpus, f.first_scene(),
                               R"({"k": 14, "alpha": 100})", &out) == CMIVLD_OK);
  const json r = take(out);
  CHECK(r["enumerated_count"] == 120);
  CHECK(r["best_score"].get<double>() >= r["purifier_score"].get<double>());
  int kept = 0;
  for (int b : r["purifier_mask"]) kept += b;
  CHECK(kept == 14);
  CHECK(cmivld_oracle_search(f.model, nullptr, f.corpus, f.first_scene(), R"({"kk": 1})", &out) ==
        CMIVLD_INVALID_CONFIG);
}

TEST_CASE("verification entry points") {
  char* out = nullptr;
  REQUIRE(cmivld_verify_factorization(nullptr, R"({"vocab_size": 32, "n_visual": 4,
      "patch_dim": 4, "d_model": 16, "n_heads": 2, "d_head": 8, "n_layers": 2,
      "mlp_hidden": 16, "max_seq": 24, "purify_layer": 1})",
                                      5, 11, &out) == CMIVLD_OK);
  const json fact = take(out);
  CHECK(fact["trials"] == 5);
  CHECK(fact["max_deviation"].get<double>() < 1e-4);

  REQUIRE(cmivld_gradcheck(1, 2, 1e-5, &out) == CMIVLD_OK);
  CHECK(take(out)["max_rel_error"].get<double>() < 1e-3);
  CHECK(cmivld_gradcheck(0, 2, 1e-5, &out) == CMIVLD_INVALID_INPUT);

  Fixture f;
  const int tokens[] = {16, 17, 2};
  REQUIRE(cmivld_cpmi(f.model, f.corpus, f.first_scene(), tokens, 3, &out) == CMIVLD_OK);
  const json c = take(out);
  REQUIRE(c["per_step_log_ratio"].size() == 3);
  double sum = 0;
  for (double v : c["per_step_log_ratio"]) sum += v;
  CHECK(sum == doctest::Approx(c["total"].get<double>()).epsilon(1e-6));
}
