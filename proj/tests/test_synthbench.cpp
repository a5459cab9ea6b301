// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "synthbench.hpp"
#include "test_util.hpp"

using namespace cmivld;
using namespace cmivld::testing;

namespace {

Corpus fixture_corpus() {
  Corpus c;
  for (int id : {1, 2}) {
    SceneRecord s;
    s.scene_id = id;
    s.object_ids = {0, 2, 4, 6};
    c.scenes.push_back(s);
  }
  c.reindex();
  return c;
}

CaptionRecord caption(const Corpus& c, int scene, std::vector<int> objects) {
  std::vector<int> tokens;
  for (int o : objects) tokens.push_back(vocab::object_token(o));
  tokens.push_back(vocab::kEos);
  return make_caption(c.world, scene, tokens);
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("chair fixture: one of eight mentions hallucinated") {
  const Corpus c = fixture_corpus();
  const std::vector<CaptionRecord> caps{caption(c, 1, {0, 2, 4, 9}), caption(c, 2, {0, 2, 4, 6})};
  const ChairScores s = chair_scores(c, caps);
  CHECK(s.c_s == 0.5);
  CHECK(s.c_i == 0.125);
  CHECK(s.hallucinated == 1);
  CHECK(s.mentioned == 8);
  CHECK(s.captions_with_hallucination == 1);
  CHECK(s.captions == 2);
  CHECK_FALSE(s.degenerate);
}

TEST_CASE("chair counts each object once per caption") {
  const Corpus c = fixture_corpus();
  const std::vector<CaptionRecord> caps{caption(c, 1, {9, 9, 0})};
  const ChairScores s = chair_scores(c, caps);
  CHECK(s.mentioned == 2);
  CHECK(s.hallucinated == 1);
}

TEST_CASE("chair with no mentions is degenerate") {
  const Corpus c = fixture_corpus();
  const std::vector<CaptionRecord> caps{caption(c, 1, {}), caption(c, 2, {})};
  const ChairScores s = chair_scores(c, caps);
  CHECK(s.c_i == 0);
  CHECK(s.c_s == 0);
  CHECK(s.mentioned == 0);
  CHECK(s.degenerate);
}

TEST_CASE("chair rejects unknown scenes") {
  const Corpus c = fixture_corpus();
  const std::vector<CaptionRecord> caps{caption(c, 7, {0})};
  CHECK(code_of([&] { chair_scores(c, caps); }) == ErrorCode::kInvalidInput);
}

TEST_CASE("chair property: bounds and monotonicity under added hallucinations") {
  CorpusConfig cfg;
  cfg.n_scenes = 60;
  cfg.seed = 4;
  const Corpus corpus = generate_corpus(cfg);
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<CaptionRecord> caps;
    for (const auto& s : corpus.scenes) {
      std::vector<int> objs;
      for (int k = 0; k < 4; ++k) {
        if (rng.bernoulli(0.5)) objs.push_back(static_cast<int>(rng.below(24)));
      }
      caps.push_back(caption(corpus, s.scene_id, objs));
    }
    const ChairScores before = chair_scores(corpus, caps);
    CHECK(before.c_s >= 0);
    CHECK(before.c_s <= 1);
    CHECK(before.c_i >= 0);
    CHECK(before.c_i <= 1);
    CHECK((before.c_s == 0) == (before.c_i == 0));

    auto& target = caps[rng.below(caps.size())];
    const SceneRecord& scene = corpus.scene(target.scene_id);
    int absent = 0;
    while (scene.contains(absent)) ++absent;
    auto objs = target.mentioned_object_ids;
    objs.push_back(absent);
    target = caption(corpus, target.scene_id, objs);
    const ChairScores after = chair_scores(corpus, caps);
    CHECK(after.c_s >= before.c_s);
    CHECK(after.c_i >= before.c_i);
  }
}

TEST_CASE("unbiased corpus mentions only present objects") {
  CorpusConfig cfg;
  cfg.n_scenes = 300;
  cfg.bias = 0.0;
  const Corpus corpus = generate_corpus(cfg);
  const ChairScores s = chair_scores(corpus, corpus.captions);
  CHECK(s.c_i == 0);
  CHECK(s.c_s == 0);
  for (const auto& c : corpus.captions) CHECK_FALSE(c.biased);
}

TEST_CASE("biased caption fraction follows rho") {
  CorpusConfig cfg;
  cfg.n_scenes = 1000;
  cfg.bias = 0.3;
  const Corpus corpus = generate_corpus(cfg);
  std::size_t biased = 0;
  for (const auto& c : corpus.captions) biased += c.biased ? 1 : 0;
  const double frac = static_cast<double>(biased) / 1000.0;
  CHECK(frac >= 0.25);
  CHECK(frac <= 0.35);
  // Every injected mention is an absent companion of a present object.
  for (const auto& c : corpus.captions) {
    const SceneRecord& s = corpus.scene(c.scene_id);
    for (int o : c.mentioned_object_ids) {
      if (!s.contains(o)) CHECK(s.contains(corpus.world.companion(o)));
    }
  }
}

TEST_CASE("corpus generation is deterministic and byte-identical on disk") {
  CorpusConfig cfg;
  cfg.n_scenes = 50;
  cfg.seed = 42;
  const Corpus a = generate_corpus(cfg);
  const Corpus b = generate_corpus(cfg);
  const auto dir = std::filesystem::temp_directory_path() / "cmivld_synth_test";
  std::filesystem::create_directories(dir);
  write_scenes((dir / "a_scenes.jsonl").string(), a.scenes);
  write_scenes((dir / "b_scenes.jsonl").string(), b.scenes);
  write_captions((dir / "a_caps.jsonl").string(), a.captions);
  write_captions((dir / "b_caps.jsonl").string(), b.captions);
  CHECK(slurp((dir / "a_scenes.jsonl").string()) == slurp((dir / "b_scenes.jsonl").string()));
  CHECK(slurp((dir / "a_caps.jsonl").string()) == slurp((dir / "b_caps.jsonl").string()));
  for (std::size_t i = 0; i < a.scenes.size(); ++i) CHECK(a.scenes[i].patches.data == b.scenes[i].patches.data);

  const auto scenes = read_scenes((dir / "a_scenes.jsonl").string(), cfg.world);
  const auto caps = read_captions((dir / "a_caps.jsonl").string(), cfg.world);
  REQUIRE(scenes.size() == a.scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    CHECK(scenes[i].object_ids == a.scenes[i].object_ids);
    CHECK(scenes[i].patches.data == a.scenes[i].patches.data);
    CHECK(caps[i].tokens == a.captions[i].tokens);
    CHECK(caps[i].mentioned_object_ids == a.captions[i].mentioned_object_ids);
  }
  cfg.seed = 43;
  CHECK(generate_corpus(cfg).scenes[0].seed != a.scenes[0].seed);
  std::filesystem::remove_all(dir);
}

TEST_CASE("patches are a pure function of objects and seed") {
  WorldConfig w;
  const std::vector<int> objs{1, 4, 9};
  CHECK(derive_patches(w, objs, 5).data == derive_patches(w, objs, 5).data);
  CHECK(derive_patches(w, objs, 5).data != derive_patches(w, objs, 6).data);
  const Tensor p = derive_patches(w, objs, 5);
  CHECK(p.rows() == 16);
  CHECK(p.cols() == 16);
}

TEST_CASE("corpus validation") {
  CorpusConfig cfg;
  cfg.objects_per_scene = 0;
  CHECK(code_of([&] { generate_corpus(cfg); }) == ErrorCode::kInvalidInput);
  cfg = CorpusConfig{};
  cfg.objects_per_scene = 6;  // 18 object patches > 16 tokens
  CHECK(code_of([&] { generate_corpus(cfg); }) == ErrorCode::kInvalidInput);
  cfg = CorpusConfig{};
  cfg.bias = 1.5;
  CHECK(code_of([&] { generate_corpus(cfg); }) == ErrorCode::kInvalidInput);
}

TEST_CASE("scenes are non-empty and captions list present objects in order") {
  CorpusConfig cfg;
  cfg.n_scenes = 100;
  const Corpus corpus = generate_corpus(cfg);
  for (std::size_t i = 0; i < corpus.scenes.size(); ++i) {
    CHECK_FALSE(corpus.scenes[i].object_ids.empty());
    CHECK(corpus.captions[i].tokens.back() == vocab::kEos);
    CHECK(std::is_sorted(corpus.captions[i].tokens.begin(), corpus.captions[i].tokens.end() - 1));
    for (int o : corpus.scenes[i].object_ids) {
      CHECK(std::binary_search(corpus.captions[i].mentioned_object_ids.begin(),
                               corpus.captions[i].mentioned_object_ids.end(), o));
    }
  }
}

TEST_CASE("pope: balanced questions") {
  CorpusConfig cfg;
  cfg.n_scenes = 40;
  const Corpus corpus = generate_corpus(cfg);
  for (int n : {10, 11, 100}) {
    const auto qs = build_pope_questions(corpus, n, 3);
    std::size_t present = 0;
    for (const auto& q : qs) {
      present += q.present ? 1 : 0;
      CHECK(corpus.scene(q.scene_id).contains(q.object_id) == q.present);
      CHECK(q.prompt == vocab::presence_question(q.object_id));
    }
    const auto absent = qs.size() - present;
    CHECK((present > absent ? present - absent : absent - present) <= 1);
  }
}

TEST_CASE("pope: oracle and constant answerers") {
  CorpusConfig cfg;
  cfg.n_scenes = 40;
  const Corpus corpus = generate_corpus(cfg);
  const Answerer oracle = [](const SceneRecord& s, std::span<const int> prompt) {
    const int obj = prompt[2] - vocab::kObjectBase;
    return std::vector<int>{s.contains(obj) ? vocab::kYes : vocab::kNo, vocab::kEos};
  };
  const PopeReport o = pope_probe(oracle, corpus, 200, 1);
  CHECK(o.accuracy == 1.0);
  CHECK(o.f1 == 1.0);

  const Answerer yes = [](const SceneRecord&, std::span<const int>) {
    return std::vector<int>{vocab::kYes};
  };
  const PopeReport y = pope_probe(yes, corpus, 200, 1);
  CHECK(y.accuracy == 0.5);
  CHECK(y.f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

  const Answerer late = [](const SceneRecord&, std::span<const int>) {
    return std::vector<int>{20, 20, 20, 20, vocab::kYes};
  };
  const PopeReport l = pope_probe(late, corpus, 20, 1);
  CHECK(l.unanswered == 20);
  CHECK(l.accuracy == 0.0);

  const Answerer third = [](const SceneRecord&, std::span<const int>) {
    return std::vector<int>{20, 20, vocab::kNo};
  };
  const PopeReport t = pope_probe(third, corpus, 20, 1);
  CHECK(t.unanswered == 0);
  CHECK(t.accuracy == 0.5);
}

TEST_CASE("throughput summary") {
  const std::vector<RunTiming> one{{10, 2.0}};
  CHECK(throughput(one).mean_tps == 5.0);
  CHECK(throughput(one).stdev_tps == 0.0);
  const std::vector<RunTiming> two{{10, 2.0}, {30, 2.0}};
  CHECK(throughput(two).mean_tps == 10.0);
  CHECK(throughput(two).stdev_tps == doctest::Approx(std::sqrt(50.0)));
  CHECK(code_of([] { throughput({}); }) == ErrorCode::kInvalidInput);
}

TEST_CASE("mention parsing ignores non-object tokens") {
  WorldConfig w;
  const std::vector<int> tokens{vocab::kBos, 16, 39, 40, 16, vocab::kEos, 255};
  CHECK(parse_mentions(w, tokens) == std::vector<int>{0, 23});
}
