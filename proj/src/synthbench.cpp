// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

#include "synthbench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "error.hpp"
#include "rng.hpp"

CMIVLD_NS_BEGIN

void WorldConfig::validate() const {
  require(catalog_size >= 2 && catalog_size % 2 == 0, ErrorCode::kInvalidConfig,
          "world: catalog_size must be even and >= 2");
  require(vocab::kObjectBase + catalog_size <= 256, ErrorCode::kInvalidConfig,
          "world: catalog does not fit the vocabulary");
  require(n_visual >= 1 && patch_dim >= 1 && patches_per_object >= 1, ErrorCode::kInvalidConfig,
          "world: sizes must be positive");
  require(pair_prob >= 0 && pair_prob <= 1 && confuser_prob >= 0 && confuser_prob <= 1 &&
              confuser_companion_prob >= 0 && confuser_companion_prob <= 1,
          ErrorCode::kInvalidConfig, "world: probabilities must lie in [0, 1]");
  require(patch_noise >= 0 && confuser_amplitude >= 0, ErrorCode::kInvalidConfig,
          "world: noise and amplitude must be non-negative");
}

nlohmann::json WorldConfig::to_json() const {
  return {{"catalog_size", catalog_size},
          {"n_visual", n_visual},
          {"patch_dim", patch_dim},
          {"patches_per_object", patches_per_object},
          {"pair_prob", pair_prob},
          {"patch_noise", patch_noise},
          {"confuser_prob", confuser_prob},
          {"confuser_amplitude", confuser_amplitude},
          {"confuser_companion_prob", confuser_companion_prob},
          {"world_seed", world_seed}};
}

WorldConfig WorldConfig::from_json(const nlohmann::json& j) {
  WorldConfig w;
  try {
    w.catalog_size = j.value("catalog_size", w.catalog_size);
    w.n_visual = j.value("n_visual", w.n_visual);
    w.patch_dim = j.value("patch_dim", w.patch_dim);
    w.patches_per_object = j.value("patches_per_object", w.patches_per_object);
    w.pair_prob = j.value("pair_prob", w.pair_prob);
    w.patch_noise = j.value("patch_noise", w.patch_noise);
    w.confuser_prob = j.value("confuser_prob", w.confuser_prob);
    w.confuser_amplitude = j.value("confuser_amplitude", w.confuser_amplitude);
    w.confuser_companion_prob = j.value("confuser_companion_prob", w.confuser_companion_prob);
    w.world_seed = j.value("world_seed", w.world_seed);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kInvalidConfig, std::string("world config: ") + e.what());
  }
  w.validate();
  return w;
}

bool SceneRecord::contains(int object_id) const {
  return std::binary_search(object_ids.begin(), object_ids.end(), object_id);
}

void CorpusConfig::validate() const {
  world.validate();
  require(objects_per_scene >= 1 && world.catalog_size >= objects_per_scene,
          ErrorCode::kInvalidInput, "corpus: need catalog_size >= objects_per_scene >= 1");
  require(objects_per_scene * world.patches_per_object <= world.n_visual,
          ErrorCode::kInvalidInput, "corpus: object patches exceed n_visual");
  require(n_scenes >= 0, ErrorCode::kInvalidInput, "corpus: n_scenes must be non-negative");
  require(bias >= 0 && bias <= 1, ErrorCode::kInvalidInput, "corpus: bias must lie in [0, 1]");
}

void Corpus::reindex() {
  index_.clear();
  for (std::size_t i = 0; i < scenes.size(); ++i) index_[scenes[i].scene_id] = i;
}

const SceneRecord* Corpus::find_scene(int scene_id) const {
  if (index_.size() != scenes.size()) const_cast<Corpus*>(this)->reindex();
  auto it = index_.find(scene_id);
  return it == index_.end() ? nullptr : &scenes[it->second];
}

const SceneRecord& Corpus::scene(int scene_id) const {
  const SceneRecord* s = find_scene(scene_id);
  require(s != nullptr, ErrorCode::kInvalidInput,
          "unknown scene_id " + std::to_string(scene_id));
  return *s;
}

Tensor object_prototype(const WorldConfig& world, int object_id) {
  Rng rng = Rng(world.world_seed).fork("prototype").fork(static_cast<std::uint64_t>(object_id));
  Tensor t({static_cast<std::size_t>(world.patch_dim)});
  for (auto& v : t.data) v = static_cast<Scalar>(rng.normal());
  return t;
}

Tensor derive_patches(const WorldConfig& world, std::span<const int> object_ids,
                      std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(world.n_visual);
  const auto dim = static_cast<std::size_t>(world.patch_dim);
  require(object_ids.size() * static_cast<std::size_t>(world.patches_per_object) <= n,
          ErrorCode::kInvalidInput, "scene has more object patches than visual tokens");
  Rng rng = Rng(seed).fork("patches");
  std::vector<std::size_t> slots(n);
  std::iota(slots.begin(), slots.end(), 0);
  rng.shuffle(slots.begin(), slots.end());

  Tensor patches({n, dim});
  std::size_t next = 0;
  for (int obj : object_ids) {
    const Tensor proto = object_prototype(world, obj);
    for (int k = 0; k < world.patches_per_object; ++k) {
      auto row = patches.row(slots[next++]);
      for (std::size_t c = 0; c < dim; ++c) row[c] = proto.data[c];
    }
  }
  std::vector<int> absent_companions;
  for (int obj : object_ids) {
    const int c = world.companion(obj);
    if (std::find(object_ids.begin(), object_ids.end(), c) == object_ids.end()) {
      absent_companions.push_back(c);
    }
  }
  for (; next < n; ++next) {
    if (!rng.bernoulli(world.confuser_prob)) continue;
    int ghost = -1;
    if (!absent_companions.empty() && rng.bernoulli(world.confuser_companion_prob)) {
      ghost = absent_companions[rng.below(absent_companions.size())];
    } else {
      auto related = [&](int o) {
        return std::find(object_ids.begin(), object_ids.end(), o) != object_ids.end() ||
               std::find(object_ids.begin(), object_ids.end(), world.companion(o)) != object_ids.end();
      };
      do {
        ghost = static_cast<int>(rng.below(static_cast<std::uint64_t>(world.catalog_size)));
      } while (related(ghost));
    }
    const Tensor proto = object_prototype(world, ghost);
    auto row = patches.row(slots[next]);
    for (std::size_t c = 0; c < dim; ++c) {
      row[c] = static_cast<Scalar>(world.confuser_amplitude) * proto.data[c];
    }
  }
  for (auto& v : patches.data) v += static_cast<Scalar>(rng.normal() * world.patch_noise);
  return patches;
}

std::vector<int> parse_mentions(const WorldConfig& world, std::span<const int> tokens) {
  std::set<int> found;
  for (int t : tokens) {
    if (world.is_object_token(t)) found.insert(t - vocab::kObjectBase);
  }
  return {found.begin(), found.end()};
}

CaptionRecord make_caption(const WorldConfig& world, int scene_id, std::vector<int> tokens) {
  CaptionRecord c;
  c.scene_id = scene_id;
  c.mentioned_object_ids = parse_mentions(world, tokens);
  c.tokens = std::move(tokens);
  return c;
}

Corpus generate_corpus(const CorpusConfig& config) {
  config.validate();
  const WorldConfig& world = config.world;
  Corpus corpus;
  corpus.world = world;
  Rng root(config.seed);
  for (int i = 0; i < config.n_scenes; ++i) {
    const int scene_id = config.first_scene_id + i;
    Rng rng = root.fork(static_cast<std::uint64_t>(scene_id));

    std::vector<int> objects;
    auto has = [&objects](int o) {
      return std::find(objects.begin(), objects.end(), o) != objects.end();
    };
    while (static_cast<int>(objects.size()) < config.objects_per_scene) {
      int o = 0;
      do {
        o = static_cast<int>(rng.below(static_cast<std::uint64_t>(world.catalog_size)));
      } while (has(o));
      objects.push_back(o);
      const int c = world.companion(o);
      if (static_cast<int>(objects.size()) < config.objects_per_scene && !has(c) &&
          rng.bernoulli(world.pair_prob)) {
        objects.push_back(c);
      }
    }
    std::sort(objects.begin(), objects.end());

    SceneRecord scene;
    scene.scene_id = scene_id;
    scene.object_ids = objects;
    scene.seed = rng.next_u64();
    scene.patches = derive_patches(world, scene.object_ids, scene.seed);

    std::vector<int> mentioned = objects;
    bool biased = false;
    std::vector<int> candidates;
    for (int o : objects) {
      const int c = world.companion(o);
      if (!has(c)) candidates.push_back(c);
    }
    if (!candidates.empty() && rng.bernoulli(config.bias)) {
      mentioned.push_back(candidates[rng.below(candidates.size())]);
      std::sort(mentioned.begin(), mentioned.end());
      biased = true;
    }
    std::vector<int> tokens;
    for (int o : mentioned) tokens.push_back(vocab::object_token(o));
    tokens.push_back(vocab::kEos);

    CaptionRecord caption = make_caption(world, scene_id, std::move(tokens));
    caption.biased = biased;
    corpus.scenes.push_back(std::move(scene));
    corpus.captions.push_back(std::move(caption));
  }
  corpus.reindex();
  return corpus;
}

std::vector<TrainingExample> lvlm_training_examples(const Corpus& corpus, int qa_per_scene,
                                                    std::uint64_t seed) {
  std::vector<TrainingExample> out;
  Rng rng = Rng(seed).fork("qa");
  for (const auto& cap : corpus.captions) {
    const SceneRecord& s = corpus.scene(cap.scene_id);
    out.push_back({&s.patches, vocab::describe_prompt(), cap.tokens});
  }
  for (const auto& s : corpus.scenes) {
    for (int q = 0; q < qa_per_scene; ++q) {
      const bool ask_present = q % 2 == 0;
      int obj = 0;
      if (ask_present) {
        obj = s.object_ids[rng.below(s.object_ids.size())];
      } else {
        do {
          obj = static_cast<int>(rng.below(static_cast<std::uint64_t>(corpus.world.catalog_size)));
        } while (s.contains(obj));
      }
      out.push_back({&s.patches, vocab::presence_question(obj),
                     {ask_present ? vocab::kYes : vocab::kNo, vocab::kEos}});
    }
  }
  return out;
}

nlohmann::json ChairScores::to_json() const {
  return {{"c_s", c_s},
          {"c_i", c_i},
          {"hallucinated", hallucinated},
          {"mentioned", mentioned},
          {"captions_with_hallucination", captions_with_hallucination},
          {"captions", captions},
          {"degenerate", degenerate}};
}

ChairScores chair_scores(const Corpus& scenes, std::span<const CaptionRecord> captions) {
  ChairScores s;
  for (const auto& cap : captions) {
    const SceneRecord* scene = scenes.find_scene(cap.scene_id);
    require(scene != nullptr, ErrorCode::kInvalidInput,
            "chair: unresolvable scene_id " + std::to_string(cap.scene_id));
    const std::vector<int> mentions = parse_mentions(scenes.world, cap.tokens);
    std::size_t bad = 0;
    for (int o : mentions) {
      if (!scene->contains(o)) ++bad;
    }
    s.mentioned += mentions.size();
    s.hallucinated += bad;
    if (bad > 0) ++s.captions_with_hallucination;
    ++s.captions;
  }
  s.c_s = s.captions == 0 ? 0.0
                          : static_cast<double>(s.captions_with_hallucination) /
                                static_cast<double>(s.captions);
  s.degenerate = s.mentioned == 0;
  s.c_i = s.degenerate ? 0.0
                       : static_cast<double>(s.hallucinated) / static_cast<double>(s.mentioned);
  return s;
}

nlohmann::json PopeReport::to_json() const {
  return {{"accuracy", accuracy}, {"f1", f1},           {"precision", precision},
          {"recall", recall},     {"questions", questions}, {"present", present},
          {"absent", absent},     {"unanswered", unanswered}, {"tp", tp},
          {"fp", fp},             {"tn", tn},           {"fn", fn}};
}

std::vector<PopeQuestion> build_pope_questions(const Corpus& scenes, int n_questions,
                                               std::uint64_t seed) {
  require(!scenes.scenes.empty(), ErrorCode::kInvalidInput, "pope: no scenes");
  require(n_questions >= 0, ErrorCode::kInvalidInput, "pope: negative question count");
  Rng rng = Rng(seed).fork("pope");
  std::vector<PopeQuestion> out;
  for (int i = 0; i < n_questions; ++i) {
    const SceneRecord& s = scenes.scenes[rng.below(scenes.scenes.size())];
    PopeQuestion q;
    q.scene_id = s.scene_id;
    q.present = i % 2 == 0;
    if (q.present) {
      q.object_id = s.object_ids[rng.below(s.object_ids.size())];
    } else {
      require(static_cast<int>(s.object_ids.size()) < scenes.world.catalog_size,
              ErrorCode::kInvalidInput, "pope: scene contains every catalog object");
      do {
        q.object_id = static_cast<int>(rng.below(static_cast<std::uint64_t>(scenes.world.catalog_size)));
      } while (s.contains(q.object_id));
    }
    q.prompt = vocab::presence_question(q.object_id);
    out.push_back(std::move(q));
  }
  return out;
}

PopeReport pope_probe(const Answerer& answer, const Corpus& scenes, int n_questions,
                      std::uint64_t seed) {
  PopeReport r;
  for (const auto& q : build_pope_questions(scenes, n_questions, seed)) {
    const std::vector<int> reply = answer(scenes.scene(q.scene_id), q.prompt);
    int verdict = -1;  // -1 none, 1 yes, 0 no
    for (std::size_t i = 0; i < reply.size() && i < 4; ++i) {
      if (reply[i] == vocab::kYes) { verdict = 1; break; }
      if (reply[i] == vocab::kNo) { verdict = 0; break; }
    }
    ++r.questions;
    q.present ? ++r.present : ++r.absent;
    if (verdict < 0) {
      ++r.unanswered;
      if (q.present) ++r.fn;
      continue;
    }
    if (verdict == 1) {
      q.present ? ++r.tp : ++r.fp;
    } else {
      q.present ? ++r.fn : ++r.tn;
    }
  }
  const auto d = [](std::size_t a) { return static_cast<double>(a); };
  r.accuracy = r.questions == 0 ? 0.0 : d(r.tp + r.tn) / d(r.questions);
  r.precision = (r.tp + r.fp) == 0 ? 0.0 : d(r.tp) / d(r.tp + r.fp);
  r.recall = (r.tp + r.fn) == 0 ? 0.0 : d(r.tp) / d(r.tp + r.fn);
  r.f1 = (2 * r.tp + r.fp + r.fn) == 0 ? 0.0 : 2.0 * d(r.tp) / d(2 * r.tp + r.fp + r.fn);
  return r;
}

ThroughputSummary throughput(std::span<const RunTiming> runs) {
  require(!runs.empty(), ErrorCode::kInvalidInput, "throughput: no runs");
  std::vector<double> tps;
  for (const auto& r : runs) {
    require(r.seconds > 0, ErrorCode::kInvalidInput, "throughput: non-positive wall time");
    tps.push_back(static_cast<double>(r.tokens) / r.seconds);
  }
  ThroughputSummary s;
  s.runs = tps.size();
  s.mean_tps = std::accumulate(tps.begin(), tps.end(), 0.0) / static_cast<double>(tps.size());
  double var = 0;
  for (double v : tps) var += (v - s.mean_tps) * (v - s.mean_tps);
  s.stdev_tps = tps.size() > 1 ? std::sqrt(var / static_cast<double>(tps.size() - 1)) : 0.0;
  return s;
}

nlohmann::json scene_to_json(const SceneRecord& s) {
  return {{"scene_id", s.scene_id}, {"object_ids", s.object_ids}, {"seed", s.seed}};
}

nlohmann::json caption_to_json(const CaptionRecord& c) {
  return {{"scene_id", c.scene_id},
          {"tokens", c.tokens},
          {"mentioned_object_ids", c.mentioned_object_ids},
          {"biased", c.biased}};
}

namespace {

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::kIo, "cannot open " + path + " for writing");
  return out;
}

template <typename F>
void for_each_line(const std::string& path, F&& f) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::kNotFound, "cannot open " + path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      f(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::kInvalidInput,
           path + ":" + std::to_string(lineno) + ": malformed record: " + e.what());
    }
  }
}

}  // namespace

void write_scenes(const std::string& path, std::span<const SceneRecord> scenes) {
  auto out = open_out(path);
  for (const auto& s : scenes) out << scene_to_json(s).dump() << '\n';
  require(static_cast<bool>(out), ErrorCode::kIo, "write failed: " + path);
}

void write_captions(const std::string& path, std::span<const CaptionRecord> captions) {
  auto out = open_out(path);
  for (const auto& c : captions) out << caption_to_json(c).dump() << '\n';
  require(static_cast<bool>(out), ErrorCode::kIo, "write failed: " + path);
}

std::vector<SceneRecord> read_scenes(const std::string& path, const WorldConfig& world) {
  std::vector<SceneRecord> out;
  for_each_line(path, [&](const nlohmann::json& j) {
    SceneRecord s;
    s.scene_id = j.at("scene_id").get<int>();
    s.object_ids = j.at("object_ids").get<std::vector<int>>();
    s.seed = j.at("seed").get<std::uint64_t>();
    require(!s.object_ids.empty(), ErrorCode::kInvalidInput, "scene with no objects");
    for (int o : s.object_ids) {
      require(o >= 0 && o < world.catalog_size, ErrorCode::kInvalidInput,
              "scene object outside catalog");
    }
    std::sort(s.object_ids.begin(), s.object_ids.end());
    s.patches = derive_patches(world, s.object_ids, s.seed);
    out.push_back(std::move(s));
  });
  return out;
}

std::vector<CaptionRecord> read_captions(const std::string& path, const WorldConfig& world) {
  std::vector<CaptionRecord> out;
  for_each_line(path, [&](const nlohmann::json& j) {
    out.push_back(make_caption(world, j.at("scene_id").get<int>(),
                               j.at("tokens").get<std::vector<int>>()));
    out.back().biased = j.value("biased", false);
  });
  return out;
}

CMIVLD_NS_END
