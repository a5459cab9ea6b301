// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

// Synthetic scenes with a controllable co-occurrence bias, plus CHAIR and
// POPE-style metrics over them.
//
// Objects come in companion pairs (2k, 2k+1). Scenes tend to contain both
// members of a pair, and with probability `bias` a caption also names the
// absent companion of a present object. A model trained on these captions
// picks up the language prior "after A comes its companion" that drives
// object hallucination.

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "model.hpp"
#include "tensor.hpp"

CMIVLD_NS_BEGIN

namespace vocab {
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kYes = 3;
inline constexpr int kNo = 4;
inline constexpr int kDescribe = 5;
inline constexpr int kImage = 6;
inline constexpr int kIs = 7;
inline constexpr int kThere = 8;
inline constexpr int kQuestion = 9;
inline constexpr int kObjectBase = 16;

inline int object_token(int object_id) { return kObjectBase + object_id; }

/// Reserved prompt standing in for "Please describe this image in detail."
inline const std::vector<int>& describe_prompt() {
  static const std::vector<int> p{kDescribe, kImage};
  return p;
}

inline std::vector<int> presence_question(int object_id) {
  return {kIs, kThere, object_token(object_id), kQuestion};
}
}  // namespace vocab

struct WorldConfig {
  int catalog_size = 24;
  int n_visual = 16;
  int patch_dim = 16;
  int patches_per_object = 4;
  double pair_prob = 0.9;            // chance a picked object brings its companion
  double patch_noise = 1.0;          // stddev of per-entry patch noise
  double confuser_prob = 0.3;        // background patch shows a faint absent object
  double confuser_amplitude = 0.3;
  double confuser_companion_prob = 0.0;  // a confuser depicts an absent companion, else an unrelated object
  std::uint64_t world_seed = 1234;   // object prototypes

  void validate() const;
  nlohmann::json to_json() const;
  static WorldConfig from_json(const nlohmann::json& j);

  int companion(int object_id) const { return object_id ^ 1; }
  bool is_object_token(int token) const {
    return token >= vocab::kObjectBase && token < vocab::kObjectBase + catalog_size;
  }
};

struct SceneRecord {
  int scene_id = 0;
  std::vector<int> object_ids;  // sorted, unique
  std::uint64_t seed = 0;
  Tensor patches;               // [n_visual, patch_dim]

  bool contains(int object_id) const;
};

struct CaptionRecord {
  int scene_id = 0;
  std::vector<int> tokens;
  std::vector<int> mentioned_object_ids;  // sorted, unique
  bool biased = false;                     // generator injected an absent object
};

struct CorpusConfig {
  WorldConfig world;
  int n_scenes = 2000;
  int objects_per_scene = 3;
  double bias = 0.3;
  std::uint64_t seed = 1;
  int first_scene_id = 0;

  void validate() const;
};

struct Corpus {
  WorldConfig world;
  std::vector<SceneRecord> scenes;
  std::vector<CaptionRecord> captions;

  const SceneRecord& scene(int scene_id) const;
  const SceneRecord* find_scene(int scene_id) const;
  void reindex();

 private:
  std::map<int, std::size_t> index_;
};

/// Patch tensor for a scene; a pure function of (world, object_ids, seed).
Tensor derive_patches(const WorldConfig& world, std::span<const int> object_ids,
                      std::uint64_t seed);

/// Prototype embedding of one catalog object.
Tensor object_prototype(const WorldConfig& world, int object_id);

Corpus generate_corpus(const CorpusConfig& config);

std::vector<int> parse_mentions(const WorldConfig& world, std::span<const int> tokens);
CaptionRecord make_caption(const WorldConfig& world, int scene_id, std::vector<int> tokens);

/// Description examples plus `qa_per_scene` presence questions per scene.
/// Pointers refer into `corpus`, which must outlive the result.
std::vector<TrainingExample> lvlm_training_examples(const Corpus& corpus, int qa_per_scene,
                                                    std::uint64_t seed);

struct ChairScores {
  double c_s = 0;
  double c_i = 0;
  std::size_t hallucinated = 0;
  std::size_t mentioned = 0;
  std::size_t captions_with_hallucination = 0;
  std::size_t captions = 0;
  bool degenerate = false;  // no mentions at all; c_i reported as 0

  nlohmann::json to_json() const;
};

ChairScores chair_scores(const Corpus& scenes, std::span<const CaptionRecord> captions);

struct PopeQuestion {
  int scene_id = 0;
  int object_id = 0;
  bool present = false;
  std::vector<int> prompt;
};

struct PopeReport {
  double accuracy = 0;
  double f1 = 0;
  double precision = 0;
  double recall = 0;
  std::size_t questions = 0;
  std::size_t present = 0;
  std::size_t absent = 0;
  std::size_t unanswered = 0;
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;

  nlohmann::json to_json() const;
};

/// Balanced present/absent questions, "random" negative sampling.
std::vector<PopeQuestion> build_pope_questions(const Corpus& scenes, int n_questions,
                                               std::uint64_t seed);

using Answerer = std::function<std::vector<int>(const SceneRecord&, std::span<const int> prompt)>;

/// Scores answers by the first yes/no token within the first 4 emitted
/// tokens. Answers with neither count as incorrect and are tallied in
/// `unanswered`.
PopeReport pope_probe(const Answerer& answer, const Corpus& scenes, int n_questions,
                      std::uint64_t seed);

struct ThroughputSummary {
  double mean_tps = 0;
  double stdev_tps = 0;
  std::size_t runs = 0;
};

struct RunTiming {
  std::size_t tokens = 0;
  double seconds = 0;
};

ThroughputSummary throughput(std::span<const RunTiming> runs);

// Line-delimited JSON corpus files.
nlohmann::json scene_to_json(const SceneRecord& s);
nlohmann::json caption_to_json(const CaptionRecord& c);
void write_scenes(const std::string& path, std::span<const SceneRecord> scenes);
void write_captions(const std::string& path, std::span<const CaptionRecord> captions);
std::vector<SceneRecord> read_scenes(const std::string& path, const WorldConfig& world);
std::vector<CaptionRecord> read_captions(const std::string& path, const WorldConfig& world);

CMIVLD_NS_END
