// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

// Visual token purifier: a small transformer over the concatenated content
// embeddings [z_v, z_x, z_y<t] that predicts a drop/retain distribution for
// every visual token, trained through a Gumbel-Softmax relaxation against the
// frozen backbone.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "model.hpp"

CMIVLD_NS_BEGIN

struct PurifierConfig {
  int n_blocks = 2;
  int d_model = 64;    // width of the backbone embeddings it reads
  int d_hidden = 8;    // internal width
  int n_heads = 2;
  int mlp_hidden = 16;
  int n_visual = 16;
  double tau = 0.5;

  void validate() const;
  nlohmann::json to_json() const;
  static PurifierConfig from_json(const nlohmann::json& j);
  /// Default purifier sized for a backbone.
  static PurifierConfig for_model(const ModelConfig& model);
  bool operator==(const PurifierConfig&) const = default;
};

struct PurifierParams {
  Var in_w, in_b;        // [d_model, d_hidden], [d_hidden]
  Var pos_visual;        // [n_visual, d_hidden]
  Var text_segment;      // [1, d_hidden]
  std::vector<LayerParams> blocks;
  Var lnf_g, lnf_b;
  Var head_w, head_b;    // [d_hidden, 2], [2]

  std::vector<std::pair<std::string, Var>> named() const;
  std::vector<Var> all() const;
  std::size_t parameter_count() const;
  void set_trainable(bool trainable) const;
  PurifierParams clone() const;
};

/// A purifier ready for inference.
struct Purifier {
  PurifierConfig config;
  PurifierParams params;
};

/// Fresh weights with a unit-scale random output head.
PurifierParams init_purifier(const PurifierConfig& config, std::uint64_t seed);

PurifierParams purifier_from_arrays(const PurifierConfig& config,
                                    const std::vector<std::pair<std::string, Tensor>>& arrays);

/// Throws invalid-config unless the purifier has under 1% of the backbone's
/// parameters and matches its widths.
void check_compatible(const PurifierConfig& config, const PurifierParams& pp,
                      const ModelConfig& model, std::size_t model_parameter_count);

/// pi over {drop, retain} per visual token; rows sum to 1.
struct MaskDistribution {
  Tensor pi;  // [N, 2]

  std::size_t size() const { return pi.rows(); }
  Scalar retain(std::size_t j) const { return pi.at(j, 1); }
  void validate() const;
};

/// Raw two-way logits [N, 2] for the visual positions of `z` ([n, d_model]).
Var purifier_logits(const PurifierParams& pp, const PurifierConfig& config, const Tensor& z);

MaskDistribution purifier_forward(const PurifierParams& pp, const PurifierConfig& config,
                                  const Tensor& z);

/// Row-wise argmax over {drop, retain}; an exact tie keeps the token.
SoftVisualMask extract_mask(const MaskDistribution& dist);

/// Keeps exactly k tokens with the highest retain probability (lower index
/// wins ties).
SoftVisualMask top_k_mask(const MaskDistribution& dist, std::size_t k);

/// |sum(w)/N - gamma|.
double retention_penalty(const Tensor& weights, double gamma);
Var retention_penalty(const Var& weights, double gamma);

/// round(gamma * N), clamped to [1, N].
std::size_t retained_count(double gamma, std::size_t n);

enum class AttentionSource {
  kMasked,    // attention of the masked pass (default)
  kUnmasked,  // attention of the full-image pass, weighted by the mask
};

struct TrainConfig {
  double alpha = 100.0;
  double beta = 500.0;
  double gamma = 0.8;
  double tau = 0.5;
  double learning_rate = 1e-3;
  int epochs = 5;
  int batch_size = 8;
  std::uint64_t seed = 0;
  AttentionSource attention = AttentionSource::kMasked;

  void validate() const;
  nlohmann::json to_json() const;
};

/// One decoding step of a captioned scene: predict y[t] from y[:t].
struct StepExample {
  const Tensor* visual = nullptr;
  std::span<const int> prompt;
  std::span<const int> y;
  std::size_t t = 0;
};

struct ObjectiveTerms {
  Var loss;
  double log_ratio = 0;  // ln p(y_t|v*m, x, y<t) - ln p(y_t|x, y<t)
  double attention = 0;  // Attn_i(v; m)
  double penalty = 0;    // |mean(m) - gamma|
};

/// Training objective for a given (differentiable) soft mask:
/// -(log_ratio + alpha * attention) + beta * penalty.
ObjectiveTerms mask_objective(const TinyLvlmParams& params, const ModelConfig& config,
                              const StepExample& example, const Var& mask,
                              const TrainConfig& tc);

/// Full training loss with the purifier's Gumbel-Softmax mask and explicit noise.
ObjectiveTerms training_loss(const TinyLvlmParams& params, const ModelConfig& config,
                             const PurifierParams& pp, const PurifierConfig& pcfg,
                             const StepExample& example, const TrainConfig& tc,
                             const Tensor& noise);

ObjectiveTerms training_loss(const TinyLvlmParams& params, const ModelConfig& config,
                             const PurifierParams& pp, const PurifierConfig& pcfg,
                             const StepExample& example, const TrainConfig& tc, Rng& rng);

struct PurifierTrainReport {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_retained_fraction;  // mean of hard masks on training steps
  long steps = 0;
};

PurifierTrainReport train_purifier(const TinyLvlmParams& params, const ModelConfig& config,
                                   PurifierParams& pp, const PurifierConfig& pcfg,
                                   std::span<const TrainingExample> corpus,
                                   const TrainConfig& tc,
                                   const std::function<void(int, double)>& on_epoch = {});

/// Retained counts of extracted (argmax) masks at one random step per example.
std::vector<std::size_t> heldout_retained_counts(const TinyLvlmParams& params,
                                                 const ModelConfig& config,
                                                 const PurifierParams& pp,
                                                 const PurifierConfig& pcfg,
                                                 std::span<const TrainingExample> corpus,
                                                 std::uint64_t seed);

struct LossGradcheck {
  double max_rel_error = 0;  // worst over configurations
  std::vector<double> per_config;
  nlohmann::json to_json() const;
};

/// Compares the analytic gradient of training_loss (frozen Gumbel noise) with
/// central differences on `n_configs` random small backbones and purifiers.
/// Meaningful only in the double-precision build.
LossGradcheck purifier_loss_gradcheck(int n_configs, std::uint64_t seed, double h = 1e-5);

CMIVLD_NS_END
