// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

// Toy multimodal causal transformer. A sequence is laid out as
// [visual patches | prompt tokens | generated tokens]; text positions always
// start at index n_visual so the text-only branch differs from the
// with-image branch only by the absence of the visual rows.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "autograd.hpp"
#include "json.hpp"

CMIVLD_NS_BEGIN

struct ModelConfig {
  int vocab_size = 256;
  int n_visual = 16;
  int patch_dim = 16;
  int d_model = 64;
  int n_heads = 4;
  int d_head = 16;
  int n_layers = 4;
  int mlp_hidden = 256;
  int max_seq = 64;
  int purify_layer = 2;

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

struct LayerParams {
  Var ln1_g, ln1_b;
  Var w_qkv, b_qkv;
  Var w_o, b_o;
  Var ln2_g, ln2_b;
  Var w_fc1, b_fc1;
  Var w_fc2, b_fc2;
};

struct TinyLvlmParams {
  Var token_emb;  // [vocab, d]
  Var pos_emb;    // [max_seq, d]
  Var vis_w;      // [patch_dim, d]
  Var vis_b;      // [d]
  std::vector<LayerParams> layers;
  Var lnf_g, lnf_b;
  Var w_out;  // [d, vocab]
  Var b_out;  // [vocab]

  std::vector<std::pair<std::string, Var>> named() const;
  std::vector<Var> all() const;
  std::size_t parameter_count() const;
  void set_trainable(bool trainable) const;
  TinyLvlmParams clone() const;
};

TinyLvlmParams init_params(const ModelConfig& config, std::uint64_t seed);

/// Rebuilds parameters from named arrays, checking every shape against config.
TinyLvlmParams params_from_arrays(const ModelConfig& config,
                                  const std::vector<std::pair<std::string, Tensor>>& arrays);

/// Per-visual-token weights in [0, 1] applied from purify_layer onward.
struct SoftVisualMask {
  Tensor weights;
  bool hard = false;

  static SoftVisualMask ones(std::size_t n);
  static SoftVisualMask from_bits(std::span<const int> bits);
  std::size_t size() const { return weights.numel(); }
  std::size_t retained() const;
  void validate() const;
};

struct SequenceLayout {
  std::size_t n_visual = 0;  // 0 when the image is absent
  std::size_t prompt_len = 0;
  std::size_t generated_len = 0;

  std::size_t length() const { return n_visual + prompt_len + generated_len; }
  std::size_t text_begin() const { return n_visual; }
};

struct ModelInput {
  const Tensor* visual = nullptr;  // [n_visual, patch_dim] or null for text-only
  std::span<const int> prompt;
  std::span<const int> generated;
};

struct ForwardTrace {
  Tensor logits;                   // [vocab] at the last position
  std::vector<Tensor> attention;   // per layer, [H, n, n]
  SequenceLayout layout;
};

enum class LogitRows {
  kLast,  // only the last position
  kText,  // every position that predicts a generated token (and the next one)
};

struct GraphOutput {
  Var logits;  // [rows, vocab]
  std::vector<Var> attention;
  SequenceLayout layout;
};

/// Hidden state entering purify_layer, shared by every mask of one context.
struct PrefixState {
  Var hidden;
  std::vector<Var> attention;
  SequenceLayout layout;
};

PrefixState forward_prefix(const TinyLvlmParams& params, const ModelConfig& config,
                           const ModelInput& input);

/// `mask_weights` ([n_visual], may be null) enters every layer from
/// purify_layer onward as an additive ln(max(w, 1e-10)) on attention logits
/// toward visual positions.
GraphOutput forward_suffix(const TinyLvlmParams& params, const ModelConfig& config,
                           const PrefixState& prefix, const Var& mask_weights, LogitRows rows);

GraphOutput forward_graph(const TinyLvlmParams& params, const ModelConfig& config,
                          const ModelInput& input, const Var& mask_weights, LogitRows rows);

ForwardTrace forward(const TinyLvlmParams& params, const ModelConfig& config,
                     const ModelInput& input, const SoftVisualMask* mask = nullptr);

/// Pre-norm transformer block. `attention_out` receives the [H, n, n]
/// probabilities when non-null.
Var transformer_layer(const LayerParams& layer, std::size_t n_heads, const Var& x,
                      const Var& column_bias, bool causal, Var* attention_out);

/// Projected visual patches, [n_visual, d], without positional terms.
Var visual_embeddings(const TinyLvlmParams& params, const Tensor& patches);

/// Input embeddings [visual | prompt | generated] plus positions.
Var embed_sequence(const TinyLvlmParams& params, const ModelConfig& config,
                   const ModelInput& input, SequenceLayout* layout);

/// Concatenated content embeddings z = [z_v, z_x, z_y] read by the purifier.
Tensor context_embeddings(const TinyLvlmParams& params, const ModelConfig& config,
                          const ModelInput& input);

/// Column bias [n] carrying ln(max(w, 1e-10)) on visual columns and 0 elsewhere.
Var visual_column_bias(const Var& mask_weights, const SequenceLayout& layout);

inline constexpr Scalar kMaskFloor = Scalar(1e-10);

/// (1/H) * sum_h sum_j w_j * A[h, last, j] over visual columns j.
Scalar attn_aggregate(const ForwardTrace& trace, std::size_t layer,
                      const SoftVisualMask* mask = nullptr);

/// Differentiable form of attn_aggregate on a [H, n, n] probability node.
Var attn_visual_mass(const Var& probs, std::size_t n_visual, const Var& weights);

struct TrainingExample {
  const Tensor* visual = nullptr;
  std::vector<int> prompt;
  std::vector<int> target;
};

struct LvlmTrainOptions {
  double learning_rate = 3e-3;
  int epochs = 10;
  int batch_size = 16;
  long max_steps = 0;  // 0: run all epochs
  double image_dropout = 0.5;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  std::function<void(int epoch, double loss)> on_epoch;
};

struct LvlmTrainReport {
  std::vector<double> epoch_loss;
  double initial_loss = 0;
  double final_loss = 0;
  long steps = 0;
};

/// Mean next-token cross-entropy of one example (teacher forcing).
Var example_loss(const TinyLvlmParams& params, const ModelConfig& config, const ModelInput& input,
                 std::span<const int> target);

LvlmTrainReport train_lvlm(TinyLvlmParams& params, const ModelConfig& config,
                           std::span<const TrainingExample> corpus,
                           const LvlmTrainOptions& options);

CMIVLD_NS_END
