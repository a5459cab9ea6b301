// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

#include "model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "error.hpp"
#include "optim.hpp"

CMIVLD_NS_BEGIN

void ModelConfig::validate() const {
  auto positive = [](int v) { return v > 0; };
  require(positive(vocab_size) && positive(patch_dim) && positive(d_model) && positive(n_heads) &&
              positive(d_head) && positive(n_layers) && positive(mlp_hidden) &&
              positive(max_seq),
          ErrorCode::kInvalidConfig, "model config: sizes must be positive");
  require(n_visual >= 1, ErrorCode::kInvalidConfig, "model config: n_visual must be >= 1");
  require(d_model == n_heads * d_head, ErrorCode::kInvalidConfig,
          "model config: d_model must equal n_heads * d_head");
  require(purify_layer >= 0 && purify_layer < n_layers, ErrorCode::kInvalidConfig,
          "model config: purify_layer out of range");
  require(max_seq > n_visual, ErrorCode::kInvalidConfig,
          "model config: max_seq must exceed n_visual");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"kind", "model"},          {"vocab_size", vocab_size}, {"n_visual", n_visual},
          {"patch_dim", patch_dim},   {"d_model", d_model},       {"n_heads", n_heads},
          {"d_head", d_head},         {"n_layers", n_layers},     {"mlp_hidden", mlp_hidden},
          {"max_seq", max_seq},       {"purify_layer", purify_layer}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.n_visual = j.value("n_visual", c.n_visual);
    c.patch_dim = j.value("patch_dim", c.patch_dim);
    c.d_model = j.value("d_model", c.d_model);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_head = j.value("d_head", c.d_head);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
    c.max_seq = j.value("max_seq", c.max_seq);
    c.purify_layer = j.value("purify_layer", c.purify_layer);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kInvalidConfig, std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

Var normal_param(std::vector<std::size_t> shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = static_cast<Scalar>(rng.normal() * stddev);
  return ag::param(std::move(t));
}

Var filled_param(std::vector<std::size_t> shape, Scalar value) {
  return ag::param(Tensor(std::move(shape), value));
}

struct ShapeSpec {
  std::string name;
  std::vector<std::size_t> shape;
};

std::vector<ShapeSpec> expected_shapes(const ModelConfig& c) {
  const std::size_t d = sz(c.d_model);
  std::vector<ShapeSpec> out{
      {"token_emb", {sz(c.vocab_size), d}},
      {"pos_emb", {sz(c.max_seq), d}},
      {"vis_w", {sz(c.patch_dim), d}},
      {"vis_b", {d}},
  };
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    out.push_back({p + "ln1_g", {d}});
    out.push_back({p + "ln1_b", {d}});
    out.push_back({p + "w_qkv", {d, 3 * d}});
    out.push_back({p + "b_qkv", {3 * d}});
    out.push_back({p + "w_o", {d, d}});
    out.push_back({p + "b_o", {d}});
    out.push_back({p + "ln2_g", {d}});
    out.push_back({p + "ln2_b", {d}});
    out.push_back({p + "w_fc1", {d, sz(c.mlp_hidden)}});
    out.push_back({p + "b_fc1", {sz(c.mlp_hidden)}});
    out.push_back({p + "w_fc2", {sz(c.mlp_hidden), d}});
    out.push_back({p + "b_fc2", {d}});
  }
  out.push_back({"lnf_g", {d}});
  out.push_back({"lnf_b", {d}});
  out.push_back({"w_out", {d, sz(c.vocab_size)}});
  out.push_back({"b_out", {sz(c.vocab_size)}});
  return out;
}

}  // namespace

std::vector<std::pair<std::string, Var>> TinyLvlmParams::named() const {
  std::vector<std::pair<std::string, Var>> out{
      {"token_emb", token_emb}, {"pos_emb", pos_emb}, {"vis_w", vis_w}, {"vis_b", vis_b}};
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    const auto& L = layers[l];
    out.insert(out.end(), {{p + "ln1_g", L.ln1_g},
                           {p + "ln1_b", L.ln1_b},
                           {p + "w_qkv", L.w_qkv},
                           {p + "b_qkv", L.b_qkv},
                           {p + "w_o", L.w_o},
                           {p + "b_o", L.b_o},
                           {p + "ln2_g", L.ln2_g},
                           {p + "ln2_b", L.ln2_b},
                           {p + "w_fc1", L.w_fc1},
                           {p + "b_fc1", L.b_fc1},
                           {p + "w_fc2", L.w_fc2},
                           {p + "b_fc2", L.b_fc2}});
  }
  out.insert(out.end(),
             {{"lnf_g", lnf_g}, {"lnf_b", lnf_b}, {"w_out", w_out}, {"b_out", b_out}});
  return out;
}

std::vector<Var> TinyLvlmParams::all() const {
  std::vector<Var> out;
  for (auto& [name, v] : named()) out.push_back(v);
  return out;
}

std::size_t TinyLvlmParams::parameter_count() const {
  std::size_t n = 0;
  for (auto& v : all()) n += v->value.numel();
  return n;
}

void TinyLvlmParams::set_trainable(bool trainable) const {
  for (auto& v : all()) {
    v->requires_grad = trainable;
    v->zero_grad();
  }
}

TinyLvlmParams TinyLvlmParams::clone() const {
  std::map<const Node*, Var> copies;
  auto dup = [&copies](const Var& v) {
    auto n = std::make_shared<Node>();
    n->value = v->value;
    n->requires_grad = v->requires_grad;
    return n;
  };
  TinyLvlmParams out = *this;
  out.token_emb = dup(token_emb);
  out.pos_emb = dup(pos_emb);
  out.vis_w = dup(vis_w);
  out.vis_b = dup(vis_b);
  for (auto& L : out.layers) {
    for (Var* v : {&L.ln1_g, &L.ln1_b, &L.w_qkv, &L.b_qkv, &L.w_o, &L.b_o, &L.ln2_g, &L.ln2_b,
                   &L.w_fc1, &L.b_fc1, &L.w_fc2, &L.b_fc2}) {
      *v = dup(*v);
    }
  }
  out.lnf_g = dup(lnf_g);
  out.lnf_b = dup(lnf_b);
  out.w_out = dup(w_out);
  out.b_out = dup(b_out);
  return out;
}

TinyLvlmParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng = Rng(seed).fork("lvlm-init");
  const std::size_t d = sz(config.d_model);
  const double std_proj = 0.02 / std::sqrt(2.0 * config.n_layers);
  TinyLvlmParams p;
  p.token_emb = normal_param({sz(config.vocab_size), d}, 0.02, rng);
  p.pos_emb = normal_param({sz(config.max_seq), d}, 0.02, rng);
  p.vis_w = normal_param({sz(config.patch_dim), d}, 1.0 / std::sqrt(config.patch_dim), rng);
  p.vis_b = filled_param({d}, 0);
  for (int l = 0; l < config.n_layers; ++l) {
    LayerParams L;
    L.ln1_g = filled_param({d}, 1);
    L.ln1_b = filled_param({d}, 0);
    L.w_qkv = normal_param({d, 3 * d}, 0.02, rng);
    L.b_qkv = filled_param({3 * d}, 0);
    L.w_o = normal_param({d, d}, std_proj, rng);
    L.b_o = filled_param({d}, 0);
    L.ln2_g = filled_param({d}, 1);
    L.ln2_b = filled_param({d}, 0);
    L.w_fc1 = normal_param({d, sz(config.mlp_hidden)}, 0.02, rng);
    L.b_fc1 = filled_param({sz(config.mlp_hidden)}, 0);
    L.w_fc2 = normal_param({sz(config.mlp_hidden), d}, std_proj, rng);
    L.b_fc2 = filled_param({d}, 0);
    p.layers.push_back(std::move(L));
  }
  p.lnf_g = filled_param({d}, 1);
  p.lnf_b = filled_param({d}, 0);
  p.w_out = normal_param({d, sz(config.vocab_size)}, 0.02, rng);
  p.b_out = filled_param({sz(config.vocab_size)}, 0);
  return p;
}

TinyLvlmParams params_from_arrays(const ModelConfig& config,
                                  const std::vector<std::pair<std::string, Tensor>>& arrays) {
  config.validate();
  std::map<std::string, const Tensor*> by_name;
  for (auto& [name, t] : arrays) by_name[name] = &t;
  TinyLvlmParams p = init_params(config, 0);
  auto named = p.named();
  const auto shapes = expected_shapes(config);
  require(arrays.size() == shapes.size(), ErrorCode::kCorruptCheckpoint,
          "model checkpoint: expected " + std::to_string(shapes.size()) + " arrays, found " +
              std::to_string(arrays.size()));
  for (std::size_t i = 0; i < named.size(); ++i) {
    auto it = by_name.find(named[i].first);
    require(it != by_name.end(), ErrorCode::kCorruptCheckpoint,
            "model checkpoint: missing array " + named[i].first);
    require(it->second->shape == shapes[i].shape, ErrorCode::kCorruptCheckpoint,
            "model checkpoint: shape mismatch for " + named[i].first);
    named[i].second->value = *it->second;
  }
  return p;
}

SoftVisualMask SoftVisualMask::ones(std::size_t n) {
  return SoftVisualMask{Tensor({n}, Scalar(1)), true};
}

SoftVisualMask SoftVisualMask::from_bits(std::span<const int> bits) {
  SoftVisualMask m{Tensor({bits.size()}), true};
  for (std::size_t i = 0; i < bits.size(); ++i) {
    require(bits[i] == 0 || bits[i] == 1, ErrorCode::kInvalidInput, "mask bits must be 0 or 1");
    m.weights.data[i] = static_cast<Scalar>(bits[i]);
  }
  return m;
}

std::size_t SoftVisualMask::retained() const {
  return static_cast<std::size_t>(
      std::count_if(weights.data.begin(), weights.data.end(), [](Scalar w) { return w >= 0.5; }));
}

void SoftVisualMask::validate() const {
  for (auto w : weights.data) {
    require(std::isfinite(w) && w >= 0 && w <= 1, ErrorCode::kInvalidInput,
            "mask weights must lie in [0, 1]");
    if (hard) {
      require(w == 0 || w == 1, ErrorCode::kInvalidInput, "hard mask weights must be 0 or 1");
    }
  }
}

Var visual_embeddings(const TinyLvlmParams& params, const Tensor& patches) {
  return ag::linear(ag::constant(patches), params.vis_w, params.vis_b);
}

namespace {

void check_input(const ModelConfig& config, const ModelInput& input) {
  require(!input.prompt.empty(), ErrorCode::kInvalidInput, "prompt must not be empty");
  if (input.visual) {
    require(input.visual->rank() == 2 && input.visual->dim(0) == sz(config.n_visual) &&
                input.visual->dim(1) == sz(config.patch_dim),
            ErrorCode::kInvalidInput, "visual patches must be [n_visual, patch_dim]");
  }
  const std::size_t n = sz(config.n_visual) + input.prompt.size() + input.generated.size();
  require(n <= sz(config.max_seq), ErrorCode::kSequenceTooLong,
          "sequence length " + std::to_string(n) + " exceeds max_seq " +
              std::to_string(config.max_seq));
  for (auto span : {input.prompt, input.generated}) {
    for (int t : span) {
      require(t >= 0 && t < config.vocab_size, ErrorCode::kInvalidInput,
              "token " + std::to_string(t) + " outside vocabulary");
    }
  }
}

std::vector<int> text_tokens(const ModelInput& input) {
  std::vector<int> ids(input.prompt.begin(), input.prompt.end());
  ids.insert(ids.end(), input.generated.begin(), input.generated.end());
  return ids;
}

}  // namespace

Var embed_sequence(const TinyLvlmParams& params, const ModelConfig& config,
                   const ModelInput& input, SequenceLayout* layout) {
  check_input(config, input);
  SequenceLayout lay;
  lay.n_visual = input.visual ? sz(config.n_visual) : 0;
  lay.prompt_len = input.prompt.size();
  lay.generated_len = input.generated.size();

  const std::vector<int> ids = text_tokens(input);
  Var text = ag::embedding(params.token_emb, ids);
  std::vector<int> text_pos(ids.size());
  std::iota(text_pos.begin(), text_pos.end(), config.n_visual);
  text = ag::add(text, ag::embedding(params.pos_emb, text_pos));

  Var hidden = text;
  if (input.visual) {
    std::vector<int> vis_pos(sz(config.n_visual));
    std::iota(vis_pos.begin(), vis_pos.end(), 0);
    Var vis = ag::add(visual_embeddings(params, *input.visual),
                      ag::embedding(params.pos_emb, vis_pos));
    hidden = ag::concat({vis, text});
  }
  if (layout) *layout = lay;
  return hidden;
}

Tensor context_embeddings(const TinyLvlmParams& params, const ModelConfig& config,
                          const ModelInput& input) {
  check_input(config, input);
  require(input.visual != nullptr, ErrorCode::kInvalidInput,
          "context embeddings require visual input");
  const std::vector<int> ids = text_tokens(input);
  Var z = ag::concat(
      {visual_embeddings(params, *input.visual), ag::embedding(params.token_emb, ids)});
  return z->value;
}

Var visual_column_bias(const Var& mask_weights, const SequenceLayout& layout) {
  require(layout.n_visual > 0, ErrorCode::kInvalidInput, "mask given without visual input");
  require(mask_weights->value.numel() == layout.n_visual, ErrorCode::kInvalidInput,
          "mask length must equal n_visual");
  Var log_w = ag::log_clamped(mask_weights, kMaskFloor);
  const std::size_t rest = layout.length() - layout.n_visual;
  if (rest == 0) return log_w;
  return ag::concat({log_w, ag::constant(Tensor({rest}, Scalar(0)))});
}

Var transformer_layer(const LayerParams& L, std::size_t n_heads, const Var& x,
                      const Var& column_bias, bool causal, Var* attention_out) {
  const std::size_t d = x->value.cols();
  Var h = ag::layer_norm(x, L.ln1_g, L.ln1_b);
  Var qkv = ag::linear(h, L.w_qkv, L.b_qkv);
  // Split [n, 3d] into q, k, v by transposing through columns.
  const std::size_t n = x->value.rows();
  auto take = [&](std::size_t part) {
    Tensor sel({n, d});
    for (std::size_t r = 0; r < n; ++r) {
      std::copy_n(qkv->value.data.data() + r * 3 * d + part * d, d, sel.data.data() + r * d);
    }
    return ag::make_result(std::move(sel), {qkv}, [part, d, n](Node& self) {
      Node& p = *self.parents[0];
      if (!p.requires_grad) return;
      auto& g = p.grad_buffer();
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < d; ++c) {
          g.data[r * 3 * d + part * d + c] += self.grad.data[r * d + c];
        }
      }
    });
  };
  Var q = take(0);
  Var k = take(1);
  Var v = take(2);
  Var probs = ag::attention_probs(q, k, column_bias, n_heads, causal);
  if (attention_out) *attention_out = probs;
  Var attn = ag::linear(ag::attention_apply(probs, v, n_heads), L.w_o, L.b_o);
  Var x1 = ag::add(x, attn);
  Var m = ag::layer_norm(x1, L.ln2_g, L.ln2_b);
  m = ag::linear(ag::gelu(ag::linear(m, L.w_fc1, L.b_fc1)), L.w_fc2, L.b_fc2);
  return ag::add(x1, m);
}

PrefixState forward_prefix(const TinyLvlmParams& params, const ModelConfig& config,
                           const ModelInput& input) {
  PrefixState st;
  st.hidden = embed_sequence(params, config, input, &st.layout);
  for (int l = 0; l < config.purify_layer; ++l) {
    Var a;
    st.hidden = transformer_layer(params.layers[sz(l)], sz(config.n_heads), st.hidden, nullptr,
                                  true, &a);
    st.attention.push_back(a);
  }
  return st;
}

GraphOutput forward_suffix(const TinyLvlmParams& params, const ModelConfig& config,
                           const PrefixState& prefix, const Var& mask_weights, LogitRows rows) {
  GraphOutput out;
  out.layout = prefix.layout;
  out.attention = prefix.attention;
  Var bias;
  if (mask_weights) bias = visual_column_bias(mask_weights, prefix.layout);
  Var x = prefix.hidden;
  for (int l = config.purify_layer; l < config.n_layers; ++l) {
    Var a;
    x = transformer_layer(params.layers[sz(l)], sz(config.n_heads), x, bias, true, &a);
    out.attention.push_back(a);
  }
  const std::size_t n = prefix.layout.length();
  const std::size_t first =
      rows == LogitRows::kLast ? n - 1 : prefix.layout.text_begin() + prefix.layout.prompt_len - 1;
  x = ag::slice_rows(x, first, n);
  x = ag::layer_norm(x, params.lnf_g, params.lnf_b);
  out.logits = ag::linear(x, params.w_out, params.b_out);
  return out;
}

GraphOutput forward_graph(const TinyLvlmParams& params, const ModelConfig& config,
                          const ModelInput& input, const Var& mask_weights, LogitRows rows) {
  require(!mask_weights || input.visual != nullptr, ErrorCode::kInvalidInput,
          "mask given without visual input");
  return forward_suffix(params, config, forward_prefix(params, config, input), mask_weights,
                        rows);
}

ForwardTrace forward(const TinyLvlmParams& params, const ModelConfig& config,
                     const ModelInput& input, const SoftVisualMask* mask) {
  Var w;
  if (mask) {
    require(input.visual != nullptr, ErrorCode::kInvalidInput, "mask given without visual input");
    require(mask->size() == sz(config.n_visual), ErrorCode::kInvalidInput,
            "mask length must equal n_visual");
    mask->validate();
    w = ag::constant(mask->weights);
  }
  GraphOutput g = forward_graph(params, config, input, w, LogitRows::kLast);
  ForwardTrace trace;
  trace.logits = g.logits->value;
  trace.logits.shape = {trace.logits.numel()};
  trace.layout = g.layout;
  for (auto& a : g.attention) trace.attention.push_back(a->value);
  return trace;
}

Scalar attn_aggregate(const ForwardTrace& trace, std::size_t layer, const SoftVisualMask* mask) {
  require(layer < trace.attention.size(), ErrorCode::kIndex,
          "attn_aggregate: layer " + std::to_string(layer) + " out of range");
  const Tensor& a = trace.attention[layer];
  const std::size_t heads = a.dim(0);
  const std::size_t n = a.dim(1);
  const std::size_t nv = trace.layout.n_visual;
  if (mask) {
    require(mask->size() == nv, ErrorCode::kInvalidInput, "attn_aggregate: mask length mismatch");
  }
  double total = 0;
  for (std::size_t h = 0; h < heads; ++h) {
    const Scalar* row = a.data.data() + (h * n + (n - 1)) * n;
    for (std::size_t j = 0; j < nv; ++j) {
      const double w = mask ? static_cast<double>(mask->weights.data[j]) : 1.0;
      total += w * static_cast<double>(row[j]);
    }
  }
  return static_cast<Scalar>(total / static_cast<double>(heads));
}

Var attn_visual_mass(const Var& probs, std::size_t n_visual, const Var& weights) {
  const Tensor& a = probs->value;
  const std::size_t heads = a.dim(0);
  const std::size_t n = a.dim(1);
  require(n_visual <= n, ErrorCode::kInvalidInput, "attn_visual_mass: n_visual exceeds length");
  if (weights) {
    require(weights->value.numel() == n_visual, ErrorCode::kInvalidInput,
            "attn_visual_mass: weight length mismatch");
  }
  Scalar total = 0;
  for (std::size_t h = 0; h < heads; ++h) {
    const Scalar* row = a.data.data() + (h * n + (n - 1)) * n;
    for (std::size_t j = 0; j < n_visual; ++j) {
      total += (weights ? weights->value.data[j] : Scalar(1)) * row[j];
    }
  }
  const Scalar inv_h = Scalar(1) / static_cast<Scalar>(heads);
  std::vector<Var> parents{probs};
  if (weights) parents.push_back(weights);
  return ag::make_result(
      Tensor::scalar(total * inv_h), std::move(parents), [heads, n, n_visual, inv_h](Node& self) {
        const Scalar g0 = self.grad.data[0] * inv_h;
        Node& pp = *self.parents[0];
        Node* pw = self.parents.size() > 1 ? self.parents[1].get() : nullptr;
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t base = (h * n + (n - 1)) * n;
          for (std::size_t j = 0; j < n_visual; ++j) {
            const Scalar w = pw ? pw->value.data[j] : Scalar(1);
            if (pp.requires_grad) pp.grad_buffer().data[base + j] += g0 * w;
            if (pw && pw->requires_grad) pw->grad_buffer().data[j] += g0 * pp.value.data[base + j];
          }
        }
      });
}

Var example_loss(const TinyLvlmParams& params, const ModelConfig& config, const ModelInput& input,
                 std::span<const int> target) {
  require(!target.empty(), ErrorCode::kInvalidInput, "example_loss: empty target");
  require(input.generated.size() + 1 == target.size(), ErrorCode::kInvalidInput,
          "example_loss: generated must be target without its last token");
  GraphOutput g = forward_graph(params, config, input, nullptr, LogitRows::kText);
  require(g.logits->value.all_finite(), ErrorCode::kNumerical, "example_loss: non-finite logits");
  Var logp = ag::log_softmax_rows(g.logits);
  return ag::scale(ag::mean(ag::pick(logp, target)), Scalar(-1));
}

LvlmTrainReport train_lvlm(TinyLvlmParams& params, const ModelConfig& config,
                           std::span<const TrainingExample> corpus,
                           const LvlmTrainOptions& options) {
  require(!corpus.empty(), ErrorCode::kInvalidInput, "train_lvlm: empty corpus");
  require(options.epochs >= 1 && options.batch_size >= 1, ErrorCode::kInvalidConfig,
          "train_lvlm: epochs and batch_size must be >= 1");
  for (const auto& ex : corpus) {
    require(!ex.target.empty(), ErrorCode::kInvalidInput, "train_lvlm: empty target");
    for (int t : ex.target) {
      require(t >= 0 && t < config.vocab_size, ErrorCode::kInvalidInput,
              "train_lvlm: target token outside vocabulary");
    }
  }
  params.set_trainable(true);
  Adam opt(params.all(), {.learning_rate = options.learning_rate, .grad_clip = options.grad_clip});
  Rng order_rng = Rng(options.seed).fork("lvlm-order");
  Rng drop_rng = Rng(options.seed).fork("lvlm-image-dropout");

  LvlmTrainReport report;
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  bool done = false;
  for (int epoch = 0; epoch < options.epochs && !done; ++epoch) {
    order_rng.shuffle(order.begin(), order.end());
    double epoch_total = 0;
    std::size_t epoch_count = 0;
    std::size_t in_batch = 0;
    opt.zero_grad();
    for (std::size_t i = 0; i < order.size(); ++i) {
      const TrainingExample& ex = corpus[order[i]];
      const bool drop = ex.visual == nullptr || drop_rng.bernoulli(options.image_dropout);
      std::span<const int> tgt(ex.target);
      ModelInput in{drop ? nullptr : ex.visual, ex.prompt, tgt.first(tgt.size() - 1)};
      Var loss = example_loss(params, config, in, tgt);
      require(std::isfinite(loss->value.data[0]), ErrorCode::kNumerical,
              "train_lvlm: non-finite loss");
      ag::backward(loss);
      epoch_total += loss->value.data[0];
      ++epoch_count;
      if (++in_batch == sz(options.batch_size) || i + 1 == order.size()) {
        opt.step(1.0 / static_cast<double>(in_batch));
        opt.zero_grad();
        in_batch = 0;
        ++report.steps;
        if (options.max_steps > 0 && report.steps >= options.max_steps) {
          done = true;
          break;
        }
      }
    }
    const double mean_loss = epoch_total / static_cast<double>(std::max<std::size_t>(1, epoch_count));
    report.epoch_loss.push_back(mean_loss);
    if (options.on_epoch) options.on_epoch(epoch, mean_loss);
  }
  params.set_trainable(false);
  report.initial_loss = report.epoch_loss.front();
  report.final_loss = report.epoch_loss.back();
  return report;
}

CMIVLD_NS_END
