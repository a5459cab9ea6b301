// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

#include "purifier.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "error.hpp"
#include "optim.hpp"

CMIVLD_NS_BEGIN

namespace {

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

Var normal_param(std::vector<std::size_t> shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = static_cast<Scalar>(rng.normal() * stddev);
  return ag::param(std::move(t));
}

Var filled(std::vector<std::size_t> shape, Scalar v) { return ag::param(Tensor(std::move(shape), v)); }

std::vector<Var*> block_fields(LayerParams& b) {
  return {&b.ln1_g, &b.ln1_b, &b.w_qkv, &b.b_qkv, &b.w_o,   &b.b_o,
          &b.ln2_g, &b.ln2_b, &b.w_fc1, &b.b_fc1, &b.w_fc2, &b.b_fc2};
}

const char* const kBlockNames[] = {"ln1_g", "ln1_b", "w_qkv", "b_qkv", "w_o",   "b_o",
                                   "ln2_g", "ln2_b", "w_fc1", "b_fc1", "w_fc2", "b_fc2"};

}  // namespace

void PurifierConfig::validate() const {
  require(n_blocks >= 0 && d_model > 0 && d_hidden > 0 && n_heads > 0 && mlp_hidden > 0 &&
              n_visual > 0,
          ErrorCode::kInvalidConfig, "purifier config: sizes must be positive");
  require(d_hidden % n_heads == 0, ErrorCode::kInvalidConfig,
          "purifier config: d_hidden must be divisible by n_heads");
  require(tau > 0, ErrorCode::kInvalidConfig, "purifier config: tau must be positive");
}

nlohmann::json PurifierConfig::to_json() const {
  return {{"kind", "purifier"},   {"n_blocks", n_blocks},     {"d_model", d_model},
          {"d_hidden", d_hidden}, {"n_heads", n_heads},       {"mlp_hidden", mlp_hidden},
          {"n_visual", n_visual}, {"tau", tau}};
}

PurifierConfig PurifierConfig::from_json(const nlohmann::json& j) {
  PurifierConfig c;
  try {
    c.n_blocks = j.value("n_blocks", c.n_blocks);
    c.d_model = j.value("d_model", c.d_model);
    c.d_hidden = j.value("d_hidden", c.d_hidden);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
    c.n_visual = j.value("n_visual", c.n_visual);
    c.tau = j.value("tau", c.tau);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kInvalidConfig, std::string("purifier config: ") + e.what());
  }
  c.validate();
  return c;
}

PurifierConfig PurifierConfig::for_model(const ModelConfig& model) {
  PurifierConfig c;
  c.d_model = model.d_model;
  c.n_visual = model.n_visual;
  return c;
}

std::vector<std::pair<std::string, Var>> PurifierParams::named() const {
  std::vector<std::pair<std::string, Var>> out{{"in_w", in_w},
                                               {"in_b", in_b},
                                               {"pos_visual", pos_visual},
                                               {"text_segment", text_segment}};
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    auto fields = block_fields(const_cast<LayerParams&>(blocks[b]));
    for (std::size_t k = 0; k < fields.size(); ++k) {
      out.emplace_back("block" + std::to_string(b) + "." + kBlockNames[k], *fields[k]);
    }
  }
  out.insert(out.end(), {{"lnf_g", lnf_g}, {"lnf_b", lnf_b}, {"head_w", head_w}, {"head_b", head_b}});
  return out;
}

std::vector<Var> PurifierParams::all() const {
  std::vector<Var> out;
  for (auto& [n, v] : named()) out.push_back(v);
  return out;
}

std::size_t PurifierParams::parameter_count() const {
  std::size_t n = 0;
  for (auto& v : all()) n += v->value.numel();
  return n;
}

void PurifierParams::set_trainable(bool trainable) const {
  for (auto& v : all()) {
    v->requires_grad = trainable;
    v->zero_grad();
  }
}

PurifierParams PurifierParams::clone() const {
  auto dup = [](const Var& v) {
    auto n = std::make_shared<Node>();
    n->value = v->value;
    n->requires_grad = v->requires_grad;
    return n;
  };
  PurifierParams out = *this;
  for (Var* v : {&out.in_w, &out.in_b, &out.pos_visual, &out.text_segment, &out.lnf_g, &out.lnf_b,
                 &out.head_w, &out.head_b}) {
    *v = dup(*v);
  }
  for (auto& b : out.blocks) {
    for (Var* v : block_fields(b)) *v = dup(*v);
  }
  return out;
}

PurifierParams init_purifier(const PurifierConfig& c, std::uint64_t seed) {
  c.validate();
  Rng rng = Rng(seed).fork("purifier-init");
  const std::size_t dh = sz(c.d_hidden);
  PurifierParams p;
  p.in_w = normal_param({sz(c.d_model), dh}, 1.0 / std::sqrt(c.d_model), rng);
  p.in_b = filled({dh}, 0);
  p.pos_visual = normal_param({sz(c.n_visual), dh}, 0.1, rng);
  p.text_segment = normal_param({1, dh}, 0.1, rng);
  for (int b = 0; b < c.n_blocks; ++b) {
    LayerParams L;
    L.ln1_g = filled({dh}, 1);
    L.ln1_b = filled({dh}, 0);
    L.w_qkv = normal_param({dh, 3 * dh}, 1.0 / std::sqrt(c.d_hidden), rng);
    L.b_qkv = filled({3 * dh}, 0);
    L.w_o = normal_param({dh, dh}, 0.5 / std::sqrt(c.d_hidden), rng);
    L.b_o = filled({dh}, 0);
    L.ln2_g = filled({dh}, 1);
    L.ln2_b = filled({dh}, 0);
    L.w_fc1 = normal_param({dh, sz(c.mlp_hidden)}, 1.0 / std::sqrt(c.d_hidden), rng);
    L.b_fc1 = filled({sz(c.mlp_hidden)}, 0);
    L.w_fc2 = normal_param({sz(c.mlp_hidden), dh}, 0.5 / std::sqrt(c.mlp_hidden), rng);
    L.b_fc2 = filled({dh}, 0);
    p.blocks.push_back(std::move(L));
  }
  p.lnf_g = filled({dh}, 1);
  p.lnf_b = filled({dh}, 0);
  // A zero head sits on a symmetric saddle of the training loss; unit-scale
  // weights start every context with a decisive, varied mask instead.
  p.head_w = normal_param({dh, 2}, 1.0, rng);
  p.head_b = filled({2}, 0);
  return p;
}

PurifierParams purifier_from_arrays(const PurifierConfig& config,
                                    const std::vector<std::pair<std::string, Tensor>>& arrays) {
  PurifierParams p = init_purifier(config, 0);
  std::map<std::string, const Tensor*> by_name;
  for (auto& [name, t] : arrays) by_name[name] = &t;
  auto named = p.named();
  require(arrays.size() == named.size(), ErrorCode::kCorruptCheckpoint,
          "purifier checkpoint: unexpected array count");
  for (auto& [name, var] : named) {
    auto it = by_name.find(name);
    require(it != by_name.end(), ErrorCode::kCorruptCheckpoint,
            "purifier checkpoint: missing array " + name);
    require(it->second->shape == var->value.shape, ErrorCode::kCorruptCheckpoint,
            "purifier checkpoint: shape mismatch for " + name);
    var->value = *it->second;
  }
  return p;
}

void check_compatible(const PurifierConfig& config, const PurifierParams& pp,
                      const ModelConfig& model, std::size_t model_parameter_count) {
  require(config.d_model == model.d_model && config.n_visual == model.n_visual,
          ErrorCode::kInvalidConfig, "purifier widths do not match the model");
  require(pp.parameter_count() * 100 < model_parameter_count, ErrorCode::kInvalidConfig,
          "purifier has " + std::to_string(pp.parameter_count()) +
              " parameters, not under 1% of the model's " +
              std::to_string(model_parameter_count));
}

void MaskDistribution::validate() const {
  require(pi.rank() == 2 && pi.cols() == 2, ErrorCode::kInvalidInput, "pi must be [N, 2]");
  for (std::size_t r = 0; r < pi.rows(); ++r) {
    const Scalar a = pi.at(r, 0), b = pi.at(r, 1);
    require(a >= 0 && b >= 0 && a <= 1 && b <= 1 && std::abs(a + b - 1) < 1e-5,
            ErrorCode::kInvalidInput, "pi rows must be distributions");
  }
}

Var purifier_logits(const PurifierParams& pp, const PurifierConfig& config, const Tensor& z) {
  require(z.rank() == 2 && z.cols() == sz(config.d_model), ErrorCode::kInvalidConfig,
          "purifier input width does not match d_model");
  const std::size_t nv = sz(config.n_visual);
  require(z.rows() >= nv, ErrorCode::kInvalidInput,
          "purifier input must start with n_visual visual rows");
  Var h = ag::linear(ag::constant(z), pp.in_w, pp.in_b);
  const std::size_t n_text = z.rows() - nv;
  std::vector<Var> pos{pp.pos_visual};
  if (n_text > 0) {
    const std::vector<int> zeros(n_text, 0);
    pos.push_back(ag::embedding(pp.text_segment, zeros));
  }
  h = ag::add(h, ag::concat(pos));
  for (const auto& b : pp.blocks) {
    h = transformer_layer(b, sz(config.n_heads), h, nullptr, false, nullptr);
  }
  h = ag::slice_rows(h, 0, nv);
  h = ag::layer_norm(h, pp.lnf_g, pp.lnf_b);
  return ag::linear(h, pp.head_w, pp.head_b);
}

MaskDistribution purifier_forward(const PurifierParams& pp, const PurifierConfig& config,
                                  const Tensor& z) {
  return {softmax(purifier_logits(pp, config, z)->value, 1)};
}

SoftVisualMask extract_mask(const MaskDistribution& dist) {
  SoftVisualMask m{Tensor({dist.size()}), true};
  for (std::size_t j = 0; j < dist.size(); ++j) {
    m.weights.data[j] = dist.pi.at(j, 1) >= dist.pi.at(j, 0) ? Scalar(1) : Scalar(0);
  }
  return m;
}

SoftVisualMask top_k_mask(const MaskDistribution& dist, std::size_t k) {
  const std::size_t n = dist.size();
  require(k >= 1 && k <= n, ErrorCode::kInvalidInput, "top_k_mask: k out of range");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&dist](std::size_t a, std::size_t b) {
    return dist.pi.at(a, 1) > dist.pi.at(b, 1);
  });
  SoftVisualMask m{Tensor({n}), true};
  for (std::size_t i = 0; i < k; ++i) m.weights.data[order[i]] = 1;
  return m;
}

double retention_penalty(const Tensor& weights, double gamma) {
  double s = 0;
  for (auto w : weights.data) s += w;
  return std::abs(s / static_cast<double>(weights.numel()) - gamma);
}

Var retention_penalty(const Var& weights, double gamma) {
  return ag::abs(ag::add_scalar(ag::mean(weights), static_cast<Scalar>(-gamma)));
}

std::size_t retained_count(double gamma, std::size_t n) {
  const auto k = static_cast<std::size_t>(std::llround(gamma * static_cast<double>(n)));
  return std::clamp<std::size_t>(k, 1, n);
}

void TrainConfig::validate() const {
  require(alpha >= 0 && beta >= 0, ErrorCode::kInvalidConfig, "train: alpha, beta must be >= 0");
  require(gamma > 0 && gamma <= 1, ErrorCode::kInvalidConfig, "train: gamma must lie in (0, 1]");
  require(tau > 0, ErrorCode::kInvalidConfig, "train: tau must be positive");
  require(epochs >= 1 && batch_size >= 1, ErrorCode::kInvalidConfig,
          "train: epochs and batch_size must be >= 1");
  require(learning_rate > 0, ErrorCode::kInvalidConfig, "train: learning_rate must be positive");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"alpha", alpha},
          {"beta", beta},
          {"gamma", gamma},
          {"tau", tau},
          {"learning_rate", learning_rate},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"seed", seed},
          {"attention", attention == AttentionSource::kMasked ? "masked" : "unmasked"}};
}

namespace {

void check_step(const StepExample& ex) {
  require(ex.visual != nullptr, ErrorCode::kInvalidInput, "step example needs an image");
  require(ex.t < ex.y.size(), ErrorCode::kInvalidInput, "step index t out of range");
}

}  // namespace

ObjectiveTerms mask_objective(const TinyLvlmParams& params, const ModelConfig& config,
                              const StepExample& ex, const Var& mask, const TrainConfig& tc) {
  check_step(ex);
  const std::span<const int> prefix = ex.y.first(ex.t);
  const int target[] = {ex.y[ex.t]};
  const ModelInput with_image{ex.visual, ex.prompt, prefix};

  const PrefixState pre = forward_prefix(params, config, with_image);
  GraphOutput masked = forward_suffix(params, config, pre, mask, LogitRows::kLast);
  require(masked.logits->value.all_finite(), ErrorCode::kNumerical,
          "mask_objective: non-finite logits");
  Var lp_v = ag::sum(ag::pick(ag::log_softmax_rows(masked.logits), target));

  const ForwardTrace text_only = forward(params, config, {nullptr, ex.prompt, prefix});
  require(text_only.logits.all_finite(), ErrorCode::kNumerical,
          "mask_objective: non-finite logits");
  const Scalar lp_x = log_softmax(text_only.logits).data[sz(target[0])];

  const std::size_t layer = sz(config.purify_layer);
  Var attn;
  if (tc.attention == AttentionSource::kMasked) {
    attn = attn_visual_mass(masked.attention[layer], pre.layout.n_visual, mask);
  } else {
    GraphOutput full = forward_suffix(params, config, pre, nullptr, LogitRows::kLast);
    attn = attn_visual_mass(ag::constant(full.attention[layer]->value), pre.layout.n_visual, mask);
  }
  Var pen = retention_penalty(mask, tc.gamma);

  Var score = ag::add(ag::add_scalar(lp_v, -lp_x), ag::scale(attn, static_cast<Scalar>(tc.alpha)));
  ObjectiveTerms out;
  out.loss = ag::add(ag::scale(score, -1), ag::scale(pen, static_cast<Scalar>(tc.beta)));
  out.log_ratio = static_cast<double>(lp_v->value.data[0]) - static_cast<double>(lp_x);
  out.attention = attn->value.data[0];
  out.penalty = pen->value.data[0];
  return out;
}

ObjectiveTerms training_loss(const TinyLvlmParams& params, const ModelConfig& config,
                             const PurifierParams& pp, const PurifierConfig& pcfg,
                             const StepExample& ex, const TrainConfig& tc, const Tensor& noise) {
  check_step(ex);
  const Tensor z = context_embeddings(params, config, {ex.visual, ex.prompt, ex.y.first(ex.t)});
  Var logits = purifier_logits(pp, pcfg, z);
  Var m = ag::column(ag::gumbel_softmax(logits, noise, static_cast<Scalar>(tc.tau)), 1);
  return mask_objective(params, config, ex, m, tc);
}

ObjectiveTerms training_loss(const TinyLvlmParams& params, const ModelConfig& config,
                             const PurifierParams& pp, const PurifierConfig& pcfg,
                             const StepExample& ex, const TrainConfig& tc, Rng& rng) {
  const Tensor noise = ag::gumbel_noise({sz(pcfg.n_visual), 2}, rng);
  return training_loss(params, config, pp, pcfg, ex, tc, noise);
}

PurifierTrainReport train_purifier(const TinyLvlmParams& params, const ModelConfig& config,
                                   PurifierParams& pp, const PurifierConfig& pcfg,
                                   std::span<const TrainingExample> corpus, const TrainConfig& tc,
                                   const std::function<void(int, double)>& on_epoch) {
  require(!corpus.empty(), ErrorCode::kInvalidInput, "train_purifier: empty corpus");
  tc.validate();
  check_compatible(pcfg, pp, config, params.parameter_count());
  params.set_trainable(false);
  pp.set_trainable(true);
  Adam opt(pp.all(), {.learning_rate = tc.learning_rate, .grad_clip = 0.0});
  Rng root(tc.seed);
  Rng order_rng = root.fork("purifier-order");
  Rng step_rng = root.fork("purifier-step");
  Rng noise_rng = root.fork("purifier-noise");

  PurifierTrainReport report;
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    order_rng.shuffle(order.begin(), order.end());
    double total = 0;
    double retained = 0;
    std::size_t in_batch = 0;
    opt.zero_grad();
    for (std::size_t i = 0; i < order.size(); ++i) {
      const TrainingExample& ex = corpus[order[i]];
      require(ex.visual != nullptr && !ex.target.empty(), ErrorCode::kInvalidInput,
              "train_purifier: examples need an image and a caption");
      StepExample step{ex.visual, ex.prompt, ex.target, step_rng.below(ex.target.size())};
      ObjectiveTerms terms = training_loss(params, config, pp, pcfg, step, tc, noise_rng);
      require(std::isfinite(terms.loss->value.data[0]), ErrorCode::kNumerical,
              "train_purifier: non-finite loss");
      ag::backward(terms.loss);
      total += terms.loss->value.data[0];
      if (++in_batch == sz(tc.batch_size) || i + 1 == order.size()) {
        opt.step(1.0 / static_cast<double>(in_batch));
        opt.zero_grad();
        in_batch = 0;
        ++report.steps;
      }
      // Hard-mask retention under the weights used for this example.
      const Tensor z = context_embeddings(params, config, {step.visual, step.prompt, step.y.first(step.t)});
      retained += static_cast<double>(extract_mask(purifier_forward(pp, pcfg, z)).retained()) /
                  static_cast<double>(pcfg.n_visual);
    }
    report.epoch_loss.push_back(total / static_cast<double>(order.size()));
    report.epoch_retained_fraction.push_back(retained / static_cast<double>(order.size()));
    if (on_epoch) on_epoch(epoch, report.epoch_loss.back());
  }
  pp.set_trainable(false);
  return report;
}

std::vector<std::size_t> heldout_retained_counts(const TinyLvlmParams& params,
                                                 const ModelConfig& config,
                                                 const PurifierParams& pp,
                                                 const PurifierConfig& pcfg,
                                                 std::span<const TrainingExample> corpus,
                                                 std::uint64_t seed) {
  Rng rng = Rng(seed).fork("heldout-steps");
  std::vector<std::size_t> counts;
  for (const auto& ex : corpus) {
    const std::size_t t = rng.below(ex.target.size());
    std::span<const int> y(ex.target);
    const Tensor z = context_embeddings(params, config, {ex.visual, ex.prompt, y.first(t)});
    counts.push_back(extract_mask(purifier_forward(pp, pcfg, z)).retained());
  }
  return counts;
}

nlohmann::json LossGradcheck::to_json() const {
  return {{"max_rel_error", max_rel_error}, {"per_config", per_config}};
}

LossGradcheck purifier_loss_gradcheck(int n_configs, std::uint64_t seed, double h) {
  require(n_configs >= 1, ErrorCode::kInvalidInput, "gradcheck: need at least one configuration");
  LossGradcheck out;
  Rng root(seed);
  for (int i = 0; i < n_configs; ++i) {
    Rng rng = root.fork(static_cast<std::uint64_t>(i));
    ModelConfig mc;
    mc.vocab_size = 32;
    mc.n_visual = 8;
    mc.patch_dim = 6;
    mc.d_model = 16;
    mc.n_heads = 2;
    mc.d_head = 8;
    mc.n_layers = 3;
    mc.mlp_hidden = 32;
    mc.max_seq = 24;
    mc.purify_layer = 1 + static_cast<int>(rng.below(2));
    const TinyLvlmParams params = init_params(mc, rng.next_u64());
    params.set_trainable(false);

    PurifierConfig pc = PurifierConfig::for_model(mc);
    pc.n_blocks = 2;
    PurifierParams pp = init_purifier(pc, rng.next_u64());
    pp.set_trainable(true);

    Tensor visual({sz(mc.n_visual), sz(mc.patch_dim)});
    for (auto& v : visual.data) v = static_cast<Scalar>(rng.normal());
    std::vector<int> prompt{5, 6};
    std::vector<int> y(4);
    for (auto& t : y) t = 3 + static_cast<int>(rng.below(static_cast<std::uint64_t>(mc.vocab_size - 3)));
    const StepExample ex{&visual, prompt, y, rng.below(y.size())};

    TrainConfig tc;
    tc.tau = i % 2 == 0 ? 0.5 : 1.0;
    tc.attention = i % 3 == 2 ? AttentionSource::kUnmasked : AttentionSource::kMasked;
    const Tensor noise = ag::gumbel_noise({sz(pc.n_visual), 2}, rng);

    auto f = [&] { return training_loss(params, mc, pp, pc, ex, tc, noise).loss; };
    const double err = gradcheck_norm(f, pp.all(), h);
    out.per_config.push_back(err);
    out.max_rel_error = std::max(out.max_rel_error, err);
    pp.set_trainable(false);
  }
  return out;
}

CMIVLD_NS_END
