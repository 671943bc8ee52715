// Copyright 2026 The condcomp Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef CONDCOMP_TRANSFORMER_HPP_
#define CONDCOMP_TRANSFORMER_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "condcomp/context.hpp"
#include "condcomp/moe.hpp"
#include "condcomp/nn.hpp"
#include "condcomp/spec_json.hpp"
#include "condcomp/token_selection.hpp"

namespace condcomp {

enum class Mechanism { moe, skip, token_select, exit_head };

inline Mechanism parse_mechanism(std::string_view s) {
  if (s == "moe") return Mechanism::moe;
  if (s == "skip") return Mechanism::skip;
  if (s == "token-select") return Mechanism::token_select;
  if (s == "exit-head") return Mechanism::exit_head;
  throw ConfigError("unknown block mechanism '" + std::string(s) + "'");
}

inline std::string to_string(Mechanism m) {
  switch (m) {
    case Mechanism::moe: return "moe";
    case Mechanism::skip: return "skip";
    case Mechanism::token_select: return "token-select";
    case Mechanism::exit_head: return "exit-head";
  }
  return "?";
}

struct BlockSpec {
  std::vector<Mechanism> mechanisms;

  bool has(Mechanism m) const { return std::find(mechanisms.begin(), mechanisms.end(), m) != mechanisms.end(); }
};

struct MoESpec {
  std::size_t n_experts = 4;
  std::size_t k = 1;
  std::size_t d_hidden = 32;
  RoutingStrategy strategy = RoutingStrategy::token_choice;
  MoEVariant variant = MoEVariant::sparse;
  double temperature = 1.0;
  double balance_weight = 0.0;
  bool stochastic_training = true;  // Gumbel top-k with straight-through gates while training

  RouterConfig router() const {
    RouterConfig c;
    c.n_experts = n_experts;
    c.k = k;
    c.strategy = strategy;
    c.balance_weight = balance_weight;
    c.temperature = temperature;
    return c;
  }
};

struct TokenSelectSpec {
  double keep_ratio = 0.5;
  std::size_t score_hidden = 16;  // 0 gives a single linear score head
  bool stochastic_training = true;
};

struct SkipSpec {
  bool straight_through = false;  // training gates: Bernoulli STE samples instead of logistic values
};

struct ExitSpec {
  double gate_bias_init = -2.0;
};

/// Architecture of the toy transformer and of its conditional mechanisms.
struct ModelSpec {
  std::size_t d_input = 8;
  std::size_t d_model = 32;
  std::size_t heads = 4;
  std::size_t d_ff = 64;
  std::size_t depth = 2;
  std::size_t n_classes = 2;
  std::size_t max_tokens = 16;
  bool positional = false;
  std::vector<BlockSpec> blocks;  // empty, or one entry per block
  MoESpec moe;
  TokenSelectSpec token_select;
  SkipSpec skip;
  ExitSpec exits;

  const BlockSpec& block(std::size_t i) const {
    static const BlockSpec kPlain;
    return blocks.empty() ? kPlain : blocks.at(i);
  }
  bool has(std::size_t i, Mechanism m) const { return block(i).has(m); }
  bool any(Mechanism m) const {
    for (std::size_t i = 0; i < depth; ++i)
      if (has(i, m)) return true;
    return false;
  }
  std::size_t head_dim() const { return d_model / heads; }

  void validate() const {
    if (depth == 0) throw ConfigError("model: depth must be at least 1");
    if (d_input == 0 || d_model == 0 || d_ff == 0 || n_classes < 2) {
      throw ConfigError("model: d_input, d_model and d_ff must be positive and n_classes at least 2");
    }
    if (heads == 0 || d_model % heads != 0) {
      throw ConfigError("model: d_model=" + std::to_string(d_model) + " is not divisible into " + std::to_string(heads) + " heads");
    }
    if (positional && max_tokens == 0) throw ConfigError("model: positional embeddings need max_tokens >= 1");
    if (!blocks.empty() && blocks.size() != depth) {
      throw ConfigError("model: " + std::to_string(blocks.size()) + " block entries for depth " + std::to_string(depth));
    }
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const auto& m = blocks[i].mechanisms;
      for (std::size_t a = 0; a < m.size(); ++a)
        for (std::size_t b = a + 1; b < m.size(); ++b)
          if (m[a] == m[b]) throw ConfigError("model: block " + std::to_string(i) + " lists '" + to_string(m[a]) + "' twice");
    }
    if (has(depth - 1, Mechanism::exit_head)) {
      throw ConfigError("model: exit head after the final block; the final head already classifies there");
    }
    if (any(Mechanism::moe)) {
      if (moe.n_experts < 1 || moe.k < 1 || moe.d_hidden < 1) throw ConfigError("model.moe: n_experts, k and d_hidden must be positive");
      if (moe.strategy != RoutingStrategy::expert_choice && moe.k > moe.n_experts) {
        throw ConfigError("model.moe: k=" + std::to_string(moe.k) + " exceeds " + std::to_string(moe.n_experts) + " experts");
      }
      if (!(moe.temperature > 0) || moe.balance_weight < 0) throw ConfigError("model.moe: temperature must be positive and balance_weight nonnegative");
    }
    if (any(Mechanism::token_select) && !(token_select.keep_ratio > 0 && token_select.keep_ratio <= 1)) {
      throw ConfigError("model.token_select: keep_ratio must be in (0, 1]");
    }
  }
};

inline Json to_json(const ModelSpec& s) {
  Json blocks = Json::array();
  for (const auto& b : s.blocks) {
    Json names = Json::array();
    for (Mechanism m : b.mechanisms) names.push_back(to_string(m));
    blocks.push_back(names);
  }
  return Json{{"d_input", s.d_input},
              {"d_model", s.d_model},
              {"heads", s.heads},
              {"d_ff", s.d_ff},
              {"depth", s.depth},
              {"n_classes", s.n_classes},
              {"max_tokens", s.max_tokens},
              {"positional", s.positional},
              {"blocks", blocks},
              {"moe",
               {{"n_experts", s.moe.n_experts},
                {"k", s.moe.k},
                {"d_hidden", s.moe.d_hidden},
                {"strategy", to_string(s.moe.strategy)},
                {"variant", to_string(s.moe.variant)},
                {"temperature", s.moe.temperature},
                {"balance_weight", s.moe.balance_weight},
                {"stochastic_training", s.moe.stochastic_training}}},
              {"token_select",
               {{"keep_ratio", s.token_select.keep_ratio},
                {"score_hidden", s.token_select.score_hidden},
                {"stochastic_training", s.token_select.stochastic_training}}},
              {"skip", {{"straight_through", s.skip.straight_through}}},
              {"exits", {{"gate_bias_init", s.exits.gate_bias_init}}}};
}

inline ModelSpec model_spec_from_json(const Json& j) {
  using detail::read_field;
  detail::check_keys(j, {"d_input", "d_model", "heads", "d_ff", "depth", "n_classes", "max_tokens", "positional", "blocks",
                         "moe", "token_select", "skip", "exits"},
                     "model");
  ModelSpec s;
  read_field(j, "d_input", s.d_input, "model");
  read_field(j, "d_model", s.d_model, "model");
  read_field(j, "heads", s.heads, "model");
  read_field(j, "d_ff", s.d_ff, "model");
  read_field(j, "depth", s.depth, "model");
  read_field(j, "n_classes", s.n_classes, "model");
  read_field(j, "max_tokens", s.max_tokens, "model");
  read_field(j, "positional", s.positional, "model");
  if (j.contains("blocks")) {
    const Json& b = j.at("blocks");
    if (!b.is_array()) throw ConfigError("model.blocks: expected an array of mechanism lists");
    for (const auto& entry : b) {
      BlockSpec bs;
      if (entry.is_string()) {
        if (entry.get<std::string>() != "none") bs.mechanisms.push_back(parse_mechanism(entry.get<std::string>()));
      } else if (entry.is_array()) {
        for (const auto& m : entry) {
          if (!m.is_string()) throw ConfigError("model.blocks: mechanism names must be strings");
          if (m.get<std::string>() != "none") bs.mechanisms.push_back(parse_mechanism(m.get<std::string>()));
        }
      } else {
        throw ConfigError("model.blocks: each entry must be a mechanism name or a list of names");
      }
      s.blocks.push_back(std::move(bs));
    }
  }
  if (j.contains("moe")) {
    const Json& m = j.at("moe");
    detail::check_keys(m, {"n_experts", "k", "d_hidden", "strategy", "variant", "temperature", "balance_weight", "stochastic_training"},
                       "model.moe");
    read_field(m, "n_experts", s.moe.n_experts, "model.moe");
    read_field(m, "k", s.moe.k, "model.moe");
    read_field(m, "d_hidden", s.moe.d_hidden, "model.moe");
    std::string strategy = to_string(s.moe.strategy), variant = to_string(s.moe.variant);
    read_field(m, "strategy", strategy, "model.moe");
    read_field(m, "variant", variant, "model.moe");
    s.moe.strategy = parse_routing_strategy(strategy);
    s.moe.variant = parse_moe_variant(variant);
    read_field(m, "temperature", s.moe.temperature, "model.moe");
    read_field(m, "balance_weight", s.moe.balance_weight, "model.moe");
    read_field(m, "stochastic_training", s.moe.stochastic_training, "model.moe");
  }
  if (j.contains("token_select")) {
    const Json& t = j.at("token_select");
    detail::check_keys(t, {"keep_ratio", "score_hidden", "stochastic_training"}, "model.token_select");
    read_field(t, "keep_ratio", s.token_select.keep_ratio, "model.token_select");
    read_field(t, "score_hidden", s.token_select.score_hidden, "model.token_select");
    read_field(t, "stochastic_training", s.token_select.stochastic_training, "model.token_select");
  }
  if (j.contains("skip")) {
    detail::check_keys(j.at("skip"), {"straight_through"}, "model.skip");
    read_field(j.at("skip"), "straight_through", s.skip.straight_through, "model.skip");
  }
  if (j.contains("exits")) {
    detail::check_keys(j.at("exits"), {"gate_bias_init"}, "model.exits");
    read_field(j.at("exits"), "gate_bias_init", s.exits.gate_bias_init, "model.exits");
  }
  s.validate();
  return s;
}

inline bool operator==(const BlockSpec& a, const BlockSpec& b) { return a.mechanisms == b.mechanisms; }
inline bool operator==(const ModelSpec& a, const ModelSpec& b) { return to_json(a) == to_json(b); }

/// Multi-head self-attention projections.
struct Attention {
  Linear q, k, v, o;
  std::size_t heads = 1;
};

struct TransformerBlock {
  std::size_t index = 0;
  BlockSpec mechanisms;
  LayerNorm ln1, ln2;
  Attention attn;
  Mlp ffn;                    // plain feed-forward, unused with MoE
  std::optional<MoELayer> moe;
  std::optional<Linear> skip_gate;   // pooled features -> gate logit
  std::optional<ScoreHead> selector;
  std::optional<Linear> exit_head;   // pooled features -> class logits
  std::optional<Linear> exit_gate;   // pooled features -> exit gate logit

  std::string label(std::string_view part) const { return "block" + std::to_string(index) + "." + std::string(part); }
};

/// Scaled dot-product attention with `heads` heads on pre-normalized rows.
/// `key_weights` ([n], optional) weights each key inside the softmax; zero
/// removes the key exactly, as an additive -inf mask would.
inline Tensor attention_core(const Attention& a, const Tensor& x, const Tensor* key_weights, Recorder* rec,
                             std::string_view label) {
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (d % a.heads != 0) throw ShapeError("attention: model dim " + std::to_string(d) + " not divisible by heads");
  const std::size_t dh = d / a.heads;
  Tensor q = a.q(x, rec, label), k = a.k(x, rec, label), v = a.v(x, rec, label);
  Tensor kw;
  if (key_weights != nullptr) kw = reshape(*key_weights, {1, n});
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> outs;
  for (std::size_t h = 0; h < a.heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
    Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
    Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
    Tensor s = scale(matmul(qh, transpose(kh)), inv_sqrt);
    Tensor p = kw.defined() ? weighted_softmax(s, kw) : softmax(s, 1);
    outs.push_back(matmul(p, vh));
  }
  record(rec, label, 2 * static_cast<std::uint64_t>(n) * n * d, static_cast<std::uint64_t>(a.heads) * n * n);
  Tensor o = a.heads == 1 ? outs.front() : concat(outs, 1);
  return a.o(o, rec, label);
}

/// x + Attention(LN1(x)). Dead keys (zero keep weight) receive no attention.
inline Tensor attention_forward(const TransformerBlock& block, const Tensor& x, const Tensor* keep = nullptr,
                                Recorder* rec = nullptr) {
  if (x.rank() != 2 || x.dim(1) != block.ln1.gamma.numel()) {
    throw ShapeError("attention_forward: tokens " + shape_str(x.shape()) + " for model dim " +
                     std::to_string(block.ln1.gamma.numel()));
  }
  if (keep != nullptr) {
    if (keep->numel() != x.dim(0)) throw ShapeError("attention_forward: keep vector does not match token count");
    bool any = false;
    for (double w : keep->data()) any = any || w > 0;
    if (!any) throw Error("attention_forward: all tokens are dead");
  }
  Tensor h = block.ln1(x, rec, block.label("ln1"));
  return add(x, attention_core(block.attn, h, keep, rec, block.label("attn")));
}

/// Activations flowing between blocks for one sample.
struct TokenState {
  Tensor h;                        // [rows, d]
  std::size_t n_tokens = 0;        // tokens in the original input
  std::vector<std::size_t> ids;    // original id of each row
  std::vector<std::size_t> alive;  // alive original ids, ascending
  Tensor keep;                     // masked mode: [n_tokens] keep weights
  bool masked = false;
  std::size_t selection_points = 0;

  std::size_t rows() const { return h.dim(0); }
};

class Model {
 public:
  using State = TokenState;

  Model() = default;

  Model(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    spec_.validate();
    Rng rng = derive_rng(seed, 0x6d6f64656cULL);
    const std::size_t d = spec_.d_model;
    embed_ = Linear(spec_.d_input, d, rng);
    embed_.register_params(params_, "embed");
    if (spec_.positional) {
      pos_ = params_.add("pos", normal_tensor({spec_.max_tokens, d}, 0.1, rng));
    }
    for (std::size_t i = 0; i < spec_.depth; ++i) {
      TransformerBlock b;
      b.index = i;
      b.mechanisms = spec_.block(i);
      const std::string p = "block" + std::to_string(i);
      if (b.mechanisms.has(Mechanism::token_select)) {
        b.selector = ScoreHead(d, spec_.token_select.score_hidden, rng);
        b.selector->register_params(params_, p + ".select");
      }
      b.ln1 = LayerNorm(d);
      b.ln1.register_params(params_, p + ".ln1");
      b.attn.heads = spec_.heads;
      b.attn.q = Linear(d, d, rng);
      b.attn.k = Linear(d, d, rng);
      b.attn.v = Linear(d, d, rng);
      b.attn.o = Linear(d, d, rng);
      b.attn.q.register_params(params_, p + ".attn.q");
      b.attn.k.register_params(params_, p + ".attn.k");
      b.attn.v.register_params(params_, p + ".attn.v");
      b.attn.o.register_params(params_, p + ".attn.o");
      b.ln2 = LayerNorm(d);
      b.ln2.register_params(params_, p + ".ln2");
      if (b.mechanisms.has(Mechanism::moe)) {
        b.moe = MoELayer(d, spec_.moe.d_hidden, d, spec_.moe.router(), spec_.moe.variant, rng);
        b.moe->register_params(params_, p + ".moe");
      } else {
        b.ffn = Mlp(d, spec_.d_ff, d, rng);
        b.ffn.register_params(params_, p + ".ffn");
      }
      if (b.mechanisms.has(Mechanism::skip)) {
        b.skip_gate = Linear(d, 1, rng);
        b.skip_gate->register_params(params_, p + ".skip");
      }
      if (b.mechanisms.has(Mechanism::exit_head)) {
        b.exit_head = Linear(d, spec_.n_classes, rng);
        b.exit_head->register_params(params_, p + ".exit");
        b.exit_gate = Linear(d, 1, rng);
        b.exit_gate->bias.mutable_data()[0] = spec_.exits.gate_bias_init;
        b.exit_gate->register_params(params_, p + ".gate");
      }
      blocks_.push_back(std::move(b));
    }
    head_ = Linear(d, spec_.n_classes, rng);
    head_.register_params(params_, "head");
  }

  const ModelSpec& spec() const noexcept { return spec_; }
  ParameterSet& params() noexcept { return params_; }
  const ParameterSet& params() const noexcept { return params_; }
  const std::vector<TransformerBlock>& blocks() const noexcept { return blocks_; }
  std::vector<TransformerBlock>& blocks() noexcept { return blocks_; }
  const Linear& head() const noexcept { return head_; }

  std::size_t num_blocks() const noexcept { return blocks_.size(); }
  bool has_exit(std::size_t i) const { return i + 1 < blocks_.size() && blocks_.at(i).exit_head.has_value(); }

  /// Embeds raw tokens [n, d_input] and adds positional embeddings.
  TokenState stem(const Tensor& x, ForwardContext& ctx) const {
    if (x.rank() != 2 || x.dim(1) != spec_.d_input) {
      throw ShapeError("model: input " + shape_str(x.shape()) + " does not match d_input=" + std::to_string(spec_.d_input));
    }
    const std::size_t n = x.dim(0);
    if (spec_.positional && n > spec_.max_tokens) {
      throw ShapeError("model: " + std::to_string(n) + " tokens exceed max_tokens=" + std::to_string(spec_.max_tokens));
    }
    TokenState s;
    s.n_tokens = n;
    s.masked = ctx.masked_tokens;
    s.ids.resize(n);
    std::iota(s.ids.begin(), s.ids.end(), std::size_t{0});
    s.alive = s.ids;
    s.h = embed_(x, ctx.recorder, "embed");
    if (spec_.positional) s.h = add(s.h, slice_rows(pos_, n));
    if (s.masked) s.keep = Tensor::full({n}, 1.0);
    ctx.trace = DecisionTrace{};
    ctx.trace.n_tokens = n;
    return s;
  }

  /// Runs block i in place on the state: optional token selection, attention,
  /// then the (possibly MoE, possibly skipped) feed-forward sublayer.
  void run_block(std::size_t i, TokenState& s, ForwardContext& ctx) const {
    const TransformerBlock& b = blocks_.at(i);
    BlockTrace bt;
    bt.block = i;
    bt.rows_in = s.rows();
    if (b.selector) {
      select_tokens(b, s, ctx);
      bt.selection_head = true;
    }
    bt.rows = s.rows();
    s.h = attention_forward(b, s.h, s.masked ? &s.keep : nullptr, ctx.recorder);

    auto sublayer = [&](const Tensor& x) { return add(x, feed_forward(b, x, s, ctx, bt)); };
    if (b.skip_gate) {
      bt.skip_gate_head = true;
      Tensor logit = reshape((*b.skip_gate)(pool(s, s.h, ctx.recorder, b.label("skip")), ctx.recorder, b.label("skip")), {});
      record(ctx.recorder, b.label("skip"), 0, 1);
      Tensor gate = gate_value(logit, ctx, spec_.skip.straight_through);
      ctx.skip_gates.push_back(gate.item());
      bt.ffn_evaluated = !(gate.item() == 0.0 && !gate.requires_grad());
      s.h = depth_skip(sublayer, s.h, gate);
    } else {
      s.h = sublayer(s.h);
    }
    ctx.trace.blocks.push_back(std::move(bt));
  }

  /// Class logits [n_classes] of exit i, or of the final head when i is the
  /// last block.
  Tensor exit_logits(std::size_t i, const TokenState& s, ForwardContext& ctx) const {
    if (i + 1 == blocks_.size()) {
      ctx.trace.final_head = true;
      return reshape(head_(pool(s, s.h, ctx.recorder, "head"), ctx.recorder, "head"), {spec_.n_classes});
    }
    const auto& b = blocks_.at(i);
    if (!b.exit_head) throw Error("model: block " + std::to_string(i) + " has no exit head");
    mark(ctx, i).exit_head = true;
    return reshape((*b.exit_head)(pool(s, s.h, ctx.recorder, b.label("exit")), ctx.recorder, b.label("exit")),
                   {spec_.n_classes});
  }

  /// Scalar logit of exit gate i; the gate value is its logistic.
  Tensor gate_logit(std::size_t i, const TokenState& s, ForwardContext& ctx) const {
    const auto& b = blocks_.at(i);
    if (!b.exit_gate || i + 1 == blocks_.size()) throw Error("model: block " + std::to_string(i) + " has no exit gate");
    mark(ctx, i).exit_gate_head = true;
    Tensor l = (*b.exit_gate)(pool(s, s.h, ctx.recorder, b.label("gate")), ctx.recorder, b.label("gate"));
    record(ctx.recorder, b.label("gate"), 0, 1);
    return reshape(l, {});
  }

  /// All blocks, final head only. Logits have shape [n_classes].
  Tensor forward(const Tensor& x, ForwardContext& ctx) const {
    TokenState s = stem(x, ctx);
    for (std::size_t i = 0; i < blocks_.size(); ++i) run_block(i, s, ctx);
    return exit_logits(blocks_.size() - 1, s, ctx);
  }

  /// Pooled features of the current state, [1, d]; dead tokens excluded.
  Tensor pooled(const TokenState& s) const { return pool(s, s.h, nullptr, ""); }

 private:
  static Tensor slice_rows(const Tensor& t, std::size_t n) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return gather_rows(t, idx);
  }

  static BlockTrace& mark(ForwardContext& ctx, std::size_t i) {
    if (ctx.trace.blocks.empty() || ctx.trace.blocks.back().block != i) {
      throw Error("model: head of block " + std::to_string(i) + " evaluated before the block ran");
    }
    return ctx.trace.blocks.back();
  }

  static Tensor pool(const TokenState& s, const Tensor& x, Recorder* rec, std::string_view label) {
    return s.masked ? weighted_mean_pool(x, s.keep, rec, label) : mean_pool(x, rec, label);
  }

  /// Logistic gate while training (or its Bernoulli straight-through sample),
  /// hard 0/1 threshold at 0.5 otherwise.
  static Tensor gate_value(const Tensor& logit, ForwardContext& ctx, bool straight_through) {
    if (!ctx.training) return Tensor::scalar(logit.item() >= 0.0 ? 1.0 : 0.0);
    if (!straight_through) return sigmoid(logit);
    if (ctx.rng == nullptr) throw Error("model: straight-through gates need a generator");
    SamplerConfig cfg{ctx.tau, 1, SampleMode::straight_through, true};
    Tensor two = concat({reshape(logit, {1}), Tensor::zeros({1})}, 0);
    SampleResult r = sample_ste(GateScores(two), cfg, *ctx.rng);
    return reshape(gather_rows(r.values, {0}), {});
  }

  Tensor feed_forward(const TransformerBlock& b, const Tensor& x, const TokenState& s, ForwardContext& ctx,
                      BlockTrace& bt) const {
    Tensor h = b.ln2(x, ctx.recorder, b.label("ln2"));
    if (!b.moe) return b.ffn(h, ctx.recorder, b.label("ffn"));
    MoELayer layer = *b.moe;
    if (ctx.moe_k) layer.router.k = *ctx.moe_k;
    layer.router.mode = (ctx.training && spec_.moe.stochastic_training) ? RouteMode::stochastic : RouteMode::greedy;
    const std::string label = b.label("moe");
    switch (layer.variant) {
      case MoEVariant::sparse: {
        MoEOutput out = forward_sparse(layer, h, ctx.rng, ctx.recorder, label, ctx.tau);
        bt.expert_rows.clear();
        for (const auto& toks : out.assignment.per_expert) bt.expert_rows.push_back(toks.size());
        if (ctx.training && !ctx.defer_balance && layer.router.balance_weight > 0) {
          ctx.add_aux(scale(balancing_loss(out.assignment), layer.router.balance_weight));
        }
        ctx.routing.push_back(std::move(out.assignment));
        ctx.routing_blocks.push_back(b.index);
        return out.y;
      }
      case MoEVariant::soft_dispatch: return forward_soft_dispatch(layer, h, ctx.recorder, label).y;
      case MoEVariant::soft_weights: {
        Tensor cond = pool(s, h, ctx.recorder, sublabel(label, "pool"));
        return forward_soft_weights(layer, cond, h, ctx.recorder, label).y;
      }
    }
    throw Error("model: unknown MoE variant");
  }

  /// Chooses the surviving tokens at a selection point. Gathered mode removes
  /// rows; masked mode zeroes keep weights and keeps every row.
  void select_tokens(const TransformerBlock& b, TokenState& s, ForwardContext& ctx) const {
    Tensor scores = score_tokens(*b.selector, s.h, ctx.recorder, b.label("select"));
    const std::size_t point = s.selection_points++;
    // Row position of each alive token in the current state.
    std::vector<std::size_t> cand_rows;
    if (s.masked) {
      cand_rows = s.alive;
    } else {
      cand_rows.resize(s.rows());
      std::iota(cand_rows.begin(), cand_rows.end(), std::size_t{0});
    }
    const double ratio = ctx.keep_ratio.value_or(spec_.token_select.keep_ratio);
    const std::size_t n_keep = keep_count(ratio, cand_rows.size());

    std::vector<std::size_t> kept_pos;  // positions within cand_rows
    Tensor cand_keep;                   // [candidates], STE-valued when sampled
    if (ctx.keep_decisions != nullptr) {
      if (point >= ctx.keep_decisions->size()) throw Error("model: no keep decision for selection point " + std::to_string(point));
      const auto& want = (*ctx.keep_decisions)[point];
      AliveTrace::check_monotone(s.alive, want);
      if (want.empty()) throw Error("model: selection point " + std::to_string(point) + " keeps no token");
      for (std::size_t t : want) {
        auto it = std::lower_bound(s.alive.begin(), s.alive.end(), t);
        kept_pos.push_back(static_cast<std::size_t>(it - s.alive.begin()));
      }
      std::sort(kept_pos.begin(), kept_pos.end());
      kept_pos.erase(std::unique(kept_pos.begin(), kept_pos.end()), kept_pos.end());
    } else {
      Tensor cand_scores = s.masked ? gather_rows(scores, cand_rows) : scores;
      const bool stochastic = ctx.training && spec_.token_select.stochastic_training;
      SelectionMask m = build_drop_mask(cand_scores, n_keep, stochastic ? SelectMode::stochastic : SelectMode::greedy,
                                        ctx.rng, ctx.tau);
      kept_pos = m.kept;
      if (m.keep.requires_grad()) cand_keep = m.keep;
      if (m.soft.defined()) {
        std::vector<double> full(s.n_tokens, 0.0);
        auto sv = m.soft.data();
        for (std::size_t c = 0; c < cand_rows.size(); ++c) full[s.masked ? cand_rows[c] : s.ids[c]] = sv[c];
        ctx.selection_soft.push_back(Tensor::vector(full));
      }
    }

    std::vector<std::size_t> next_alive;
    for (std::size_t p : kept_pos) next_alive.push_back(s.alive[p]);
    ctx.alive.layers.push_back(b.index);
    ctx.alive.kept.push_back(next_alive);

    if (s.masked) {
      Tensor keep_new;
      if (cand_keep.defined()) {
        keep_new = mul(scatter_add_rows(reshape(cand_keep, {cand_rows.size(), 1}), cand_rows, s.n_tokens), reshape(s.keep, {s.n_tokens, 1}));
        keep_new = reshape(keep_new, {s.n_tokens});
      } else {
        std::vector<double> k(s.n_tokens, 0.0);
        for (std::size_t t : next_alive) k[t] = 1.0;
        keep_new = mul(Tensor::vector(k), s.keep);
      }
      if (ctx.keep_override != nullptr && point < ctx.keep_override->size()) keep_new = (*ctx.keep_override)[point];
      s.keep = keep_new;
    } else {
      Tensor h = gather_rows(s.h, kept_pos);
      if (cand_keep.defined()) h = mul(h, reshape(gather_rows(cand_keep, kept_pos), {kept_pos.size(), 1}));
      s.h = h;
      std::vector<std::size_t> ids;
      for (std::size_t p : kept_pos) ids.push_back(s.ids[p]);
      s.ids = std::move(ids);
    }
    s.alive = std::move(next_alive);
  }

  ModelSpec spec_;
  ParameterSet params_;
  Linear embed_;
  Tensor pos_;
  std::vector<TransformerBlock> blocks_;
  Linear head_;
};

inline Model assemble(const ModelSpec& spec, std::uint64_t seed = 0) { return Model(spec, seed); }

/// Training-style pass that keeps all rows and masks dropped tokens, driven by
/// explicit keep decisions (kept original ids per selection point).
inline Tensor masked_forward(const Model& model, const Tensor& x, const std::vector<std::vector<std::size_t>>& decisions,
                             ForwardContext& ctx) {
  ctx.masked_tokens = true;
  ctx.keep_decisions = &decisions;
  return model.forward(x, ctx);
}

/// Inference-style pass that physically removes dropped tokens.
inline Tensor gather_forward(const Model& model, const Tensor& x, const std::vector<std::vector<std::size_t>>& decisions,
                             ForwardContext& ctx) {
  ctx.masked_tokens = false;
  ctx.keep_decisions = &decisions;
  return model.forward(x, ctx);
}

}  // namespace condcomp

#endif  // CONDCOMP_TRANSFORMER_HPP_
