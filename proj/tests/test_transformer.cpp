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

#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

namespace condcomp {
namespace {

using testutil::randn;
using testutil::tiny_spec;

Attention random_attention(std::size_t d, std::size_t heads, Rng& rng) {
  Attention a;
  a.heads = heads;
  a.q = Linear(d, d, rng);
  a.k = Linear(d, d, rng);
  a.v = Linear(d, d, rng);
  a.o = Linear(d, d, rng);
  for (Linear* l : {&a.q, &a.k, &a.v, &a.o})
    for (double& b : l->bias.mutable_data()) b = normal01(rng);
  return a;
}

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor& t) {
  Mat m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t.at(i, j);
  return m;
}

Mat affine(const Mat& x, const Linear& l) {
  Mat w = to_mat(l.weight);
  Mat y(x.size(), std::vector<double>(w[0].size()));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < w[0].size(); ++j) {
      double s = l.bias[j];
      for (std::size_t k = 0; k < w.size(); ++k) s += x[i][k] * w[k][j];
      y[i][j] = s;
    }
  return y;
}

/// Textbook loop implementation used as an oracle.
Mat reference_attention(const Attention& a, const Mat& x) {
  const std::size_t n = x.size(), d = x[0].size(), dh = d / a.heads;
  Mat q = affine(x, a.q), k = affine(x, a.k), v = affine(x, a.v);
  Mat cat(n, std::vector<double>(d, 0.0));
  for (std::size_t h = 0; h < a.heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(n);
      double mx = -1e300;
      for (std::size_t j = 0; j < n; ++j) {
        double dot = 0;
        for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) dot += q[i][c] * k[j][c];
        s[j] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (double& e : s) z += (e = std::exp(e - mx));
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) cat[i][c] += s[j] / z * v[j][c];
    }
  }
  return affine(cat, a.o);
}

TEST(AttentionCore, SingleTokenReturnsValueProjection) {
  Rng rng(1);
  Attention a = random_attention(4, 2, rng);
  Tensor x = randn({1, 4}, rng);
  Tensor y = attention_core(a, x, nullptr, nullptr, "attn");
  Tensor expect = a.o(a.v(x));
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(y[j], expect[j], 1e-14);
}

TEST(AttentionCore, IdenticalKeysAverageValues) {
  Rng rng(2);
  Attention a = random_attention(4, 1, rng);
  for (double& w : a.k.weight.mutable_data()) w = 0.0;  // every key is the bias
  Tensor x = randn({3, 4}, rng);
  Tensor y = attention_core(a, x, nullptr, nullptr, "attn");
  Tensor v = a.v(x);
  std::vector<double> m(4, 0.0);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) m[j] += v.at(i, j) / 3;
  Tensor expect = a.o(Tensor::matrix(1, 4, m));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(y.at(i, j), expect[j], 1e-13);
}

TEST(AttentionCore, MatchesLoopReference) {
  Rng rng(3);
  for (int c = 0; c < 50; ++c) {
    const std::size_t heads = testutil::rand_dim(rng, 1, 3);
    const std::size_t d = heads * testutil::rand_dim(rng, 1, 3);
    const std::size_t n = testutil::rand_dim(rng, 1, 7);
    Attention a = random_attention(d, heads, rng);
    Tensor x = randn({n, d}, rng);
    Tensor y = attention_core(a, x, nullptr, nullptr, "attn");
    Mat ref = reference_attention(a, to_mat(x));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) ASSERT_NEAR(y.at(i, j), ref[i][j], 1e-12);
  }
}

TEST(AttentionCore, DeadKeysAreIgnored) {
  Rng rng(4);
  Attention a = random_attention(4, 2, rng);
  Tensor x = randn({5, 4}, rng);
  Tensor keep = Tensor::vector({1, 0, 1, 0, 1});
  Tensor y = attention_core(a, x, &keep, nullptr, "attn");
  Tensor sub = gather_rows(x, {0, 2, 4});
  Tensor ys = attention_core(a, sub, nullptr, nullptr, "attn");
  const std::size_t rows[] = {0, 2, 4};
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(y.at(rows[r], j), ys.at(r, j), 1e-13);
}

TEST(AttentionForward, AllDeadIsAnError) {
  Model m(tiny_spec({}, 1), 5);
  Tensor keep = Tensor::zeros({3});
  EXPECT_THROW(attention_forward(m.blocks()[0], Tensor::zeros({3, 4}), &keep), Error);
  EXPECT_THROW(attention_forward(m.blocks()[0], Tensor::zeros({3, 5})), ShapeError);
}

TEST(AttentionForward, CostCountsProjectionsAndScores) {
  Model m(tiny_spec({}, 1), 6);
  Rng rng(6);
  Recorder rec;
  attention_forward(m.blocks()[0], randn({5, 4}, rng), nullptr, &rec);
  const std::uint64_t n = 5, d = 4;
  EXPECT_EQ(rec.macs("block0.attn"), 4 * n * d * d + 2 * n * n * d);
}

TEST(ModelTest, PlainForwardMatchesBlockByBlock) {
  Rng rng(7);
  for (int c = 0; c < 10; ++c) {
    ModelSpec spec = tiny_spec({}, testutil::rand_dim(rng, 1, 4));
    spec.positional = c % 2 == 0;
    Model m(spec, rng());
    Tensor x = randn({testutil::rand_dim(rng, 1, 8), 3}, rng);
    ForwardContext ctx;
    Tensor y = m.forward(x, ctx);
    Tensor h = add(matmul(x, m.params().get("embed.weight")), m.params().get("embed.bias"));
    if (spec.positional) {
      std::vector<std::size_t> idx(x.dim(0));
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      h = add(h, gather_rows(m.params().get("pos"), idx));
    }
    for (const auto& b : m.blocks()) {
      h = attention_forward(b, h);
      h = add(h, b.ffn(b.ln2(h)));
    }
    Tensor expect = reshape(m.head()(mean_pool(h)), {3});
    for (std::size_t k = 0; k < 3; ++k) ASSERT_NEAR(y[k], expect[k], 1e-12);
  }
}

TEST(ModelTest, PermutationEquivariantWithoutPositions) {
  Rng rng(8);
  ModelSpec spec = tiny_spec({{{Mechanism::moe}}, {{Mechanism::skip}}});
  for (int c = 0; c < 20; ++c) {
    Model m(spec, rng());
    const std::size_t n = testutil::rand_dim(rng, 2, 8);
    Tensor x = randn({n, 3}, rng);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[uniform_index(rng, i + 1)]);
    ForwardContext a, b;
    Tensor y1 = m.forward(x, a), y2 = m.forward(gather_rows(x, perm), b);
    for (std::size_t k = 0; k < 3; ++k) ASSERT_NEAR(y1[k], y2[k], 1e-10);
  }
}

TEST(ModelSpecTest, Validation) {
  ModelSpec s = tiny_spec({});
  s.depth = 0;
  EXPECT_THROW(s.validate(), ConfigError);
  ModelSpec e = tiny_spec({{}, {{Mechanism::exit_head}}});
  EXPECT_THROW(e.validate(), ConfigError);
  ModelSpec h = tiny_spec({});
  h.heads = 3;
  EXPECT_THROW(h.validate(), ConfigError);
  ModelSpec k = tiny_spec({{{Mechanism::moe}}, {}});
  k.moe.k = 4;
  EXPECT_THROW(k.validate(), ConfigError);
  ModelSpec r = tiny_spec({{{Mechanism::token_select}}, {}});
  r.token_select.keep_ratio = 0.0;
  EXPECT_THROW(r.validate(), ConfigError);
  EXPECT_THROW(parse_mechanism("conv"), ConfigError);
}

TEST(ModelSpecTest, JsonRoundTrip) {
  ModelSpec s = tiny_spec({{{Mechanism::moe, Mechanism::token_select}}, {{Mechanism::skip, Mechanism::exit_head}}, {}}, 3);
  s.moe.strategy = RoutingStrategy::expert_choice;
  s.moe.balance_weight = 0.01;
  s.positional = true;
  ModelSpec back = model_spec_from_json(to_json(s));
  EXPECT_TRUE(back == s);
  back.moe.k = 1;
  EXPECT_FALSE(back == s);
}

TEST(ModelSpecTest, UnknownKeyRejected) {
  Json j = to_json(tiny_spec({}));
  j["widht"] = 3;
  EXPECT_THROW(model_spec_from_json(j), ConfigError);
}

TEST(ModelTest, AssembleIsDeterministic) {
  ModelSpec spec = tiny_spec({{{Mechanism::moe}}, {{Mechanism::token_select}}});
  Model a = assemble(spec, 9), b = assemble(spec, 9), c = assemble(spec, 10);
  ASSERT_EQ(a.params().entries().size(), b.params().entries().size());
  bool differs = false;
  for (std::size_t i = 0; i < a.params().entries().size(); ++i) {
    EXPECT_EQ(a.params().entries()[i].value.to_vector(), b.params().entries()[i].value.to_vector());
    differs = differs || a.params().entries()[i].value.to_vector() != c.params().entries()[i].value.to_vector();
  }
  EXPECT_TRUE(differs);
}

TEST(ModelTest, InputShapeErrors) {
  ModelSpec spec = tiny_spec({});
  spec.positional = true;
  Model m(spec, 11);
  ForwardContext ctx;
  EXPECT_THROW(m.forward(Tensor::zeros({3, 4}), ctx), ShapeError);
  EXPECT_THROW(m.forward(Tensor::zeros({9, 3}), ctx), ShapeError);
}

GradCheckResult check_model(Model& m, const Tensor& x, ForwardContext proto) {
  Tensor w = Tensor::vector({0.4, -1.2, 0.8});
  return gradient_check_params(
      [&] {
        ForwardContext ctx = proto;
        Tensor loss = testutil::project(m.forward(x, ctx), w);
        return ctx.aux_loss.defined() ? add(loss, ctx.aux_loss) : loss;
      },
      m.params().tensors(), 1e-6, 1e-4);
}

TEST(ModelGradient, PlainBlocks) {
  Rng rng(12);
  for (int c = 0; c < 3; ++c) {
    Model m(tiny_spec({}), rng());
    auto r = check_model(m, randn({4, 3}, rng), {});
    EXPECT_TRUE(r.passed) << r.message;
  }
}

TEST(ModelGradient, MoeGreedySoftGates) {
  Rng rng(13);
  for (int c = 0; c < 3; ++c) {
    ModelSpec spec = tiny_spec({{{Mechanism::moe}}, {}});
    spec.moe.k = 2;
    Model m(spec, rng());
    auto r = check_model(m, randn({4, 3}, rng), {});
    EXPECT_TRUE(r.passed) << r.message;
  }
}

TEST(ModelGradient, SoftVariants) {
  Rng rng(14);
  for (MoEVariant v : {MoEVariant::soft_dispatch, MoEVariant::soft_weights}) {
    ModelSpec spec = tiny_spec({{{Mechanism::moe}}, {}});
    spec.moe.variant = v;
    spec.moe.k = 1;
    Model m(spec, rng());
    auto r = check_model(m, randn({4, 3}, rng), {});
    EXPECT_TRUE(r.passed) << to_string(v) << ": " << r.message;
  }
}

TEST(ModelGradient, SkipWithLogisticGates) {
  Rng rng(15);
  for (int c = 0; c < 3; ++c) {
    Model m(tiny_spec({{{Mechanism::skip}}, {{Mechanism::skip}}}), rng());
    ForwardContext proto;
    proto.training = true;
    auto r = check_model(m, randn({4, 3}, rng), proto);
    EXPECT_TRUE(r.passed) << r.message;
  }
}

TEST(ModelGradient, SkipGateClosedAtInference) {
  Model m(tiny_spec({{{Mechanism::skip}}, {}}), 16);
  Linear& g = *m.blocks()[0].skip_gate;
  for (double& v : g.weight.mutable_data()) v = 0.0;
  g.bias.mutable_data()[0] = -1.0;
  Rng rng(16);
  Recorder rec;
  ForwardContext ctx;
  ctx.recorder = &rec;
  m.forward(randn({4, 3}, rng), ctx);
  EXPECT_EQ(ctx.skip_gates, (std::vector<double>{0.0}));
  EXPECT_EQ(rec.macs("block0.ffn"), 0u);
  EXPECT_FALSE(ctx.trace.blocks[0].ffn_evaluated);
  EXPECT_GT(rec.macs("block1.ffn"), 0u);
}

TEST(ModelGradient, GreedyTokenSelectionNonSelectorParams) {
  Rng rng(17);
  for (int c = 0; c < 3; ++c) {
    Model m(tiny_spec({{{Mechanism::token_select}}, {}}), rng());
    Tensor x = randn({5, 3}, rng);
    std::vector<Tensor> ps;
    for (auto& e : m.params().entries())
      if (e.name.find(".select") == std::string::npos) ps.push_back(e.value);
    auto r = gradient_check_params(
        [&] {
          ForwardContext ctx;
          return testutil::project(m.forward(x, ctx), Tensor::vector({1, 0.5, -0.5}));
        },
        ps, 1e-6, 1e-4);
    EXPECT_TRUE(r.passed) << r.message;
  }
}

TEST(ModelGradient, ExitHeadsThroughJointLoss) {
  Rng rng(18);
  for (int c = 0; c < 3; ++c) {
    Model m(tiny_spec({{{Mechanism::exit_head}}, {}}), rng());
    Tensor x = randn({4, 3}, rng);
    auto r = gradient_check_params(
        [&] {
          ForwardContext ctx;
          return joint_loss(forward_all_exits(m, x, ctx), 2, EENNConfig{});
        },
        m.params().tensors(), 1e-6, 1e-4);
    EXPECT_TRUE(r.passed) << r.message;
  }
}

TEST(ModelGradient, BalancingLossAddsToObjective) {
  ModelSpec spec = tiny_spec({{{Mechanism::moe}}, {}});
  spec.moe.balance_weight = 0.5;
  Model m(spec, 19);
  Rng rng(19), sampler(20);
  ForwardContext ctx;
  ctx.training = true;
  ctx.rng = &sampler;
  m.forward(randn({6, 3}, rng), ctx);
  ASSERT_TRUE(ctx.aux_loss.defined());
  EXPECT_NEAR(ctx.aux_loss.item(), 0.5 * balancing_loss(ctx.routing[0]).item(), 1e-15);
  EXPECT_EQ(ctx.routing_blocks, (std::vector<std::size_t>{0}));
}

}  // namespace
}  // namespace condcomp
