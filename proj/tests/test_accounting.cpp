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

#include <cstdio>

#include "test_util.hpp"

namespace condcomp {
namespace {

using testutil::randn;
using testutil::tiny_spec;

TEST(LinearCost, FourToThree) {
  Rng rng(1);
  Linear l(4, 3, rng);
  Recorder rec;
  l(randn({1, 4}, rng), &rec, "fc");
  EXPECT_EQ(rec.macs("fc"), 12u);
  EXPECT_EQ(rec.total_macs(), 12u);
}

TEST(StaticCost, HandCountedDepthTwo) {
  // d_input 3, d 4, d_ff 5, 3 classes, 2 tokens:
  // embed 2*3*4, per block attention 4*2*16 + 2*2*2*4 and ffn 2*2*4*5, head 4*3.
  ModelSpec spec = tiny_spec({});
  FlopReport r = static_cost(spec, 2);
  EXPECT_EQ(r.macs("embed"), 24u);
  EXPECT_EQ(r.macs("block0.attn"), 160u);
  EXPECT_EQ(r.macs("block1.ffn"), 80u);
  EXPECT_EQ(r.macs("head"), 12u);
  EXPECT_EQ(r.total_macs(), 24u + 2 * (160 + 80) + 12);
}

TEST(StaticCost, DoublingTokens) {
  ModelSpec spec = tiny_spec({});
  FlopReport a = static_cost(spec, 4), b = static_cost(spec, 8);
  EXPECT_EQ(b.macs("block0.ffn"), 2 * a.macs("block0.ffn"));
  const std::uint64_t d = 4;
  auto score_term = [&](std::uint64_t n) { return 2 * n * n * d; };
  auto proj_term = [&](std::uint64_t n) { return 4 * n * d * d; };
  EXPECT_EQ(a.macs("block0.attn"), proj_term(4) + score_term(4));
  EXPECT_EQ(b.macs("block0.attn"), 2 * proj_term(4) + 4 * score_term(4));
  EXPECT_EQ(b.elem_ops("block0.attn"), 4 * a.elem_ops("block0.attn"));
}

TEST(DynamicCost, NoSavingsEqualsStatic) {
  ModelSpec spec = tiny_spec({{{Mechanism::skip}}, {}});
  DecisionTrace t = dense_trace(spec, 5);
  EXPECT_EQ(dynamic_cost(spec, t).total_macs(), static_cost(spec, 5).total_macs());
  Model m(spec, 2);
  Linear& g = *m.blocks()[0].skip_gate;
  for (double& v : g.weight.mutable_data()) v = 0.0;
  g.bias.mutable_data()[0] = 3.0;  // gate open
  Rng rng(2);
  Recorder rec;
  ForwardContext ctx;
  ctx.recorder = &rec;
  m.forward(randn({5, 3}, rng), ctx);
  EXPECT_EQ(rec.total_macs(), static_cost(spec, 5).total_macs());
}

TEST(DynamicCost, EarlyExitAfterFirstOfThreeBlocks) {
  ModelSpec spec = tiny_spec({{{Mechanism::exit_head}}, {}, {}}, 3);
  spec.d_model = 32;
  spec.heads = 4;
  spec.d_ff = 64;
  Model m(spec, 3);
  Linear& head = *m.blocks()[0].exit_head;
  for (double& v : head.weight.mutable_data()) v = 0.0;
  head.bias.mutable_data()[0] = 10.0;
  Rng rng(3);
  EENNConfig cfg;
  cfg.threshold = 0.9;
  ForwardContext ctx;
  auto d = infer_threshold(m, randn({8, 3}, rng), cfg, ctx);
  ASSERT_EQ(d.trace.exit_index, 1u);
  const double ratio = static_cast<double>(d.trace.macs) / static_cast<double>(static_cost(spec, 8).total_macs());
  EXPECT_NEAR(ratio, 1.0 / 3.0, 0.02);
}

TEST(DynamicCost, ExpertCostProportionalToK) {
  ModelSpec spec = tiny_spec({{{Mechanism::moe}}, {}});
  spec.moe.n_experts = 4;
  spec.moe.k = 1;
  Model m(spec, 4);
  Rng rng(4);
  Tensor x = randn({6, 3}, rng);
  auto expert_macs = [&](std::size_t k) {
    Recorder rec;
    ForwardContext ctx;
    ctx.recorder = &rec;
    ctx.moe_k = k;
    m.forward(x, ctx);
    EXPECT_EQ(rec.total_macs(), dynamic_cost(spec, ctx.trace).total_macs());
    return rec.macs("block0.moe.experts");
  };
  const std::uint64_t one = expert_macs(1), four = expert_macs(4);
  EXPECT_EQ(one, 6u * 2 * 4 * 3);
  EXPECT_EQ(four, 4 * one);
}

TEST(DynamicCost, InconsistentTraceIsAnError) {
  ModelSpec spec = tiny_spec({{{Mechanism::token_select}}, {}});
  DecisionTrace t = dense_trace(spec, 4);
  t.blocks[1].rows_in = 3;
  try {
    dynamic_cost(spec, t);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("trace inconsistent with spec"), std::string::npos);
  }
  DecisionTrace u = dense_trace(spec, 4);
  u.blocks[1].rows = 2;  // drop without a selection point
  EXPECT_THROW(dynamic_cost(spec, u), Error);
  DecisionTrace v = dense_trace(spec, 4);
  v.blocks[0].ffn_evaluated = false;  // skip without a gate
  EXPECT_THROW(dynamic_cost(spec, v), Error);
}

TEST(DynamicCost, RecorderMatchesAnalyticCountEntryByEntry) {
  Rng rng(5);
  for (int c = 0; c < 200; ++c) {
    ModelSpec spec = testutil::random_mechanism_spec(rng);
    Model m(spec, rng());
    const std::size_t n = testutil::rand_dim(rng, 1, 8);
    Tensor x = randn({n, 3}, rng, 2.0);
    Recorder rec;
    ForwardContext ctx;
    ctx.recorder = &rec;
    const int mode = static_cast<int>(uniform_index(rng, 3));
    if (mode == 0) {
      m.forward(x, ctx);
    } else if (mode == 1) {
      EENNConfig cfg;
      cfg.threshold = uniform01(rng);
      infer_threshold(m, x, cfg, ctx);
    } else {
      infer_gated(m, x, ctx);
    }
    FlopReport analytic = dynamic_cost(spec, ctx.trace);
    FlopReport actual = FlopReport::from(rec);
    for (const auto& e : actual.layers) {
      EXPECT_EQ(e.macs, analytic.macs(e.layer)) << "case " << c << " layer " << e.layer;
      EXPECT_EQ(e.elem_ops, analytic.elem_ops(e.layer)) << "case " << c << " layer " << e.layer;
    }
    ASSERT_EQ(actual.total_macs(), analytic.total_macs()) << "case " << c;
    ASSERT_EQ(actual.total_elem_ops(), analytic.total_elem_ops()) << "case " << c;
    EXPECT_LE(analytic.total_macs(), static_cost(spec, n).total_macs());
  }
}

TEST(FlopReportTest, JsonShape) {
  FlopReport r;
  r.add("a", 3, 1);
  r.add("b", 4);
  r.add("a", 1);
  auto j = r.to_json();
  EXPECT_EQ(j["total_macs"], 8);
  EXPECT_EQ(j["total_elem_ops"], 1);
  EXPECT_EQ(j["layers"].size(), 2u);
  EXPECT_EQ(j["layers"][0]["macs"], 4);
}

TEST(CurveCsv, HeaderAndRoundTripFormat) {
  CurvePoint p{"ee-threshold", 0.1, 1.0 / 3.0, 0.75, 40, 7};
  const std::string csv = curve_csv({p});
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "knob,value,mean_macs,accuracy,n_samples,seed");
  const std::string row = curve_csv_row(p);
  char knob[64];
  double value, macs, acc;
  std::size_t n;
  unsigned long long seed;
  ASSERT_EQ(std::sscanf(row.c_str(), "%63[^,],%lf,%lf,%lf,%zu,%llu", knob, &value, &macs, &acc, &n, &seed), 6);
  EXPECT_EQ(value, 0.1);
  EXPECT_EQ(macs, 1.0 / 3.0);
  EXPECT_EQ(acc, 0.75);
  EXPECT_EQ(n, 40u);
  EXPECT_EQ(seed, 7u);
}

}  // namespace
}  // namespace condcomp
