#include <gtest/gtest.h>

#include "demosynth/dataset.hpp"
#include "demosynth/error.hpp"
#include "demosynth/eval.hpp"
#include "demosynth/exec.hpp"
#include "demosynth/train.hpp"

using namespace demosynth;
using namespace demosynth::eval;

namespace {

const dataset::DatasetConfig& small_dataset_config() {
  static const dataset::DatasetConfig c = [] {
    dataset::DatasetConfig d;
    d.k = 3;
    return d;
  }();
  return c;
}

const dsl::Language& lang() {
  static const dsl::Language l = small_dataset_config().language();
  return l;
}

std::vector<int> toks(const std::string& text) { return lang().to_tokens(lang().parse(text)); }

bool closure_has(const std::string& of, const std::string& member, AliasRules rules = {}) {
  return alias_closure(lang().parse(of), lang(), rules).count(toks(member)) > 0;
}

// Parameters whose greedy output is `program` for every input: all blocks are
// zeroed, so the decoder's final state at position t is a one-hot on axis t,
// and the output projection maps axis t to the t-th target token.
model::Params<float> constant_output_params(const dataset::DatasetConfig& dc,
                                            const std::vector<int>& program) {
  model::ModelConfig mc;
  mc.d_model = 8;
  mc.n_heads = 1;
  mc.n_enc_blocks = 1;
  mc.n_dec_blocks = 1;
  mc.d_ff = 8;
  mc.dropout = 0.0;
  dataset::Manifest m;
  m.config = dc;
  m.program_vocab_size = lang().vocab_size();
  m.visual_vocab_size = vislang::Tokenizer(dc.world.q, dc.world.m).vocab_size();
  mc = train::model_config_for(m, mc);
  model::Params<float> p(mc);
  const model::TensorInfo& norm = p.layout.find("dec.final_norm");
  for (std::size_t i = 0; i < norm.size(); ++i) p.data[norm.offset + i] = 1.0f;
  const model::TensorInfo& pos = p.layout.find("tgt_pos");
  const model::TensorInfo& out = p.layout.find("out_proj");
  for (std::size_t t = 0; t + 1 < program.size(); ++t) {
    p.data[pos.offset + t * static_cast<std::size_t>(pos.cols) + t] = 1.0f;
    p.data[out.offset + t * static_cast<std::size_t>(out.cols) + static_cast<std::size_t>(program[t + 1])] = 1.0f;
  }
  return p;
}

std::vector<dataset::Entry> entries_with_truths(const std::vector<std::string>& truths) {
  const dataset::Dataset d = dataset::build_dataset(truths.size(), 1, small_dataset_config());
  std::vector<dataset::Entry> out;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    dataset::Entry e = d.train[i];
    e.program_text = truths[i];
    e.program_tokens = toks(truths[i]);
    out.push_back(e);
  }
  return out;
}

}  // namespace

TEST(Eval, ExactMatchIgnoresFraming) {
  const std::vector<int> a = toks("DEF run { MOVE }");
  EXPECT_TRUE(exact_match(a, a));
  std::vector<int> bare(a.begin() + 1, a.end() - 1);
  EXPECT_TRUE(exact_match(bare, a));
  std::vector<int> padded = a;
  padded.push_back(0);
  EXPECT_TRUE(exact_match(padded, a));
  std::vector<int> off = a;
  off[4] = lang().action_token(world::kTurnLeft);
  EXPECT_FALSE(exact_match(off, a));
}

TEST(Eval, ClosureExamples) {
  EXPECT_TRUE(closure_has("DEF run { REPEAT 2 { MOVE } }", "DEF run { MOVE MOVE }"));
  EXPECT_TRUE(closure_has("DEF run { IF (P0) { MOVE } ELSE { TURN_L } }",
                          "DEF run { IF (NOT(P0)) { TURN_L } ELSE { MOVE } }"));
  const auto single = alias_closure(lang().parse("DEF run { MOVE TURN_L ATTACK }"), lang(), {});
  EXPECT_EQ(single, (std::set<std::vector<int>>{toks("DEF run { MOVE TURN_L ATTACK }")}));
}

TEST(Eval, ClosureRules) {
  EXPECT_TRUE(closure_has("DEF run { REPEAT 1 { MOVE TURN_L } }", "DEF run { MOVE TURN_L }"));
  EXPECT_TRUE(closure_has("DEF run { REPEAT 2 { REPEAT 3 { MOVE } } }", "DEF run { REPEAT 6 { MOVE } }"));
  EXPECT_TRUE(closure_has("DEF run { REPEAT 6 { MOVE } }", "DEF run { REPEAT 2 { REPEAT 3 { MOVE } } }"));
  EXPECT_TRUE(closure_has("DEF run { IF (NOT(NOT(P1))) { MOVE } }", "DEF run { IF (P1) { MOVE } }"));
  EXPECT_TRUE(closure_has("DEF run { TURN_L TURN_L TURN_L }", "DEF run { REPEAT 3 { TURN_L } }"));
  EXPECT_FALSE(closure_has("DEF run { IF (AND(P0, P1)) { MOVE } }", "DEF run { IF (AND(P1, P0)) { MOVE } }"));
  AliasRules commute;
  commute.commute = true;
  EXPECT_TRUE(closure_has("DEF run { IF (AND(P0, P1)) { MOVE } }", "DEF run { IF (AND(P1, P0)) { MOVE } }",
                          commute));
  AliasRules no_r2;
  no_r2.r2 = false;
  EXPECT_FALSE(closure_has("DEF run { REPEAT 2 { MOVE } }", "DEF run { MOVE MOVE }", no_r2));
}

TEST(Eval, ClosureMembersParseAndRespectRaisedLimits) {
  const dataset::DatasetConfig& c = small_dataset_config();
  const int raised = c.limits.max_stmts * c.limits.max_repeat;
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    const dsl::Program p = dataset::sample_program(seed, lang(), c.weights);
    std::set<std::vector<int>> closure;
    try {
      closure = alias_closure(p, lang(), {});
    } catch (const ClosureOverflow&) {
      continue;
    }
    EXPECT_EQ(closure.count(lang().to_tokens(p)), 1u);
    for (const auto& member : closure) {
      const dsl::Program q = lang().from_tokens(member, raised);
      EXPECT_NO_THROW(lang().check_limits(q, raised));
    }
  }
}

TEST(Eval, ClosureOverflowThrows) {
  AliasRules tiny;
  tiny.cap = 2;
  EXPECT_THROW(alias_closure(lang().parse("DEF run { REPEAT 2 { MOVE } REPEAT 2 { TURN_L } }"), lang(), tiny),
               ClosureOverflow);
}

// Every single rewrite the closure can take is trace-preserving.
TEST(Eval, RewritesAreBehaviorPreserving) {
  const dataset::DatasetConfig& c = small_dataset_config();
  AliasRules all;
  all.commute = true;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const dsl::Program p = dataset::sample_program(1000 + seed, lang(), c.weights);
    for (const dsl::Program& q : rewrite_neighbors(p, lang(), all))
      ASSERT_TRUE(behavioral_eq(p, q, c.world, 20)) << lang().pretty_print(p) << "\n  vs\n" << lang().pretty_print(q);
  }
}

TEST(Eval, AliasMatchVerdicts) {
  const dsl::Program truth = lang().parse("DEF run { REPEAT 2 { MOVE } TURN_R }");
  const AliasVerdict same = alias_match(lang().to_tokens(truth), truth, lang(), {});
  EXPECT_TRUE(same.parsed && same.exact && same.alias);
  const AliasVerdict unrolled = alias_match(toks("DEF run { MOVE MOVE TURN_R }"), truth, lang(), {});
  EXPECT_TRUE(unrolled.parsed);
  EXPECT_FALSE(unrolled.exact);
  EXPECT_TRUE(unrolled.alias);
  const AliasVerdict garbage = alias_match({1, 3, 4, 2}, truth, lang(), {});
  EXPECT_FALSE(garbage.parsed || garbage.exact || garbage.alias);
  // Same traces everywhere, but no rule relates them.
  const dsl::Program move = lang().parse("DEF run { MOVE }");
  const AliasVerdict outside = alias_match(toks("DEF run { IF (P0) { MOVE } ELSE { MOVE } }"), move, lang(), {});
  EXPECT_TRUE(outside.parsed);
  EXPECT_FALSE(outside.alias);
  EXPECT_TRUE(behavioral_eq(move, lang().parse("DEF run { IF (P0) { MOVE } ELSE { MOVE } }"),
                            small_dataset_config().world));
}

TEST(Eval, FallbackSearchDecidesOverflowingPairs) {
  AliasRules tight;
  tight.cap = 3;
  const dsl::Program truth = lang().parse("DEF run { REPEAT 2 { MOVE } REPEAT 2 { TURN_L } ATTACK }");
  const AliasVerdict v = alias_match(toks("DEF run { MOVE MOVE TURN_L TURN_L ATTACK }"), truth, lang(), tight);
  EXPECT_TRUE(v.overflow);
  EXPECT_TRUE(v.alias);
  const AliasVerdict miss = alias_match(toks("DEF run { MOVE TURN_L ATTACK }"), truth, lang(), tight);
  EXPECT_FALSE(miss.alias);
}

TEST(Eval, BehavioralEquality) {
  const world::WorldConfig& w = small_dataset_config().world;
  const dsl::Program a = lang().parse("DEF run { WHILE (P0) { MOVE } ATTACK }");
  EXPECT_TRUE(behavioral_eq(a, a, w));
  EXPECT_FALSE(behavioral_eq(a, lang().parse("DEF run { WHILE (P0) { MOVE } PICKUP }"), w));
  // One TURN_L and three TURN_R end facing the same way but emit different traces.
  EXPECT_FALSE(behavioral_eq(lang().parse("DEF run { TURN_L }"), lang().parse("DEF run { REPEAT 3 { TURN_R } }"), w));
}

TEST(Eval, EvaluateArithmetic) {
  const std::vector<int> output = toks("DEF run { MOVE MOVE }");
  const model::Params<float> p = constant_output_params(small_dataset_config(), output);
  EvalOptions opts;
  const auto two = entries_with_truths({"DEF run { MOVE MOVE }", "DEF run { TURN_L }"});
  const EvalReport r2 = evaluate(p, two, small_dataset_config(), opts);
  EXPECT_EQ(r2.n, 2u);
  EXPECT_EQ(r2.exact_count, 1u);
  EXPECT_EQ(r2.alias_count, 1u);
  EXPECT_EQ(r2.acc_exact(), 0.5);
  EXPECT_EQ(r2.acc_alias(), 0.5);
  EXPECT_EQ(r2.parse_failure_count, 0u);

  const auto three = entries_with_truths(
      {"DEF run { MOVE MOVE }", "DEF run { REPEAT 2 { MOVE } }", "DEF run { TURN_L }"});
  const EvalReport r3 = evaluate(p, three, small_dataset_config(), opts);
  EXPECT_EQ(r3.exact_count, 1u);
  EXPECT_EQ(r3.alias_count, 2u);
  ASSERT_EQ(r3.predictions.size(), 3u);
  EXPECT_EQ(r3.predictions[1].text, "DEF run { MOVE MOVE }");
  EXPECT_TRUE(r3.predictions[1].verdict.alias);
  EXPECT_EQ(report_to_json(r3)["acc_alias"], "0.666667");
}

TEST(Eval, UnparsablePredictionsCountAsFailures) {
  model::Params<float> p = constant_output_params(small_dataset_config(), toks("DEF run { MOVE }"));
  const model::TensorInfo& out = p.layout.find("out_proj");
  std::fill(p.data.begin() + static_cast<std::ptrdiff_t>(out.offset),
            p.data.begin() + static_cast<std::ptrdiff_t>(out.offset + out.size()), 0.0f);
  const EvalReport r = evaluate(p, entries_with_truths({"DEF run { MOVE }", "DEF run { TURN_L }"}),
                                small_dataset_config(), EvalOptions{});
  EXPECT_EQ(r.parse_failure_count, 2u);
  EXPECT_EQ(r.exact_count, 0u);
  EXPECT_EQ(r.alias_count, 0u);
}

TEST(Eval, ReportsAreReproducible) {
  const model::Params<float> p = constant_output_params(small_dataset_config(), toks("DEF run { MOVE }"));
  const auto entries = entries_with_truths({"DEF run { MOVE }", "DEF run { REPEAT 2 { MOVE } }"});
  EvalOptions opts;
  opts.noise.epsilon = 0.2;
  opts.noise.seed = 4;
  EXPECT_EQ(report_to_json(evaluate(p, entries, small_dataset_config(), opts)).dump(),
            report_to_json(evaluate(p, entries, small_dataset_config(), opts)).dump());
}

TEST(Eval, AblationWithOneSeedHasNoSpread) {
  const model::Params<float> p = constant_output_params(small_dataset_config(), toks("DEF run { MOVE }"));
  const auto entries = entries_with_truths({"DEF run { MOVE }", "DEF run { TURN_L }", "DEF run { MOVE }"});
  const auto rows = ablate(p, entries, small_dataset_config(), EvalOptions{}, {0.0, 0.1}, {7});
  ASSERT_EQ(rows.size(), 2u);
  for (const AblationRow& r : rows) {
    EXPECT_EQ(r.min_exact, r.max_exact);
    EXPECT_EQ(r.mean_exact, r.max_exact);
    EXPECT_EQ(r.min_alias, r.max_alias);
    EXPECT_LE(r.mean_exact, r.mean_alias);
  }
  EvalOptions zero;
  zero.noise.seed = 7;
  const EvalReport direct = evaluate(p, entries, small_dataset_config(), zero);
  EXPECT_EQ(rows[0].mean_exact, direct.acc_exact());
  EXPECT_EQ(rows[0].mean_alias, direct.acc_alias());
  EXPECT_THROW(ablate(p, entries, small_dataset_config(), EvalOptions{}, {0.0}, {}), ConfigError);
  const std::string text = ablation_to_text(rows);
  EXPECT_NE(text.find("0.1"), std::string::npos);
}

TEST(Eval, FixedFormatting) {
  EXPECT_EQ(fixed(2.0 / 3.0), "0.666667");
  EXPECT_EQ(fixed(0.5, 2), "0.50");
}
