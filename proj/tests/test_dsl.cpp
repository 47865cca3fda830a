#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "demosynth/dataset.hpp"
#include "demosynth/dsl.hpp"
#include "demosynth/error.hpp"
#include "demosynth/world.hpp"

using namespace demosynth;
using namespace demosynth::dsl;

namespace {

Language default_language() { return Language(6, world::default_action_names(), Limits{}); }

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  std::string s = ss.str();
  while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
  return s;
}

}  // namespace

TEST(Dsl, VocabularyLayout) {
  const Language lang = default_language();
  EXPECT_EQ(lang.vocab_size(), 35);
  const std::vector<std::string> expected{"<pad>", "<bos>", "<eos>", "DEF", "run", "{", "}", "(",
                                          ")", ",", "REPEAT", "WHILE", "IF", "ELSE", "NOT", "AND",
                                          "OR", "MOVE", "TURN_L", "TURN_R", "ATTACK", "PICKUP",
                                          "NOOP", "P0", "P1", "P2", "P3", "P4", "P5", "1", "2",
                                          "3", "4", "5", "6"};
  for (int i = 0; i < lang.vocab_size(); ++i) EXPECT_EQ(lang.token_text(i), expected[static_cast<std::size_t>(i)]);
  EXPECT_EQ(lang.token_id("MOVE"), 17);
  EXPECT_EQ(lang.token_id("nope"), -1);
}

TEST(Dsl, ParseSmallestProgram) {
  const Language lang = default_language();
  const Program p = lang.parse("DEF run { MOVE }");
  EXPECT_EQ(p, Program{{Statement::action(world::kMove)}});
}

TEST(Dsl, ParseRepeat) {
  const Language lang = default_language();
  EXPECT_EQ(lang.parse("DEF run { REPEAT 2 { MOVE } }"),
            Program{{Statement::repeat(2, {Statement::action(world::kMove)})}});
}

TEST(Dsl, ParseIfElseMatchesHandBuiltAst) {
  const Language lang = default_language();
  const Program expected{{Statement::if_else(Cond::negate(Cond::percept_ref(0)),
                                             {Statement::action(world::kAttack)},
                                             {Statement::action(world::kTurnLeft)})}};
  EXPECT_EQ(lang.parse("DEF run { IF (NOT(P0)) { ATTACK } ELSE { TURN_L } }"), expected);
}

TEST(Dsl, WhitespaceIsInsignificant) {
  const Language lang = default_language();
  EXPECT_EQ(lang.parse("DEF run{REPEAT 2{MOVE}}"), lang.parse("DEF  run {\n REPEAT 2 { MOVE }\n}"));
}

TEST(Dsl, PrettyPrintSmallest) {
  const Language lang = default_language();
  EXPECT_EQ(lang.pretty_print(Program{{Statement::action(world::kMove)}}), "DEF run { MOVE }");
}

TEST(Dsl, PrettyPrintGolden) {
  const Language lang = default_language();
  const Program p{{Statement::loop_while(
                       Cond::both(Cond::percept_ref(0), Cond::negate(Cond::percept_ref(2))),
                       {Statement::repeat(3, {Statement::action(world::kMove),
                                              Statement::action(world::kTurnLeft)}),
                        Statement::if_else(Cond::percept_ref(3), {Statement::action(world::kPickup)},
                                           {Statement::action(world::kNoop)})}),
                   Statement::action(world::kAttack)}};
  const std::string golden = read_text(std::string(DEMOSYNTH_TEST_DATA) + "/pretty_golden.txt");
  EXPECT_EQ(lang.pretty_print(p), golden);
  EXPECT_EQ(lang.parse(golden), p);
}

TEST(Dsl, TokensOfSmallestProgram) {
  const Language lang = default_language();
  const std::vector<int> expected{kBos, 3, 4, 5, 17, 6, kEos};
  EXPECT_EQ(lang.to_tokens(Program{{Statement::action(world::kMove)}}), expected);
}

TEST(Dsl, MalformedTokensThrowDecodeError) {
  const Language lang = default_language();
  EXPECT_THROW(lang.from_tokens({kBos, 6, kEos}), DecodeError);
  EXPECT_THROW(lang.from_tokens({kBos, 3, 4, 5, 17, 6}), DecodeError);
  EXPECT_THROW(lang.from_tokens({kBos, 3, 4, 5, 99, 6, kEos}), DecodeError);
  EXPECT_THROW(lang.from_tokens({kBos, 3, 4, 5, 17, 6, 17, kEos}), DecodeError);
}

TEST(Dsl, SyntaxErrorReportsPositionAndExpected) {
  const Language lang = default_language();
  try {
    lang.parse("DEF run { REPEAT { MOVE } }");
    FAIL() << "expected SyntaxError";
  } catch (const SyntaxError& e) {
    EXPECT_EQ(e.position(), 17u);
    EXPECT_EQ(e.expected(), "INT");
  }
  EXPECT_THROW(lang.parse("DEF run { }"), SyntaxError);
  EXPECT_THROW(lang.parse("DEF run { JUMP }"), SyntaxError);
  EXPECT_THROW(lang.parse("DEF run { MOVE } MOVE"), SyntaxError);
  EXPECT_THROW(lang.parse("DEF run { IF (P6) { MOVE } }"), SyntaxError);
  EXPECT_THROW(lang.parse("DEF run { IF (AND(P0)) { MOVE } }"), SyntaxError);
}

TEST(Dsl, LimitsAreEnforced) {
  const Language lang = default_language();
  EXPECT_THROW(lang.parse("DEF run { REPEAT 7 { MOVE } }"), Error);
  EXPECT_NO_THROW(lang.parse("DEF run { REPEAT 1 { MOVE } }"));
  // depth 4 accepted, depth 5 rejected
  EXPECT_NO_THROW(lang.parse("DEF run { REPEAT 2 { REPEAT 2 { REPEAT 2 { MOVE } } } }"));
  EXPECT_THROW(lang.parse("DEF run { REPEAT 2 { REPEAT 2 { REPEAT 2 { REPEAT 2 { MOVE } } } } }"),
               LimitError);
  std::string many = "DEF run {";
  for (int i = 0; i < 25; ++i) many += " MOVE";
  many += " }";
  EXPECT_THROW(lang.parse(many), LimitError);
  EXPECT_NO_THROW(lang.parse(many, 48));
}

TEST(Dsl, DepthAndStatementCount) {
  const Block b{Statement::repeat(2, {Statement::action(0), Statement::if_then(Cond::percept_ref(1), {Statement::action(1)})}),
                Statement::action(2)};
  EXPECT_EQ(depth(b), 3);
  EXPECT_EQ(statement_count(b), 5);
  EXPECT_EQ(depth(Cond::negate(Cond::both(Cond::percept_ref(0), Cond::percept_ref(1)))), 3);
}

TEST(Dsl, SampledProgramsRoundTrip) {
  const dataset::DatasetConfig config;
  const Language lang = config.language();
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const Program p = dataset::sample_program(seed, lang, config.weights);
    const std::string text = lang.pretty_print(p);
    const Program reparsed = lang.parse(text);
    ASSERT_EQ(reparsed, p) << text;
    ASSERT_EQ(lang.pretty_print(reparsed), text);
    ASSERT_EQ(lang.from_tokens(lang.to_tokens(p)), p) << text;
    for (int t : lang.to_tokens(p)) ASSERT_LT(t, lang.vocab_size());
  }
}

TEST(Dsl, ExtraActionsAreNamed) {
  world::WorldConfig wc;
  wc.m = 8;
  const Language lang(6, wc.action_names(), Limits{});
  EXPECT_EQ(lang.vocab_size(), 37);
  EXPECT_EQ(lang.parse("DEF run { ACT7 }"), Program{{Statement::action(7)}});
}
