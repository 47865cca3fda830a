#pragma once

// Program language: AST, grammar, canonical printer and the token vocabulary
// the program generator emits.
//
//   prog  := "DEF" "run" "{" stmts "}"
//   stmts := stmt+
//   stmt  := ACTION
//          | "REPEAT" INT "{" stmts "}"
//          | "WHILE" "(" cond ")" "{" stmts "}"
//          | "IF" "(" cond ")" "{" stmts "}" [ "ELSE" "{" stmts "}" ]
//   cond  := PERCEPT | "NOT" "(" cond ")"
//          | "AND" "(" cond "," cond ")" | "OR" "(" cond "," cond ")"

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace demosynth::dsl {

struct Limits {
  int max_nest = 4;
  int max_stmts = 24;
  int max_repeat = 6;

  bool operator==(const Limits&) const = default;
};

struct Cond {
  enum class Kind : std::uint8_t { Percept, Not, And, Or };

  Kind kind = Kind::Percept;
  int percept = 0;
  std::vector<Cond> args;

  static Cond percept_ref(int index) { return Cond{Kind::Percept, index, {}}; }
  static Cond negate(Cond c) { return Cond{Kind::Not, 0, {std::move(c)}}; }
  static Cond both(Cond a, Cond b) {
    return Cond{Kind::And, 0, {std::move(a), std::move(b)}};
  }
  static Cond either(Cond a, Cond b) {
    return Cond{Kind::Or, 0, {std::move(a), std::move(b)}};
  }

  bool operator==(const Cond&) const = default;
};

enum class StmtKind : std::uint8_t { Action, Repeat, While, If, IfElse };

struct Statement;
using Block = std::vector<Statement>;

struct Statement {
  StmtKind kind = StmtKind::Action;
  // Action index for Action, iteration count for Repeat.
  int value = 0;
  // Used by While / If / IfElse.
  Cond cond;
  Block body;
  // IfElse only.
  Block else_body;

  static Statement action(int index) { return Statement{StmtKind::Action, index, {}, {}, {}}; }
  static Statement repeat(int count, Block body) {
    return Statement{StmtKind::Repeat, count, {}, std::move(body), {}};
  }
  static Statement loop_while(Cond c, Block body) {
    return Statement{StmtKind::While, 0, std::move(c), std::move(body), {}};
  }
  static Statement if_then(Cond c, Block then_body) {
    return Statement{StmtKind::If, 0, std::move(c), std::move(then_body), {}};
  }
  static Statement if_else(Cond c, Block then_body, Block else_body) {
    return Statement{StmtKind::IfElse, 0, std::move(c), std::move(then_body),
                     std::move(else_body)};
  }

  bool operator==(const Statement&) const = default;
};

struct Program {
  Block body;
  bool operator==(const Program&) const = default;
};

// Nesting depth: an action has depth 1, a compound statement one more than its
// deepest body.
int depth(const Block& block);
int depth(const Cond& cond);
// Total number of statements, counting compound statements themselves.
int statement_count(const Block& block);

// Reserved program-token ids.
enum SpecialToken : int { kPad = 0, kBos = 1, kEos = 2 };

// The language instance for a given world: q percepts (named P0..P{q-1}),
// m named actions and the size limits. Token ids are a pure function of
// (q, m, action names, max_repeat).
class Language {
 public:
  Language(int q, std::vector<std::string> action_names, Limits limits = {});

  int q() const { return q_; }
  int m() const { return static_cast<int>(action_names_.size()); }
  const Limits& limits() const { return limits_; }
  const std::vector<std::string>& action_names() const { return action_names_; }

  int vocab_size() const { return static_cast<int>(vocab_.size()); }
  const std::string& token_text(int id) const;
  // Returns -1 for text outside the vocabulary.
  int token_id(std::string_view text) const;

  int action_token(int action) const;
  int percept_token(int percept) const;
  int integer_token(int value) const;

  // Throws SyntaxError, or LimitError when a bound is exceeded.
  Program parse(std::string_view source) const;
  // As parse, with the statement cap replaced (used inside alias closures).
  Program parse(std::string_view source, int max_stmts) const;
  std::string pretty_print(const Program& program) const;

  std::vector<int> to_tokens(const Program& program) const;
  // Throws DecodeError when the sequence is not a grammatical program.
  Program from_tokens(const std::vector<int>& tokens) const;
  Program from_tokens(const std::vector<int>& tokens, int max_stmts) const;

  // Throws LimitError if the program violates a bound (statement cap
  // overridable).
  void check_limits(const Program& program, int max_stmts) const;
  void check_limits(const Program& program) const {
    check_limits(program, limits_.max_stmts);
  }

 private:
  int q_;
  std::vector<std::string> action_names_;
  Limits limits_;
  std::vector<std::string> vocab_;
  int first_action_ = 0;
  int first_percept_ = 0;
  int first_integer_ = 0;
};

// Fixed keyword ids, shared by every Language instance.
namespace tok {
inline constexpr int kDef = 3, kRun = 4, kLBrace = 5, kRBrace = 6, kLParen = 7,
                     kRParen = 8, kComma = 9, kRepeat = 10, kWhile = 11, kIf = 12,
                     kElse = 13, kNot = 14, kAnd = 15, kOr = 16;
inline constexpr int kFirstDynamic = 17;
}  // namespace tok

}  // namespace demosynth::dsl
