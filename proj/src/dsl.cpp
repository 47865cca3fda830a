#include "demosynth/dsl.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <optional>

#include "demosynth/error.hpp"

namespace demosynth::dsl {

int depth(const Cond& cond) {
  int d = 0;
  for (const Cond& a : cond.args) d = std::max(d, depth(a));
  return d + 1;
}

int depth(const Block& block) {
  int d = 0;
  for (const Statement& s : block) {
    int inner = 0;
    if (s.kind != StmtKind::Action) inner = std::max(depth(s.body), depth(s.else_body));
    d = std::max(d, inner + 1);
  }
  return d;
}

int statement_count(const Block& block) {
  int n = 0;
  for (const Statement& s : block) {
    n += 1 + statement_count(s.body) + statement_count(s.else_body);
  }
  return n;
}

namespace {

const char* const kFixedVocab[] = {"<pad>",  "<bos>", "<eos>", "DEF",  "run", "{",
                                   "}",      "(",     ")",     ",",    "REPEAT",
                                   "WHILE",  "IF",    "ELSE",  "NOT",  "AND",
                                   "OR"};

// One lexical unit, either from source text or from a token-id sequence.
struct Lexeme {
  int id = -1;             // vocabulary id, -1 for end of input / unknown
  std::optional<int> num;  // integer literal value (may be out of vocab range)
  std::size_t pos = 0;
  std::string text;
};

class Parser {
 public:
  Parser(const Language& lang, std::vector<Lexeme> lexemes, int max_stmts)
      : lang_(lang), lex_(std::move(lexemes)), max_stmts_(max_stmts) {}

  Program parse_program() {
    expect(tok::kDef);
    expect(tok::kRun);
    Program p;
    p.body = parse_block(1);
    if (peek().id != -1 || peek().num) fail({"<end>"});
    lang_.check_limits(p, max_stmts_);
    return p;
  }

 private:
  const Lexeme& peek() const { return lex_[std::min(at_, lex_.size() - 1)]; }

  [[noreturn]] void fail(const std::vector<std::string>& expected) const {
    std::string joined;
    for (std::size_t i = 0; i < expected.size(); ++i) {
      if (i) joined += ", ";
      joined += expected[i];
    }
    const Lexeme& l = peek();
    throw SyntaxError(l.pos, l.text.empty() ? "<end>" : l.text, joined);
  }

  void expect(int id) {
    if (peek().id != id) fail({lang_.token_text(id)});
    ++at_;
  }

  bool is_action(int id) const {
    for (int a = 0; a < lang_.m(); ++a)
      if (lang_.action_token(a) == id) return true;
    return false;
  }

  Block parse_block(int level) {
    if (level > lang_.limits().max_nest)
      throw LimitError("nesting exceeds max_nest=" + std::to_string(lang_.limits().max_nest));
    expect(tok::kLBrace);
    Block body;
    do body.push_back(parse_statement(level));
    while (peek().id != tok::kRBrace);
    expect(tok::kRBrace);
    return body;
  }

  Statement parse_statement(int level) {
    const Lexeme& l = peek();
    if (is_action(l.id)) {
      ++at_;
      for (int a = 0; a < lang_.m(); ++a)
        if (lang_.action_token(a) == l.id) return Statement::action(a);
    }
    switch (l.id) {
      case tok::kRepeat: {
        ++at_;
        const Lexeme& n = peek();
        if (!n.num) fail({"INT"});
        ++at_;
        if (*n.num < 1 || *n.num > lang_.limits().max_repeat)
          throw LimitError("repeat count " + std::to_string(*n.num) + " outside [1, " +
                           std::to_string(lang_.limits().max_repeat) + "]");
        return Statement::repeat(*n.num, parse_block(level + 1));
      }
      case tok::kWhile: {
        ++at_;
        Cond c = parse_paren_cond();
        return Statement::loop_while(std::move(c), parse_block(level + 1));
      }
      case tok::kIf: {
        ++at_;
        Cond c = parse_paren_cond();
        Block then_body = parse_block(level + 1);
        if (peek().id == tok::kElse) {
          ++at_;
          return Statement::if_else(std::move(c), std::move(then_body), parse_block(level + 1));
        }
        return Statement::if_then(std::move(c), std::move(then_body));
      }
      default:
        break;
    }
    fail({"ACTION", "REPEAT", "WHILE", "IF"});
  }

  Cond parse_paren_cond() {
    expect(tok::kLParen);
    Cond c = parse_cond(1);
    expect(tok::kRParen);
    return c;
  }

  Cond parse_cond(int level) {
    if (level > lang_.limits().max_nest)
      throw LimitError("condition nesting exceeds max_nest=" +
                       std::to_string(lang_.limits().max_nest));
    const Lexeme& l = peek();
    for (int p = 0; p < lang_.q(); ++p) {
      if (lang_.percept_token(p) == l.id) {
        ++at_;
        return Cond::percept_ref(p);
      }
    }
    if (l.id == tok::kNot) {
      ++at_;
      expect(tok::kLParen);
      Cond inner = parse_cond(level + 1);
      expect(tok::kRParen);
      return Cond::negate(std::move(inner));
    }
    if (l.id == tok::kAnd || l.id == tok::kOr) {
      const bool is_and = l.id == tok::kAnd;
      ++at_;
      expect(tok::kLParen);
      Cond a = parse_cond(level + 1);
      expect(tok::kComma);
      Cond b = parse_cond(level + 1);
      expect(tok::kRParen);
      return is_and ? Cond::both(std::move(a), std::move(b))
                    : Cond::either(std::move(a), std::move(b));
    }
    fail({"PERCEPT", "NOT", "AND", "OR"});
  }

  const Language& lang_;
  std::vector<Lexeme> lex_;
  std::size_t at_ = 0;
  int max_stmts_;
};

std::vector<Lexeme> lex_source(const Language& lang, std::string_view src) {
  std::vector<Lexeme> out;
  std::size_t i = 0;
  while (i < src.size()) {
    const unsigned char c = static_cast<unsigned char>(src[i]);
    if (std::isspace(c)) {
      ++i;
      continue;
    }
    Lexeme l;
    l.pos = i;
    if (std::isalpha(c) || c == '_') {
      std::size_t j = i;
      while (j < src.size() &&
             (std::isalnum(static_cast<unsigned char>(src[j])) || src[j] == '_'))
        ++j;
      l.text = std::string(src.substr(i, j - i));
      i = j;
    } else if (std::isdigit(c)) {
      std::size_t j = i;
      while (j < src.size() && std::isdigit(static_cast<unsigned char>(src[j]))) ++j;
      l.text = std::string(src.substr(i, j - i));
      int value = 0;
      auto [ptr, ec] = std::from_chars(src.data() + i, src.data() + j, value);
      if (ec != std::errc{}) value = lang.limits().max_repeat + 1;
      l.num = value;
      i = j;
    } else {
      l.text = std::string(1, src[i]);
      ++i;
    }
    if (!l.num) {
      l.id = lang.token_id(l.text);
      // Reserved markers are not legal in source text.
      if (l.id >= 0 && l.id <= kEos) l.id = -2;
      if (l.id == -1) l.id = -2;
      // Integer tokens are only produced by the digit branch.
    } else if (*l.num >= 1 && *l.num <= lang.limits().max_repeat) {
      l.id = lang.integer_token(*l.num);
    } else {
      l.id = -2;
    }
    out.push_back(std::move(l));
  }
  Lexeme end;
  end.pos = src.size();
  out.push_back(end);
  return out;
}

void emit_cond(const Language& lang, const Cond& c, std::vector<int>& out) {
  switch (c.kind) {
    case Cond::Kind::Percept:
      out.push_back(lang.percept_token(c.percept));
      return;
    case Cond::Kind::Not:
      out.insert(out.end(), {tok::kNot, tok::kLParen});
      emit_cond(lang, c.args[0], out);
      out.push_back(tok::kRParen);
      return;
    case Cond::Kind::And:
    case Cond::Kind::Or:
      out.push_back(c.kind == Cond::Kind::And ? tok::kAnd : tok::kOr);
      out.push_back(tok::kLParen);
      emit_cond(lang, c.args[0], out);
      out.push_back(tok::kComma);
      emit_cond(lang, c.args[1], out);
      out.push_back(tok::kRParen);
      return;
  }
}

void emit_block(const Language& lang, const Block& block, std::vector<int>& out) {
  out.push_back(tok::kLBrace);
  for (const Statement& s : block) {
    switch (s.kind) {
      case StmtKind::Action:
        out.push_back(lang.action_token(s.value));
        break;
      case StmtKind::Repeat:
        out.push_back(tok::kRepeat);
        out.push_back(lang.integer_token(s.value));
        emit_block(lang, s.body, out);
        break;
      case StmtKind::While:
      case StmtKind::If:
      case StmtKind::IfElse:
        out.push_back(s.kind == StmtKind::While ? tok::kWhile : tok::kIf);
        out.push_back(tok::kLParen);
        emit_cond(lang, s.cond, out);
        out.push_back(tok::kRParen);
        emit_block(lang, s.body, out);
        if (s.kind == StmtKind::IfElse) {
          out.push_back(tok::kElse);
          emit_block(lang, s.else_body, out);
        }
        break;
    }
  }
  out.push_back(tok::kRBrace);
}

std::string cond_text(const Language& lang, const Cond& c) {
  switch (c.kind) {
    case Cond::Kind::Percept:
      return lang.token_text(lang.percept_token(c.percept));
    case Cond::Kind::Not:
      return "NOT(" + cond_text(lang, c.args[0]) + ")";
    case Cond::Kind::And:
      return "AND(" + cond_text(lang, c.args[0]) + ", " + cond_text(lang, c.args[1]) + ")";
    case Cond::Kind::Or:
      return "OR(" + cond_text(lang, c.args[0]) + ", " + cond_text(lang, c.args[1]) + ")";
  }
  return {};
}

void block_text(const Language& lang, const Block& block, std::string& out) {
  out += "{";
  for (const Statement& s : block) {
    out += ' ';
    switch (s.kind) {
      case StmtKind::Action:
        out += lang.action_names()[static_cast<std::size_t>(s.value)];
        break;
      case StmtKind::Repeat:
        out += "REPEAT " + std::to_string(s.value) + " ";
        block_text(lang, s.body, out);
        break;
      case StmtKind::While:
      case StmtKind::If:
      case StmtKind::IfElse:
        out += s.kind == StmtKind::While ? "WHILE (" : "IF (";
        out += cond_text(lang, s.cond);
        out += ") ";
        block_text(lang, s.body, out);
        if (s.kind == StmtKind::IfElse) {
          out += " ELSE ";
          block_text(lang, s.else_body, out);
        }
        break;
    }
  }
  out += " }";
}

void check_cond(const Language& lang, const Cond& c) {
  const bool arity_ok =
      (c.kind == Cond::Kind::Percept && c.args.empty()) ||
      (c.kind == Cond::Kind::Not && c.args.size() == 1) ||
      ((c.kind == Cond::Kind::And || c.kind == Cond::Kind::Or) && c.args.size() == 2);
  if (!arity_ok) throw LimitError("malformed condition arity");
  if (c.kind == Cond::Kind::Percept && (c.percept < 0 || c.percept >= lang.q()))
    throw LimitError("percept index " + std::to_string(c.percept) + " out of range");
  for (const Cond& a : c.args) check_cond(lang, a);
}

void check_block(const Language& lang, const Block& block) {
  if (block.empty()) throw LimitError("empty statement body");
  for (const Statement& s : block) {
    switch (s.kind) {
      case StmtKind::Action:
        if (s.value < 0 || s.value >= lang.m())
          throw LimitError("action index " + std::to_string(s.value) + " out of range");
        if (!s.body.empty() || !s.else_body.empty()) throw LimitError("action with body");
        break;
      case StmtKind::Repeat:
        if (s.value < 1 || s.value > lang.limits().max_repeat)
          throw LimitError("repeat count " + std::to_string(s.value) + " out of range");
        check_block(lang, s.body);
        break;
      case StmtKind::While:
      case StmtKind::If:
        check_cond(lang, s.cond);
        check_block(lang, s.body);
        if (!s.else_body.empty()) throw LimitError("else body on non-else statement");
        break;
      case StmtKind::IfElse:
        check_cond(lang, s.cond);
        check_block(lang, s.body);
        check_block(lang, s.else_body);
        break;
    }
  }
}

void check_cond_depths(const Block& block, int max_nest) {
  for (const Statement& s : block) {
    if (s.kind != StmtKind::Action && s.kind != StmtKind::Repeat && depth(s.cond) > max_nest)
      throw LimitError("condition nesting exceeds max_nest");
    check_cond_depths(s.body, max_nest);
    check_cond_depths(s.else_body, max_nest);
  }
}

}  // namespace

Language::Language(int q, std::vector<std::string> action_names, Limits limits)
    : q_(q), action_names_(std::move(action_names)), limits_(limits) {
  if (q_ < 1) throw ConfigError("language needs q >= 1");
  if (action_names_.size() < 2) throw ConfigError("language needs m >= 2");
  if (limits_.max_nest < 1 || limits_.max_stmts < 1 || limits_.max_repeat < 1)
    throw ConfigError("DSL limits must be positive");
  vocab_.assign(std::begin(kFixedVocab), std::end(kFixedVocab));
  first_action_ = static_cast<int>(vocab_.size());
  for (const std::string& a : action_names_) {
    if (a.empty() || token_id(a) != -1) throw ConfigError("bad or duplicate action name '" + a + "'");
    vocab_.push_back(a);
  }
  first_percept_ = static_cast<int>(vocab_.size());
  for (int p = 0; p < q_; ++p) {
    std::string name = "P" + std::to_string(p);
    if (token_id(name) != -1) throw ConfigError("action name collides with percept " + name);
    vocab_.push_back(std::move(name));
  }
  first_integer_ = static_cast<int>(vocab_.size());
  for (int v = 1; v <= limits_.max_repeat; ++v) vocab_.push_back(std::to_string(v));
}

const std::string& Language::token_text(int id) const {
  if (id < 0 || id >= vocab_size()) throw RangeError("program token id out of range");
  return vocab_[static_cast<std::size_t>(id)];
}

int Language::token_id(std::string_view text) const {
  for (std::size_t i = 0; i < vocab_.size(); ++i)
    if (vocab_[i] == text) return static_cast<int>(i);
  return -1;
}

int Language::action_token(int action) const { return first_action_ + action; }
int Language::percept_token(int percept) const { return first_percept_ + percept; }
int Language::integer_token(int value) const { return first_integer_ + value - 1; }

Program Language::parse(std::string_view source) const {
  return parse(source, limits_.max_stmts);
}

Program Language::parse(std::string_view source, int max_stmts) const {
  Parser p(*this, lex_source(*this, source), max_stmts);
  return p.parse_program();
}

std::string Language::pretty_print(const Program& program) const {
  std::string out = "DEF run ";
  block_text(*this, program.body, out);
  return out;
}

std::vector<int> Language::to_tokens(const Program& program) const {
  std::vector<int> out{kBos, tok::kDef, tok::kRun};
  emit_block(*this, program.body, out);
  out.push_back(kEos);
  return out;
}

Program Language::from_tokens(const std::vector<int>& tokens) const {
  return from_tokens(tokens, limits_.max_stmts);
}

Program Language::from_tokens(const std::vector<int>& tokens, int max_stmts) const {
  if (tokens.size() < 2 || tokens.front() != kBos || tokens.back() != kEos)
    throw DecodeError("token sequence must be framed by <bos> ... <eos>");
  std::vector<Lexeme> lex;
  lex.reserve(tokens.size());
  for (std::size_t i = 1; i + 1 < tokens.size(); ++i) {
    const int id = tokens[i];
    if (id <= kEos || id >= vocab_size())
      throw DecodeError("unexpected token id " + std::to_string(id) + " at " + std::to_string(i));
    Lexeme l;
    l.id = id;
    l.pos = i;
    l.text = vocab_[static_cast<std::size_t>(id)];
    if (id >= first_integer_) l.num = id - first_integer_ + 1;
    lex.push_back(std::move(l));
  }
  Lexeme end;
  end.pos = tokens.size() - 1;
  lex.push_back(end);
  try {
    Parser p(*this, std::move(lex), max_stmts);
    return p.parse_program();
  } catch (const SyntaxError& e) {
    throw DecodeError(e.what());
  } catch (const LimitError& e) {
    throw DecodeError(e.what());
  }
}

void Language::check_limits(const Program& program, int max_stmts) const {
  check_block(*this, program.body);
  if (depth(program.body) > limits_.max_nest)
    throw LimitError("nesting depth " + std::to_string(depth(program.body)) +
                     " exceeds max_nest=" + std::to_string(limits_.max_nest));
  check_cond_depths(program.body, limits_.max_nest);
  const int n = statement_count(program.body);
  if (n > max_stmts)
    throw LimitError("statement count " + std::to_string(n) + " exceeds " +
                     std::to_string(max_stmts));
}

}  // namespace demosynth::dsl
