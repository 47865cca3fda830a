#include "demosynth/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <deque>
#include <thread>

#include "demosynth/error.hpp"
#include "demosynth/exec.hpp"
#include "demosynth/rng.hpp"

namespace demosynth::eval {

using dsl::Block;
using dsl::Cond;
using dsl::Program;
using dsl::Statement;
using dsl::StmtKind;
using nlohmann::json;

namespace {

constexpr std::uint64_t kBehaviorStream = 0x42454856;  // "BEHV"

std::vector<Cond> cond_neighbors(const Cond& c, const AliasRules& rules) {
  std::vector<Cond> out;
  if (rules.r4 && c.kind == Cond::Kind::Not && c.args[0].kind == Cond::Kind::Not)
    out.push_back(c.args[0].args[0]);
  if (rules.commute && (c.kind == Cond::Kind::And || c.kind == Cond::Kind::Or))
    out.push_back(Cond{c.kind, 0, {c.args[1], c.args[0]}});
  for (std::size_t a = 0; a < c.args.size(); ++a) {
    for (Cond& sub : cond_neighbors(c.args[a], rules)) {
      Cond copy = c;
      copy.args[a] = std::move(sub);
      out.push_back(std::move(copy));
    }
  }
  return out;
}

std::vector<Block> block_neighbors(const Block& b, const AliasRules& rules, int max_repeat);

// Rewrites of a single statement that yield a single statement.
std::vector<Statement> stmt_neighbors(const Statement& s, const AliasRules& rules, int max_repeat) {
  std::vector<Statement> out;
  if (s.kind == StmtKind::IfElse && rules.r1)
    out.push_back(Statement::if_else(Cond::negate(s.cond), s.else_body, s.body));
  if (s.kind == StmtKind::Repeat && rules.r3) {
    // REPEAT a { REPEAT b {S} } -> REPEAT a*b {S}
    if (s.body.size() == 1 && s.body[0].kind == StmtKind::Repeat &&
        s.value * s.body[0].value <= max_repeat)
      out.push_back(Statement::repeat(s.value * s.body[0].value, s.body[0].body));
    // REPEAT a*b {S} -> REPEAT a { REPEAT b {S} }
    for (int a = 2; a * 2 <= s.value; ++a)
      if (s.value % a == 0)
        out.push_back(Statement::repeat(a, {Statement::repeat(s.value / a, s.body)}));
  }
  if (s.kind == StmtKind::While || s.kind == StmtKind::If || s.kind == StmtKind::IfElse) {
    for (Cond& c : cond_neighbors(s.cond, rules)) {
      Statement copy = s;
      copy.cond = std::move(c);
      out.push_back(std::move(copy));
    }
  }
  if (s.kind != StmtKind::Action) {
    for (Block& nb : block_neighbors(s.body, rules, max_repeat)) {
      Statement copy = s;
      copy.body = std::move(nb);
      out.push_back(std::move(copy));
    }
  }
  if (s.kind == StmtKind::IfElse) {
    for (Block& nb : block_neighbors(s.else_body, rules, max_repeat)) {
      Statement copy = s;
      copy.else_body = std::move(nb);
      out.push_back(std::move(copy));
    }
  }
  return out;
}

Block splice(const Block& b, std::size_t at, std::size_t count, const Block& replacement) {
  Block out(b.begin(), b.begin() + static_cast<std::ptrdiff_t>(at));
  out.insert(out.end(), replacement.begin(), replacement.end());
  out.insert(out.end(), b.begin() + static_cast<std::ptrdiff_t>(at + count), b.end());
  return out;
}

std::vector<Block> block_neighbors(const Block& b, const AliasRules& rules, int max_repeat) {
  std::vector<Block> out;
  for (std::size_t i = 0; i < b.size(); ++i) {
    const Statement& s = b[i];
    if (s.kind == StmtKind::Repeat) {
      if (rules.r2 && s.value >= 2) {
        Block unrolled;
        for (int r = 0; r < s.value; ++r) unrolled.insert(unrolled.end(), s.body.begin(), s.body.end());
        out.push_back(splice(b, i, 1, unrolled));
      }
      if (rules.r3 && s.value == 1) out.push_back(splice(b, i, 1, s.body));
    }
    for (Statement& ns : stmt_neighbors(s, rules, max_repeat)) {
      Block copy = b;
      copy[i] = std::move(ns);
      out.push_back(std::move(copy));
    }
  }
  // R2 backwards: j >= 2 consecutive copies of a segment become a REPEAT.
  if (rules.r2) {
    for (std::size_t i = 0; i < b.size(); ++i) {
      for (std::size_t len = 1; i + 2 * len <= b.size(); ++len) {
        int copies = 1;
        while (copies < max_repeat && i + (copies + 1) * len <= b.size() &&
               std::equal(b.begin() + static_cast<std::ptrdiff_t>(i),
                          b.begin() + static_cast<std::ptrdiff_t>(i + len),
                          b.begin() + static_cast<std::ptrdiff_t>(i + copies * len))) {
          ++copies;
          const Block segment(b.begin() + static_cast<std::ptrdiff_t>(i),
                              b.begin() + static_cast<std::ptrdiff_t>(i + len));
          out.push_back(splice(b, i, copies * len, {Statement::repeat(copies, segment)}));
        }
      }
    }
  }
  return out;
}

int raised_cap(const dsl::Language& lang) {
  return lang.limits().max_stmts * lang.limits().max_repeat;
}

bool within_limits(const Program& p, const dsl::Language& lang) {
  try {
    lang.check_limits(p, raised_cap(lang));
    return true;
  } catch (const LimitError&) {
    return false;
  }
}

std::vector<int> strip(const std::vector<int>& t) {
  std::vector<int> out;
  for (int v : t)
    if (v != dsl::kBos && v != dsl::kEos && v != dsl::kPad) out.push_back(v);
  return out;
}

// Forward closure to `depth` levels; returns false if it exceeds `cap`.
bool bounded_closure(const Program& p, const dsl::Language& lang, const AliasRules& rules,
                     int depth, std::size_t cap, std::set<std::vector<int>>& members) {
  members.insert(lang.to_tokens(p));
  std::vector<Program> frontier{p};
  for (int level = 0; level < depth && !frontier.empty(); ++level) {
    std::vector<Program> next;
    for (const Program& cur : frontier) {
      for (Program& n : rewrite_neighbors(cur, lang, rules)) {
        if (members.insert(lang.to_tokens(n)).second) {
          if (members.size() > cap) return false;
          next.push_back(std::move(n));
        }
      }
    }
    frontier = std::move(next);
  }
  return true;
}

std::string format_tokens(const std::vector<int>& t) {
  std::string s = "[";
  for (std::size_t i = 0; i < t.size(); ++i) s += (i ? "," : "") + std::to_string(t[i]);
  return s + "]";
}

}  // namespace

bool exact_match(const std::vector<int>& pred, const std::vector<int>& truth) {
  return strip(pred) == strip(truth);
}

std::vector<Program> rewrite_neighbors(const Program& p, const dsl::Language& lang,
                                       const AliasRules& rules) {
  std::vector<Program> out;
  for (Block& b : block_neighbors(p.body, rules, lang.limits().max_repeat)) {
    Program n{std::move(b)};
    if (within_limits(n, lang)) out.push_back(std::move(n));
  }
  return out;
}

std::set<std::vector<int>> alias_closure(const Program& p, const dsl::Language& lang,
                                         const AliasRules& rules) {
  std::set<std::vector<int>> members;
  if (!bounded_closure(p, lang, rules, rules.depth, static_cast<std::size_t>(rules.cap), members))
    throw ClosureOverflow("alias closure exceeds " + std::to_string(rules.cap) + " programs");
  return members;
}

AliasVerdict alias_match(const std::vector<int>& pred, const Program& truth,
                         const dsl::Language& lang, const AliasRules& rules) {
  AliasVerdict v;
  Program parsed;
  try {
    parsed = lang.from_tokens(pred, raised_cap(lang));
  } catch (const Error&) {
    return v;
  }
  v.parsed = true;
  const std::vector<int> canonical = lang.to_tokens(parsed);
  const std::vector<int> truth_tokens = lang.to_tokens(truth);
  v.exact = exact_match(canonical, truth_tokens);
  if (v.exact) {
    v.alias = true;
    return v;
  }
  try {
    v.alias = alias_closure(truth, lang, rules).count(canonical) > 0;
  } catch (const ClosureOverflow&) {
    // Meet in the middle: forward neighborhoods of both sides, split depth.
    v.overflow = true;
    const std::size_t big = static_cast<std::size_t>(rules.cap) * 10;
    std::set<std::vector<int>> from_truth, from_pred;
    const int dt = (rules.depth + 1) / 2;
    const int dp = rules.depth / 2;
    bounded_closure(truth, lang, rules, dt, big, from_truth);
    bounded_closure(parsed, lang, rules, dp, big, from_pred);
    for (const std::vector<int>& t : from_pred)
      if (from_truth.count(t)) {
        v.alias = true;
        break;
      }
  }
  return v;
}

bool behavioral_eq(const Program& a, const Program& b, const world::WorldConfig& config,
                   int n_trials, int step_budget, std::uint64_t seed) {
  for (int t = 0; t < n_trials; ++t) {
    const world::WorldState s0 =
        world::init(config, counter_hash({seed, kBehaviorStream, static_cast<std::uint64_t>(t)}));
    if (!(exec::run_program(a, config, s0, step_budget) == exec::run_program(b, config, s0, step_budget)))
      return false;
  }
  return true;
}

EvalReport evaluate(const model::Params<float>& params, const std::vector<dataset::Entry>& entries,
                    const dataset::DatasetConfig& config, const EvalOptions& options) {
  const dsl::Language lang = config.language();
  const vislang::Tokenizer tokenizer(config.world.q, config.world.m);
  std::vector<Prediction> preds(entries.size());
  auto run = [&](std::size_t i) {
    const dataset::Entry& e = entries[i];
    vislang::NoiseSpec spec = options.noise;
    spec.seed = counter_hash({options.noise.seed, e.index});
    std::vector<int> src;
    for (const vislang::VisualToken& t :
         tokenizer.assemble(vislang::inject_noise(e.demos, spec, config.world.m)).tokens)
      src.push_back(static_cast<int>(t.id));
    const std::vector<int> out = model::synthesize(params, src, options.decode);
    const Program truth = lang.parse(e.program_text);
    Prediction& p = preds[i];
    p.index = e.index;
    p.verdict = alias_match(out, truth, lang, options.rules);
    if (p.verdict.parsed) {
      const Program parsed = lang.from_tokens(out, raised_cap(lang));
      p.text = lang.pretty_print(parsed);
      if (!p.verdict.alias && options.behavioral_trials > 0)
        p.behavioral = behavioral_eq(parsed, truth, config.world, options.behavioral_trials,
                                     config.exec.step_budget, config.seed);
    } else {
      p.text = format_tokens(out);
    }
  };
  const int jobs = std::max(1, std::min<int>(options.jobs, static_cast<int>(entries.size())));
  if (jobs <= 1) {
    for (std::size_t i = 0; i < entries.size(); ++i) run(i);
  } else {
    std::vector<std::thread> workers;
    for (int w = 0; w < jobs; ++w)
      workers.emplace_back([&, w] {
        for (std::size_t i = static_cast<std::size_t>(w); i < entries.size(); i += static_cast<std::size_t>(jobs)) run(i);
      });
    for (std::thread& t : workers) t.join();
  }
  EvalReport r;
  r.n = entries.size();
  r.epsilon = options.noise.epsilon;
  r.noise_seed = options.noise.seed;
  r.beam_width = options.decode.beam_width;
  for (const Prediction& p : preds) {
    r.exact_count += p.verdict.exact;
    r.alias_count += p.verdict.alias;
    r.parse_failure_count += !p.verdict.parsed;
    r.overflow_count += p.verdict.overflow;
    r.behavioral_only_count += p.behavioral;
  }
  if (options.keep_predictions) r.predictions = std::move(preds);
  return r;
}

std::vector<AblationRow> ablate(const model::Params<float>& params,
                                const std::vector<dataset::Entry>& entries,
                                const dataset::DatasetConfig& config, EvalOptions options,
                                const std::vector<double>& epsilons,
                                const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  std::vector<AblationRow> rows;
  for (double eps : epsilons) {
    AblationRow row;
    row.epsilon = eps;
    for (std::uint64_t seed : seeds) {
      options.noise.epsilon = eps;
      options.noise.seed = seed;
      row.runs.push_back(evaluate(params, entries, config, options));
    }
    double se = 0, sa = 0;
    row.min_exact = row.min_alias = 1.0;
    row.max_exact = row.max_alias = 0.0;
    for (const EvalReport& r : row.runs) {
      se += r.acc_exact();
      sa += r.acc_alias();
      row.min_exact = std::min(row.min_exact, r.acc_exact());
      row.max_exact = std::max(row.max_exact, r.acc_exact());
      row.min_alias = std::min(row.min_alias, r.acc_alias());
      row.max_alias = std::max(row.max_alias, r.acc_alias());
    }
    row.mean_exact = se / static_cast<double>(row.runs.size());
    row.mean_alias = sa / static_cast<double>(row.runs.size());
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string fixed(double value, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, value);
  return buf;
}

json report_to_json(const EvalReport& r) {
  json preds = json::array();
  for (const Prediction& p : r.predictions)
    preds.push_back({{"index", p.index},
                     {"prediction", p.text},
                     {"parsed", p.verdict.parsed},
                     {"exact", p.verdict.exact},
                     {"alias", p.verdict.alias},
                     {"closure_overflow", p.verdict.overflow},
                     {"behavioral", p.behavioral}});
  return json{{"n", r.n},
              {"exact_count", r.exact_count},
              {"alias_count", r.alias_count},
              {"acc_exact", fixed(r.acc_exact())},
              {"acc_alias", fixed(r.acc_alias())},
              {"parse_failure_count", r.parse_failure_count},
              {"closure_overflow_count", r.overflow_count},
              {"behavioral_only_count", r.behavioral_only_count},
              {"epsilon", fixed(r.epsilon)},
              {"noise_seed", r.noise_seed},
              {"beam_width", r.beam_width},
              {"predictions", preds}};
}

json ablation_to_json(const std::vector<AblationRow>& rows) {
  json out = json::array();
  for (const AblationRow& row : rows) {
    json runs = json::array();
    for (const EvalReport& r : row.runs)
      runs.push_back({{"noise_seed", r.noise_seed},
                      {"n", r.n},
                      {"exact_count", r.exact_count},
                      {"alias_count", r.alias_count},
                      {"parse_failure_count", r.parse_failure_count},
                      {"acc_exact", fixed(r.acc_exact())},
                      {"acc_alias", fixed(r.acc_alias())}});
    out.push_back({{"epsilon", fixed(row.epsilon)},
                   {"exact", {{"mean", fixed(row.mean_exact)}, {"min", fixed(row.min_exact)}, {"max", fixed(row.max_exact)}}},
                   {"alias", {{"mean", fixed(row.mean_alias)}, {"min", fixed(row.min_alias)}, {"max", fixed(row.max_alias)}}},
                   {"runs", runs}});
  }
  return out;
}

std::string ablation_to_text(const std::vector<AblationRow>& rows) {
  std::string out = "epsilon  exact mean [min, max]        alias mean [min, max]\n";
  for (const AblationRow& r : rows) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-7s  %6.2f%% [%6.2f%%, %6.2f%%]  %6.2f%% [%6.2f%%, %6.2f%%]\n",
                  fixed(r.epsilon, 2).c_str(), 100 * r.mean_exact, 100 * r.min_exact,
                  100 * r.max_exact, 100 * r.mean_alias, 100 * r.min_alias, 100 * r.max_alias);
    out += buf;
  }
  return out;
}

}  // namespace demosynth::eval
