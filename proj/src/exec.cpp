#include "demosynth/exec.hpp"

#include <algorithm>

#include "demosynth/error.hpp"
#include "demosynth/rng.hpp"

namespace demosynth::exec {

namespace {

using dsl::Block;
using dsl::Cond;
using dsl::Statement;
using dsl::StmtKind;

constexpr std::uint64_t kEpisodeStream = 0x45504953;  // "EPIS"

bool eval_cond(const Cond& c, const world::PerceptVector& p) {
  switch (c.kind) {
    case Cond::Kind::Percept:
      return p[c.percept];
    case Cond::Kind::Not:
      return !eval_cond(c.args[0], p);
    case Cond::Kind::And:
      return eval_cond(c.args[0], p) && eval_cond(c.args[1], p);
    case Cond::Kind::Or:
      return eval_cond(c.args[0], p) || eval_cond(c.args[1], p);
  }
  return false;
}

int subtree_size(const Statement& s) {
  return 1 + dsl::statement_count(s.body) + dsl::statement_count(s.else_body);
}

enum class Event : std::uint8_t { Executed, True, False };

struct Interpreter {
  const world::WorldConfig& config;
  world::WorldState state;
  int budget;
  Demonstration demo;
  // Optional instrumentation: (statement id, event, actions emitted so far).
  struct Record {
    int id;
    Event event;
    int emitted;
  };
  std::vector<Record>* records = nullptr;

  int emitted() const { return static_cast<int>(demo.steps.size()); }

  void note(int id, Event e) {
    if (records) records->push_back({id, e, emitted()});
  }

  // Returns false once the budget is exhausted.
  bool run_block(const Block& block, int first_id) {
    int id = first_id;
    for (const Statement& s : block) {
      if (!run_statement(s, id)) return false;
      id += subtree_size(s);
    }
    return true;
  }

  bool run_statement(const Statement& s, int id) {
    if (emitted() >= budget) return false;
    note(id, Event::Executed);
    switch (s.kind) {
      case StmtKind::Action: {
        demo.steps.push_back({world::perceptions(config, state), s.value});
        state = world::step(config, state, s.value);
        return true;
      }
      case StmtKind::Repeat:
        for (int i = 0; i < s.value; ++i)
          if (!run_block(s.body, id + 1)) return false;
        return true;
      case StmtKind::While:
        for (;;) {
          if (emitted() >= budget) return false;
          if (!eval_cond(s.cond, world::perceptions(config, state))) {
            note(id, Event::False);
            return true;
          }
          note(id, Event::True);
          const int before = emitted();
          if (!run_block(s.body, id + 1)) return false;
          // A body that emits nothing would spin forever on an unchanged state.
          if (emitted() == before) {
            demo.terminated = Termination::StepBudgetExceeded;
            return false;
          }
        }
      case StmtKind::If:
      case StmtKind::IfElse: {
        const bool taken = eval_cond(s.cond, world::perceptions(config, state));
        note(id, taken ? Event::True : Event::False);
        if (taken) return run_block(s.body, id + 1);
        if (s.kind == StmtKind::IfElse)
          return run_block(s.else_body, id + 1 + dsl::statement_count(s.body));
        return true;
      }
    }
    return true;
  }
};

void preorder_kinds(const Block& block, std::vector<StmtCoverage>& out) {
  for (const Statement& s : block) {
    out.push_back({s.kind, false, false, false});
    preorder_kinds(s.body, out);
    preorder_kinds(s.else_body, out);
  }
}

CoverageReport empty_report(const dsl::Program& program) {
  CoverageReport r;
  preorder_kinds(program.body, r.statements);
  r.complete = false;
  return r;
}

void refresh_complete(CoverageReport& r) {
  r.complete = !r.statements.empty() &&
               std::all_of(r.statements.begin(), r.statements.end(),
                           [](const StmtCoverage& s) { return s.complete(); });
}

// Coverage of one stored demonstration.
CoverageReport replay_coverage(const dsl::Program& program, const world::WorldConfig& config,
                               const Demonstration& demo, const ExecOptions& options) {
  CoverageReport r = empty_report(program);
  std::vector<Interpreter::Record> records;
  Interpreter it{config, world::init(config, demo.episode_seed), options.step_budget, {}, &records};
  it.demo.terminated = Termination::Completed;
  if (!it.run_block(program.body, 0)) it.demo.terminated = Termination::StepBudgetExceeded;

  const int stored = static_cast<int>(demo.steps.size());
  const bool whole = demo.terminated == Termination::Completed;
  for (const auto& rec : records) {
    if (!whole && rec.emitted >= stored) continue;
    StmtCoverage& sc = r.statements[static_cast<std::size_t>(rec.id)];
    switch (rec.event) {
      case Event::Executed:
        sc.executed = true;
        break;
      case Event::True:
        sc.seen_true = true;
        break;
      case Event::False:
        sc.seen_false = true;
        break;
    }
  }
  refresh_complete(r);
  return r;
}

}  // namespace

bool CoverageReport::merge(const CoverageReport& other) {
  if (statements.size() != other.statements.size())
    throw RangeError("coverage reports for different programs");
  bool changed = false;
  for (std::size_t i = 0; i < statements.size(); ++i) {
    StmtCoverage& a = statements[i];
    const StmtCoverage& b = other.statements[i];
    changed |= (!a.executed && b.executed) || (!a.seen_true && b.seen_true) ||
               (!a.seen_false && b.seen_false);
    a.executed |= b.executed;
    a.seen_true |= b.seen_true;
    a.seen_false |= b.seen_false;
  }
  refresh_complete(*this);
  return changed;
}

Demonstration run_program(const dsl::Program& program, const world::WorldConfig& config,
                          const world::WorldState& initial, int step_budget) {
  if (step_budget < 1) throw RangeError("step_budget must be >= 1");
  Interpreter it{config, initial, step_budget, {}, nullptr};
  it.demo.terminated = Termination::Completed;
  if (!it.run_block(program.body, 0)) it.demo.terminated = Termination::StepBudgetExceeded;
  return std::move(it.demo);
}

Demonstration truncate(Demonstration demo, int t_max) {
  if (static_cast<int>(demo.steps.size()) > t_max) {
    demo.steps.resize(static_cast<std::size_t>(t_max));
    demo.terminated = Termination::StepBudgetExceeded;
  }
  return demo;
}

CoverageReport coverage_of(const dsl::Program& program, const world::WorldConfig& config,
                           const std::vector<Demonstration>& demos, const ExecOptions& options) {
  CoverageReport total = empty_report(program);
  for (const Demonstration& d : demos) total.merge(replay_coverage(program, config, d, options));
  refresh_complete(total);
  return total;
}

std::uint64_t episode_seed(const world::WorldConfig& config, int attempt) {
  return counter_hash({config.seed, kEpisodeStream, static_cast<std::uint64_t>(attempt)});
}

std::variant<DemoSet, Unsatisfiable> generate_demo_set(const dsl::Program& program,
                                                       const world::WorldConfig& config, int k,
                                                       int attempt_budget,
                                                       const ExecOptions& options) {
  if (k < 1) throw RangeError("k must be >= 1");
  struct Drawn {
    int attempt;
    Demonstration demo;
  };
  std::vector<Drawn> useful;
  std::vector<Drawn> filler;
  CoverageReport total = empty_report(program);
  int attempt = 0;
  for (; attempt < attempt_budget; ++attempt) {
    if (total.complete && static_cast<int>(useful.size() + filler.size()) >= k) break;
    const std::uint64_t seed = episode_seed(config, attempt);
    Demonstration demo =
        run_program(program, config, world::init(config, seed), options.step_budget);
    demo.episode_seed = seed;
    demo = truncate(std::move(demo), options.t_max);
    if (demo.steps.empty()) continue;
    const bool added = total.merge(replay_coverage(program, config, demo, options));
    (added ? useful : filler).push_back({attempt, std::move(demo)});
  }
  if (!total.complete || static_cast<int>(useful.size()) > k ||
      static_cast<int>(useful.size() + filler.size()) < k) {
    return Unsatisfiable{attempt, std::move(total)};
  }
  std::vector<Drawn> chosen = std::move(useful);
  for (Drawn& d : filler) {
    if (static_cast<int>(chosen.size()) == k) break;
    chosen.push_back(std::move(d));
  }
  std::sort(chosen.begin(), chosen.end(),
            [](const Drawn& a, const Drawn& b) { return a.attempt < b.attempt; });
  DemoSet set;
  set.program = program;
  for (Drawn& d : chosen) set.demos.push_back(std::move(d.demo));
  set.coverage = coverage_of(program, config, set.demos, options);
  return set;
}

}  // namespace demosynth::exec
