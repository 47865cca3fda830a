#pragma once

#include <cstdint>
#include <variant>
#include <vector>

#include "demosynth/dsl.hpp"
#include "demosynth/world.hpp"

namespace demosynth::exec {

enum class Termination : std::uint8_t { Completed, StepBudgetExceeded };

struct Step {
  world::PerceptVector percepts;
  int action = 0;
  bool operator==(const Step&) const = default;
};

// One trace: the percepts observed before each action, paired with that action.
struct Demonstration {
  std::uint64_t episode_seed = 0;
  std::vector<Step> steps;
  Termination terminated = Termination::Completed;
  bool operator==(const Demonstration&) const = default;
};

struct ExecOptions {
  // Interpreter actions before a run is cut off.
  int step_budget = 50;
  // Stored demonstrations keep at most this many steps.
  int t_max = 20;

  bool operator==(const ExecOptions&) const = default;
};

// Per statement, in preorder (statement ids are preorder positions).
struct StmtCoverage {
  dsl::StmtKind kind = dsl::StmtKind::Action;
  bool executed = false;
  // If / IfElse: condition seen true / false. While: loop entered / exited.
  bool seen_true = false;
  bool seen_false = false;

  bool complete() const {
    switch (kind) {
      case dsl::StmtKind::Action:
      case dsl::StmtKind::Repeat:
        return executed;
      default:
        return executed && seen_true && seen_false;
    }
  }
  bool operator==(const StmtCoverage&) const = default;
};

struct CoverageReport {
  std::vector<StmtCoverage> statements;
  bool complete = false;

  // Ors other into this; returns true if any flag was newly set.
  bool merge(const CoverageReport& other);
  bool operator==(const CoverageReport&) const = default;
};

struct DemoSet {
  dsl::Program program;
  std::vector<Demonstration> demos;
  CoverageReport coverage;
};

struct Unsatisfiable {
  int attempts = 0;
  CoverageReport partial;
};

// Runs the program from `initial` until it finishes or `step_budget` actions
// have been emitted. The trace is not truncated.
Demonstration run_program(const dsl::Program& program, const world::WorldConfig& config,
                          const world::WorldState& initial, int step_budget);

// Cuts a trace to its first t_max steps; a cut trace is marked
// StepBudgetExceeded.
Demonstration truncate(Demonstration demo, int t_max);

// Replays each stored demonstration from its episode seed with instrumentation.
// Only control flow observable inside the stored prefix counts.
CoverageReport coverage_of(const dsl::Program& program, const world::WorldConfig& config,
                           const std::vector<Demonstration>& demos,
                           const ExecOptions& options = {});

// Episode seeds are counter_hash(config.seed, attempt); see generate_demo_set.
std::uint64_t episode_seed(const world::WorldConfig& config, int attempt);

// Draws episodes until the accumulated coverage is complete and k demos are
// available, or attempt_budget episodes have been tried.
std::variant<DemoSet, Unsatisfiable> generate_demo_set(const dsl::Program& program,
                                                       const world::WorldConfig& config, int k,
                                                       int attempt_budget = 200,
                                                       const ExecOptions& options = {});

}  // namespace demosynth::exec
