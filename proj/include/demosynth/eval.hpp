#pragma once

// Exact and aliased program accuracy. Aliases are programs reachable from the
// ground truth by behavior-preserving rewrites:
//   R1  IF (c) {A} ELSE {B}  <->  IF (NOT(c)) {B} ELSE {A}
//   R2  REPEAT n {S}  <->  S S ... S (n copies, spliced into the block)
//   R3  REPEAT 1 {S} -> S;  REPEAT a { REPEAT b {S} } <-> REPEAT a*b {S}
//   R4  NOT(NOT(c)) -> c
//   optional: AND/OR argument swap

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "demosynth/dataset.hpp"
#include "demosynth/dsl.hpp"
#include "demosynth/model.hpp"
#include "demosynth/vislang.hpp"
#include "demosynth/world.hpp"

namespace demosynth::eval {

struct AliasRules {
  bool r1 = true;
  bool r2 = true;
  bool r3 = true;
  bool r4 = true;
  bool commute = false;
  int depth = 3;      // rewrite applications from the original
  int cap = 10000;    // closure size cap
};

// Token equality after dropping <bos>, <eos> and <pad>.
bool exact_match(const std::vector<int>& pred, const std::vector<int>& truth);

// All programs one rewrite away from `p` that still satisfy the language
// limits, with the statement cap raised to max_stmts * max_repeat.
std::vector<dsl::Program> rewrite_neighbors(const dsl::Program& p, const dsl::Language& lang,
                                            const AliasRules& rules);

// Token sequences of every program within rules.depth rewrites of `p`,
// including `p`. Throws ClosureOverflow past rules.cap members.
std::set<std::vector<int>> alias_closure(const dsl::Program& p, const dsl::Language& lang,
                                         const AliasRules& rules);

struct AliasVerdict {
  bool parsed = false;
  bool exact = false;
  bool alias = false;
  bool overflow = false;  // closure overflowed and the fallback search decided
};

// Scores a predicted token sequence against the ground truth.
AliasVerdict alias_match(const std::vector<int>& pred, const dsl::Program& truth,
                         const dsl::Language& lang, const AliasRules& rules);

// Sampled trace equality on n_trials seeded initial states (diagnostic only).
bool behavioral_eq(const dsl::Program& a, const dsl::Program& b, const world::WorldConfig& config,
                   int n_trials = 50, int step_budget = 50, std::uint64_t seed = 0);

struct EvalOptions {
  AliasRules rules;
  vislang::NoiseSpec noise;
  model::DecodeOptions decode;
  int behavioral_trials = 50;
  int jobs = 1;
  bool keep_predictions = true;
};

struct Prediction {
  std::uint64_t index = 0;
  std::string text;  // pretty-printed, or the raw token ids when unparsable
  AliasVerdict verdict;
  bool behavioral = false;
};

struct EvalReport {
  std::uint64_t n = 0;
  std::uint64_t exact_count = 0;
  std::uint64_t alias_count = 0;
  std::uint64_t parse_failure_count = 0;
  std::uint64_t overflow_count = 0;
  // Parsed, not an alias, but trace-equal on the sampled states.
  std::uint64_t behavioral_only_count = 0;
  double epsilon = 0.0;
  std::uint64_t noise_seed = 0;
  int beam_width = 1;
  std::vector<Prediction> predictions;

  double acc_exact() const { return n ? static_cast<double>(exact_count) / static_cast<double>(n) : 0.0; }
  double acc_alias() const { return n ? static_cast<double>(alias_count) / static_cast<double>(n) : 0.0; }
};

// Noise for entry i is keyed by counter_hash(noise.seed, entry.index).
EvalReport evaluate(const model::Params<float>& params, const std::vector<dataset::Entry>& entries,
                    const dataset::DatasetConfig& config, const EvalOptions& options);

struct AblationRow {
  double epsilon = 0.0;
  double mean_exact = 0.0, min_exact = 0.0, max_exact = 0.0;
  double mean_alias = 0.0, min_alias = 0.0, max_alias = 0.0;
  std::vector<EvalReport> runs;  // one per seed
};

std::vector<AblationRow> ablate(const model::Params<float>& params,
                                const std::vector<dataset::Entry>& entries,
                                const dataset::DatasetConfig& config, EvalOptions options,
                                const std::vector<double>& epsilons,
                                const std::vector<std::uint64_t>& seeds);

// Rates are rendered with six decimals.
nlohmann::json report_to_json(const EvalReport& report);
nlohmann::json ablation_to_json(const std::vector<AblationRow>& rows);
std::string ablation_to_text(const std::vector<AblationRow>& rows);
std::string fixed(double value, int decimals = 6);

}  // namespace demosynth::eval
