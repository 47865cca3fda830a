#pragma once

// Experiment configuration: JSON mappings for every config struct, a small
// TOML-subset reader, and layered resolution (defaults < file < overrides).

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "demosynth/dataset.hpp"
#include "demosynth/model.hpp"
#include "demosynth/train.hpp"
#include "demosynth/vislang.hpp"

namespace demosynth::world {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(WorldConfig, grid_width, grid_height, q, m,
                                                monster_count, item_count, health_max,
                                                low_health_threshold, seed)
}
namespace demosynth::dsl {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(Limits, max_nest, max_stmts, max_repeat)
}
namespace demosynth::exec {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExecOptions, step_budget, t_max)
}
namespace demosynth::dataset {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SamplingWeights, action, repeat, loop_while,
                                                if_then, if_else, mean_body_length,
                                                cond_percept, cond_not, cond_and, cond_or)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DatasetConfig, world, limits, weights, k, exec,
                                                attempt_budget, max_program_tokens, seed)
}
namespace demosynth::model {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, d_model, n_heads, n_enc_blocks,
                                                n_dec_blocks, d_ff, dropout, max_src_len,
                                                max_tgt_len, src_vocab, tgt_vocab, positional)
}
namespace demosynth::train {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, batch_size, lr, warmup, steps,
                                                eval_every, clip, weight_decay, beta1, beta2,
                                                adam_eps, seed, jobs, val_fraction, noise_max)
}
namespace demosynth::vislang {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(NoiseSpec, epsilon, seed, action_epsilon)
}

namespace demosynth::config {

struct EvalSettings {
  int beam_width = 1;
  int closure_depth = 3;
  int closure_cap = 10000;
  bool commute = false;
  int behavioral_trials = 50;
  bool operator==(const EvalSettings&) const = default;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvalSettings, beam_width, closure_depth,
                                                closure_cap, commute, behavioral_trials)

struct ExperimentConfig {
  dataset::DatasetConfig dataset;
  std::uint64_t n_train = 5000;
  std::uint64_t n_test = 500;
  model::ModelConfig model;
  train::TrainConfig train;
  vislang::NoiseSpec noise;
  EvalSettings eval;
  bool operator==(const ExperimentConfig&) const = default;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExperimentConfig, dataset, n_train, n_test, model,
                                                train, noise, eval)

// Parses the TOML subset: [dotted.tables], key = value with integers, floats,
// booleans, basic strings and flat arrays, and # comments. Throws ConfigError
// with the line number.
nlohmann::json parse_toml(const std::string& text);

// Applies `patch` onto `base`, rejecting keys that `base` does not have and
// values whose JSON type differs (integers are accepted for floats).
void merge_strict(nlohmann::json& base, const nlohmann::json& patch, const std::string& where = "");

// Parses "a.b.c=value" into a patch; the value uses TOML scalar syntax, with
// bare words taken as strings.
nlohmann::json parse_override(const std::string& assignment);

// defaults < file (if non-empty) < overrides, in order. Throws ConfigError.
ExperimentConfig resolve(const std::filesystem::path& file,
                         const std::vector<std::string>& overrides);

ExperimentConfig from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& c);

// SHA-256 of the canonical JSON form.
std::string config_hash(const ExperimentConfig& c);

}  // namespace demosynth::config
