#pragma once

// Teacher-forced training with AdamW, checkpoints and a JSONL metrics log.
// Every batch and dropout mask is a pure function of (seed, step), so a run
// resumed from a checkpoint continues bit-identically.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "demosynth/dataset.hpp"
#include "demosynth/model.hpp"
#include "demosynth/vislang.hpp"

namespace demosynth::train {

struct TrainConfig {
  int batch_size = 16;
  double lr = 1e-3;  // peak learning rate
  int warmup = 200;
  int steps = 4000;
  int eval_every = 200;
  double clip = 1.0;  // global gradient-norm cap, 0 disables
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-9;
  std::uint64_t seed = 1;
  int jobs = 1;
  // Fraction of the training split held out for checkpoint selection.
  double val_fraction = 0.05;
  // Training-time perception noise: each example's percept bits flip with a
  // rate drawn uniformly from [0, noise_max]. 0 trains on clean demos.
  double noise_max = 0.0;

  // Throws ConfigError.
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct TrainState {
  model::Params<float> params;
  std::vector<float> adam_m;
  std::vector<float> adam_v;
  std::uint64_t step = 0;
  TrainConfig config;
  std::string dataset_config_hash;
  double best_val_loss = 0.0;
  bool has_best = false;

  explicit TrainState(const model::ModelConfig& mc)
      : params(mc), adam_m(params.data.size(), 0.0f), adam_v(params.data.size(), 0.0f) {}
};

// lr(step) = peak * min(step / warmup, sqrt(warmup / step)), step >= 1.
double learning_rate(const TrainConfig& config, std::uint64_t step);

// One AdamW update in place; returns the pre-clip global gradient norm.
double adamw_step(TrainState& state, std::vector<float>& grad, double lr);

// Model shape implied by a dataset: vocabularies and maximum lengths.
model::ModelConfig model_config_for(const dataset::Manifest& manifest, model::ModelConfig base);

// Source visual tokens and target program tokens for one entry.
model::Example make_example(const dataset::Entry& entry, const vislang::Tokenizer& tokenizer);
std::vector<model::Example> make_examples(const std::vector<dataset::Entry>& entries,
                                          const vislang::Tokenizer& tokenizer);

// Example indices of the batch trained at `step` (1-based). Epoch e visits a
// keyed permutation of [0, n).
std::vector<std::size_t> batch_indices(const TrainConfig& config, std::size_t n,
                                       std::uint64_t step);

TrainState init_state(const model::ModelConfig& model_config, const TrainConfig& config,
                      const std::string& dataset_config_hash);

inline constexpr const char* kCheckpointMagic = "DSCKPT01";
inline constexpr int kCheckpointVersion = 1;

// Atomic write. Throws IoError.
void save_checkpoint(const std::filesystem::path& path, const TrainState& state);
// Throws IoError, VersionMismatch or CorruptDataset on a damaged file.
TrainState load_checkpoint(const std::filesystem::path& path);

struct Metrics {
  std::uint64_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;  // mean over steps since the previous record
  double val_loss = 0.0;
  double val_token_accuracy = 0.0;
  bool has_val = false;  // false: no held-out split, selection used train_loss
  bool best = false;
};

std::string metrics_to_json(const Metrics& m);

// Teacher-forced loss and token accuracy over `examples` in eval mode.
model::LossStats evaluate_loss(const model::Params<float>& params,
                               const std::vector<model::Example>& examples, int batch_size,
                               int jobs);

struct TrainOptions {
  // When set, writes last.ckpt, best.ckpt and metrics.jsonl here.
  std::filesystem::path out_dir;
  std::function<void(const Metrics&)> on_metrics;
  // Percept bits per visual token (the world's q); required when noise_max > 0.
  int percept_bits = 0;
};

// Flips each percept bit (the low q payload bits) of every visual token with
// a per-example rate drawn from [0, c.noise_max], keyed by (c.seed, step,
// slot in chunk, position, bit).
void perturb_percepts(std::vector<model::Example>& chunk, const TrainConfig& c, int q,
                      std::uint64_t step);

// Trains from state.step to config.steps. Throws DivergenceError on a
// non-finite loss or update; the last written checkpoint is left intact.
void train(TrainState& state, const std::vector<model::Example>& train_set,
           const std::vector<model::Example>& val_set, const TrainOptions& options = {});

// Splits entries into (train, validation) by a keyed shuffle.
std::pair<std::vector<dataset::Entry>, std::vector<dataset::Entry>> split_validation(
    const std::vector<dataset::Entry>& entries, double fraction, std::uint64_t seed);

}  // namespace demosynth::train
