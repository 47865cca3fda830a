#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "demosynth/dsl.hpp"
#include "demosynth/exec.hpp"
#include "demosynth/world.hpp"

namespace demosynth::dataset {

// Per-slot production weights for the program sampler. Weights need not sum
// to one; a zero weight disables the production.
struct SamplingWeights {
  double action = 0.5;
  double repeat = 0.15;
  double loop_while = 0.1;
  double if_then = 0.15;
  double if_else = 0.1;
  // Block lengths are geometric with this mean (>= 1).
  double mean_body_length = 2.5;
  double cond_percept = 0.6;
  double cond_not = 0.2;
  double cond_and = 0.1;
  double cond_or = 0.1;

  bool operator==(const SamplingWeights&) const = default;
};

// Everything that determines the content of a generated dataset.
struct DatasetConfig {
  world::WorldConfig world;
  dsl::Limits limits;
  SamplingWeights weights;
  int k = 25;
  exec::ExecOptions exec;
  int attempt_budget = 200;
  // Programs whose token sequence (with <bos>/<eos>) is longer are skipped.
  int max_program_tokens = 64;
  std::uint64_t seed = 7;

  dsl::Language language() const;
  // Throws ConfigError.
  void validate() const;
  bool operator==(const DatasetConfig&) const = default;
};

// Grammar-directed sampling; the result always satisfies the language limits.
dsl::Program sample_program(std::uint64_t seed, const dsl::Language& language,
                            const SamplingWeights& weights);

struct Entry {
  std::uint64_t index = 0;  // candidate index the entry was sampled at
  std::string program_text;
  std::vector<int> program_tokens;
  std::vector<exec::Demonstration> demos;

  bool operator==(const Entry&) const = default;
};

struct GenerationStats {
  std::uint64_t candidates = 0;
  std::uint64_t duplicates = 0;
  std::uint64_t unsatisfiable = 0;
  std::uint64_t too_long = 0;
  bool operator==(const GenerationStats&) const = default;
};

inline constexpr int kFormatVersion = 1;

struct Manifest {
  int format_version = kFormatVersion;
  DatasetConfig config;
  std::string config_hash;
  std::string tokenizer = "";
  int program_vocab_size = 0;
  std::uint32_t visual_vocab_size = 0;
  std::uint64_t train_count = 0;
  std::uint64_t test_count = 0;
  std::string train_sha256;
  std::string test_sha256;
  std::string content_hash;
  GenerationStats stats;

  bool operator==(const Manifest&) const = default;
};

struct Dataset {
  Manifest manifest;
  std::vector<Entry> train;
  std::vector<Entry> test;
};

// Samples, dedups by canonical token sequence, and keeps programs whose demo
// sets reach full coverage. Output is independent of `jobs`. Throws BudgetError
// if rejections starve the requested counts.
Dataset build_dataset(std::uint64_t n_train, std::uint64_t n_test, const DatasetConfig& config,
                      int jobs = 1);

// Writes train.jsonl.gz, test.jsonl.gz and manifest.json under `dir`.
void write_dataset(const std::filesystem::path& dir, const Dataset& data);

// Validates format version, content hashes and per-entry invariants (parse
// round-trip, demo shape, replay + coverage on a 1% sample). Throws
// CorruptDataset, VersionMismatch or IoError.
Dataset load_dataset(const std::filesystem::path& dir);

// Manifest only (cheap); same errors as load_dataset for the manifest itself.
Manifest load_manifest(const std::filesystem::path& dir);

// Serialized forms, exposed for tests and docs.
std::string entry_to_json_line(const Entry& entry);
Entry entry_from_json_line(const std::string& line);

// Stable hash of a dataset configuration.
std::string config_hash(const DatasetConfig& config);

}  // namespace demosynth::dataset
