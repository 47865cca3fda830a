#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "demosynth/error.hpp"
#include "demosynth/io.hpp"
#include "demosynth/train.hpp"

using namespace demosynth;
using namespace demosynth::train;
namespace fs = std::filesystem;

namespace {

model::ModelConfig tiny_model() {
  model::ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_enc_blocks = 1;
  c.n_dec_blocks = 1;
  c.d_ff = 32;
  c.max_src_len = 12;
  c.max_tgt_len = 8;
  c.src_vocab = 20;
  c.tgt_vocab = 10;
  return c;
}

std::vector<model::Example> toy_examples(int n, unsigned seed) {
  std::mt19937 rng(seed);
  std::vector<model::Example> out;
  for (int i = 0; i < n; ++i) {
    model::Example e;
    e.src = {1};
    const int len = 2 + static_cast<int>(rng() % 8);
    for (int j = 0; j < len; ++j) e.src.push_back(4 + static_cast<int>(rng() % 16));
    e.src.push_back(3);
    e.tgt = {1};
    const int tl = 1 + static_cast<int>(rng() % 5);
    for (int j = 0; j < tl; ++j) e.tgt.push_back(3 + static_cast<int>(rng() % 7));
    e.tgt.push_back(2);
    out.push_back(e);
  }
  return out;
}

TrainConfig quick_config() {
  TrainConfig c;
  c.batch_size = 4;
  c.warmup = 2;
  c.steps = 6;
  c.eval_every = 3;
  c.lr = 3e-3;
  c.seed = 5;
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("demosynth_train_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(Train, LearningRateSchedule) {
  TrainConfig c;
  c.lr = 1e-3;
  c.warmup = 100;
  EXPECT_EQ(learning_rate(c, 0), 0.0);
  EXPECT_NEAR(learning_rate(c, 50), 5e-4, 1e-15);
  EXPECT_NEAR(learning_rate(c, 100), 1e-3, 1e-15);
  EXPECT_NEAR(learning_rate(c, 400), 5e-4, 1e-15);
  c.warmup = 0;
  EXPECT_EQ(learning_rate(c, 1), 1e-3);
  EXPECT_EQ(learning_rate(c, 1000), 1e-3);
}

TEST(Train, ZeroLearningRateLeavesParamsUnchanged) {
  TrainConfig c = quick_config();
  c.lr = 0.0;
  TrainState s = init_state(tiny_model(), c, "h");
  const std::vector<float> before = s.params.data;
  train::train(s, toy_examples(10, 1), {});
  EXPECT_EQ(s.step, 6u);
  EXPECT_EQ(s.params.data, before);
}

TEST(Train, AdamwStepMatchesHandComputation) {
  TrainConfig c;
  c.clip = 0.0;
  c.weight_decay = 0.0;
  TrainState s = init_state(tiny_model(), c, "h");
  const std::vector<float> before = s.params.data;
  std::vector<float> g(before.size(), 0.0f);
  g[0] = 0.5f;
  g[1] = -2.0f;
  adamw_step(s, g, 0.01);
  // First step: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps).
  EXPECT_NEAR(s.params.data[0], before[0] - 0.01f, 1e-6);
  EXPECT_NEAR(s.params.data[1], before[1] + 0.01f, 1e-6);
  EXPECT_EQ(s.params.data[2], before[2]);
}

TEST(Train, ClippingScalesGlobalNorm) {
  TrainConfig c;
  c.clip = 1.0;
  TrainState s = init_state(tiny_model(), c, "h");
  std::vector<float> g(s.params.data.size(), 0.0f);
  g[0] = 3.0f;
  g[1] = 4.0f;
  EXPECT_NEAR(adamw_step(s, g, 0.0), 5.0, 1e-6);
}

TEST(Train, BatchesCoverEachEpochOnce) {
  TrainConfig c;
  c.batch_size = 7;
  const std::size_t n = 20;
  std::vector<int> seen(n, 0);
  // 20 steps of 7 = 140 = 7 epochs exactly.
  for (std::uint64_t step = 1; step <= 20; ++step)
    for (std::size_t i : batch_indices(c, n, step)) ++seen[i];
  for (int v : seen) EXPECT_EQ(v, 7);
  EXPECT_EQ(batch_indices(c, n, 3), batch_indices(c, n, 3));
  TrainConfig other = c;
  other.seed = 99;
  EXPECT_NE(batch_indices(c, n, 1), batch_indices(other, n, 1));
}

TEST(Train, SplitValidationIsDisjointAndSized) {
  std::vector<dataset::Entry> entries(40);
  for (std::size_t i = 0; i < entries.size(); ++i) entries[i].index = i;
  const auto [tr, val] = split_validation(entries, 0.1, 3);
  EXPECT_EQ(val.size(), 4u);
  EXPECT_EQ(tr.size(), 36u);
  std::set<std::uint64_t> ids;
  for (const auto& e : tr) ids.insert(e.index);
  for (const auto& e : val) EXPECT_TRUE(ids.insert(e.index).second);
  EXPECT_EQ(split_validation(entries, 0.0, 3).second.size(), 0u);
}

TEST(Train, CheckpointRoundTrip) {
  const fs::path dir = scratch("ckpt");
  TrainState s = init_state(tiny_model(), quick_config(), "abc");
  train::train(s, toy_examples(10, 2), toy_examples(3, 3));
  save_checkpoint(dir / "a.ckpt", s);
  const TrainState back = load_checkpoint(dir / "a.ckpt");
  EXPECT_EQ(back.params.config, s.params.config);
  EXPECT_EQ(back.params.data, s.params.data);
  EXPECT_EQ(back.adam_m, s.adam_m);
  EXPECT_EQ(back.adam_v, s.adam_v);
  EXPECT_EQ(back.step, s.step);
  EXPECT_EQ(back.config, s.config);
  EXPECT_EQ(back.dataset_config_hash, "abc");
  EXPECT_EQ(back.best_val_loss, s.best_val_loss);
  EXPECT_EQ(back.has_best, s.has_best);
  save_checkpoint(dir / "b.ckpt", back);
  EXPECT_EQ(io::read_file(dir / "a.ckpt"), io::read_file(dir / "b.ckpt"));
}

TEST(Train, DamagedCheckpointsAreRejected) {
  const fs::path dir = scratch("damaged");
  const TrainState s = init_state(tiny_model(), quick_config(), "abc");
  save_checkpoint(dir / "ok.ckpt", s);
  const std::string bytes = io::read_file(dir / "ok.ckpt");

  std::string flipped = bytes;
  flipped[flipped.size() - 3] ^= 0x40;
  io::write_file_atomic(dir / "flipped.ckpt", flipped);
  EXPECT_THROW(load_checkpoint(dir / "flipped.ckpt"), CorruptDataset);

  io::write_file_atomic(dir / "short.ckpt", bytes.substr(0, bytes.size() - 8));
  EXPECT_THROW(load_checkpoint(dir / "short.ckpt"), CorruptDataset);

  std::string magic = bytes;
  magic[0] = 'X';
  io::write_file_atomic(dir / "magic.ckpt", magic);
  EXPECT_THROW(load_checkpoint(dir / "magic.ckpt"), CorruptDataset);

  std::string version = bytes;
  const std::size_t at = version.find("\"format_version\":1");
  ASSERT_NE(at, std::string::npos);
  version[at + 17] = '9';
  io::write_file_atomic(dir / "version.ckpt", version);
  EXPECT_THROW(load_checkpoint(dir / "version.ckpt"), VersionMismatch);

  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), IoError);
}

TEST(Train, ResumeIsBitIdentical) {
  const auto train_set = toy_examples(12, 4);
  const auto val_set = toy_examples(3, 5);
  const fs::path full_dir = scratch("full");
  const fs::path part_dir = scratch("part");

  TrainState full = init_state(tiny_model(), quick_config(), "h");
  train::train(full, train_set, val_set, {full_dir, {}});

  TrainConfig half = quick_config();
  half.steps = 3;
  TrainState part = init_state(tiny_model(), half, "h");
  train::train(part, train_set, val_set, {part_dir, {}});
  TrainState resumed = load_checkpoint(part_dir / "last.ckpt");
  EXPECT_EQ(resumed.step, 3u);
  resumed.config.steps = 6;
  train::train(resumed, train_set, val_set, {part_dir, {}});

  EXPECT_EQ(resumed.params.data, full.params.data);
  EXPECT_EQ(resumed.adam_m, full.adam_m);
  EXPECT_EQ(resumed.adam_v, full.adam_v);
  EXPECT_EQ(io::read_file(part_dir / "metrics.jsonl"), io::read_file(full_dir / "metrics.jsonl"));
  EXPECT_EQ(io::read_file(part_dir / "last.ckpt"), io::read_file(full_dir / "last.ckpt"));
}

TEST(Train, MetricsAreLoggedPerInterval) {
  const fs::path dir = scratch("metrics");
  std::vector<Metrics> seen;
  TrainState s = init_state(tiny_model(), quick_config(), "h");
  train::train(s, toy_examples(10, 6), toy_examples(3, 7), {dir, [&](const Metrics& m) { seen.push_back(m); }});
  ASSERT_EQ(seen.size(), 2u);
  EXPECT_EQ(seen[0].step, 3u);
  EXPECT_EQ(seen[1].step, 6u);
  EXPECT_TRUE(seen[0].best);
  EXPECT_TRUE(fs::exists(dir / "best.ckpt"));
  std::ifstream in(dir / "metrics.jsonl");
  int lines = 0;
  for (std::string line; std::getline(in, line);) ++lines;
  EXPECT_EQ(lines, 2);
}

TEST(Train, ModelShapeFollowsDataset) {
  dataset::Manifest m;
  m.config.k = 25;
  m.program_vocab_size = 35;
  m.visual_vocab_size = 4 + 4096;
  const model::ModelConfig c = model_config_for(m, model::ModelConfig{});
  EXPECT_EQ(c.src_vocab, 4100);
  EXPECT_EQ(c.tgt_vocab, 35);
  EXPECT_EQ(c.max_src_len, 526);
  EXPECT_EQ(c.max_tgt_len, 64);
}

TEST(Train, OverfitsTinyDataset) {
  const auto data = toy_examples(8, 8);
  TrainConfig c = quick_config();
  c.steps = 300;
  c.eval_every = 300;
  c.warmup = 20;
  c.batch_size = 8;
  c.weight_decay = 0.0;
  model::ModelConfig mc = tiny_model();
  mc.dropout = 0.0;
  TrainState s = init_state(mc, c, "h");
  train::train(s, data, {});
  const model::LossStats stats = evaluate_loss(s.params, data, 8, 1);
  EXPECT_GE(static_cast<double>(stats.correct) / static_cast<double>(stats.tokens), 0.95);
}

TEST(Train, PerturbFlipsOnlyPerceptBits) {
  TrainConfig c = quick_config();
  c.noise_max = 0.5;
  const int q = 2;
  const std::vector<model::Example> clean = toy_examples(400, 11);
  std::vector<model::Example> noisy = clean;
  perturb_percepts(noisy, c, q, 7);
  std::uint64_t bits = 0, flipped = 0;
  for (std::size_t e = 0; e < clean.size(); ++e) {
    ASSERT_EQ(noisy[e].src.size(), clean[e].src.size());
    EXPECT_EQ(noisy[e].tgt, clean[e].tgt);
    for (std::size_t i = 0; i < clean[e].src.size(); ++i) {
      const int a = clean[e].src[i], b = noisy[e].src[i];
      if (a < 4) {
        EXPECT_EQ(a, b);
        continue;
      }
      EXPECT_EQ((a - 4) >> q, (b - 4) >> q);
      bits += q;
      flipped += static_cast<std::uint64_t>(std::popcount(static_cast<unsigned>((a - 4) ^ (b - 4))));
    }
  }
  // Per-example rate is uniform on [0, 0.5]: a quarter of all bits on average.
  const double rate = static_cast<double>(flipped) / static_cast<double>(bits);
  EXPECT_NEAR(rate, 0.25, 0.03);

  std::vector<model::Example> again = clean;
  perturb_percepts(again, c, q, 7);
  for (std::size_t e = 0; e < clean.size(); ++e) EXPECT_EQ(again[e].src, noisy[e].src);

  c.noise_max = 0.0;
  std::vector<model::Example> untouched = clean;
  perturb_percepts(untouched, c, q, 7);
  for (std::size_t e = 0; e < clean.size(); ++e) EXPECT_EQ(untouched[e].src, clean[e].src);
}

TEST(Train, NoiseNeedsPerceptBits) {
  TrainConfig c = quick_config();
  c.noise_max = 0.2;
  TrainState s = init_state(tiny_model(), c, "h");
  EXPECT_THROW(train::train(s, toy_examples(10, 1), {}), ConfigError);
  c.noise_max = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Train, NoisyTrainingIsDeterministic) {
  TrainConfig c = quick_config();
  c.noise_max = 0.3;
  TrainOptions o;
  o.percept_bits = 2;
  TrainState a = init_state(tiny_model(), c, "h");
  TrainState b = init_state(tiny_model(), c, "h");
  train::train(a, toy_examples(10, 1), {}, o);
  train::train(b, toy_examples(10, 1), {}, o);
  EXPECT_EQ(a.params.data, b.params.data);
  c.noise_max = 0.0;
  TrainState clean = init_state(tiny_model(), c, "h");
  train::train(clean, toy_examples(10, 1), {});
  EXPECT_NE(a.params.data, clean.params.data);
}
