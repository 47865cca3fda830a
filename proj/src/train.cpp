#include "demosynth/train.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <thread>

#include <json.hpp>

#include "demosynth/config.hpp"
#include "demosynth/error.hpp"
#include "demosynth/hash.hpp"
#include "demosynth/io.hpp"
#include "demosynth/rng.hpp"
#include "demosynth/vislang.hpp"

namespace demosynth::train {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint layout assumes little-endian");

namespace {

constexpr std::uint64_t kEpochStream = 0x45504f43;  // "EPOC"
constexpr std::uint64_t kSplitStream = 0x53504c54;  // "SPLT"
constexpr std::uint64_t kNoiseStream = 0x41554753;  // "AUGS"

std::vector<std::size_t> keyed_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
  return p;
}

std::string floats_to_bytes(const std::vector<float>& v) {
  std::string out(v.size() * sizeof(float), '\0');
  if (!v.empty()) std::memcpy(out.data(), v.data(), out.size());
  return out;
}

void bytes_to_floats(std::string_view bytes, std::vector<float>& v) {
  std::memcpy(v.data(), bytes.data(), v.size() * sizeof(float));
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr >= 0.0)) throw ConfigError("lr must be >= 0");
  if (warmup < 0) throw ConfigError("warmup must be >= 0");
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (!(clip >= 0.0)) throw ConfigError("clip must be >= 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("adam betas must be in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be > 0");
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0))
    throw ConfigError("val_fraction must be in [0, 1)");
  if (!(noise_max >= 0.0 && noise_max <= 1.0)) throw ConfigError("noise_max must be in [0, 1]");
}

double learning_rate(const TrainConfig& config, std::uint64_t step) {
  if (step == 0) return 0.0;
  if (config.warmup == 0) return config.lr;
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(config.warmup);
  return config.lr * std::min(s / w, std::sqrt(w / s));
}

double adamw_step(TrainState& state, std::vector<float>& grad, double lr) {
  const TrainConfig& c = state.config;
  double sq = 0.0;
  for (float g : grad) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  const float scale = c.clip > 0.0 && norm > c.clip ? static_cast<float>(c.clip / norm) : 1.0f;
  const std::uint64_t t = state.step + 1;
  const float b1 = static_cast<float>(c.beta1);
  const float b2 = static_cast<float>(c.beta2);
  const float bc1 = static_cast<float>(1.0 - std::pow(c.beta1, static_cast<double>(t)));
  const float bc2 = static_cast<float>(1.0 - std::pow(c.beta2, static_cast<double>(t)));
  const float eps = static_cast<float>(c.adam_eps);
  const float flr = static_cast<float>(lr);
  const float wd = static_cast<float>(c.weight_decay);
  for (const model::TensorInfo& info : state.params.layout.tensors()) {
    for (std::size_t i = info.offset; i < info.offset + info.size(); ++i) {
      const float g = grad[i] * scale;
      float& m = state.adam_m[i];
      float& v = state.adam_v[i];
      m = b1 * m + (1.0f - b1) * g;
      v = b2 * v + (1.0f - b2) * g * g;
      const float mhat = m / bc1;
      const float vhat = v / bc2;
      float update = mhat / (std::sqrt(vhat) + eps);
      float& p = state.params.data[i];
      if (info.decay) update += wd * p;
      p -= flr * update;
    }
  }
  return norm;
}

model::ModelConfig model_config_for(const dataset::Manifest& manifest, model::ModelConfig base) {
  const dataset::DatasetConfig& dc = manifest.config;
  base.src_vocab = static_cast<int>(manifest.visual_vocab_size);
  base.tgt_vocab = manifest.program_vocab_size;
  base.max_src_len = 2 + dc.k * dc.exec.t_max + (dc.k - 1);
  base.max_tgt_len = dc.max_program_tokens;
  base.validate();
  return base;
}

model::Example make_example(const dataset::Entry& entry, const vislang::Tokenizer& tokenizer) {
  model::Example ex;
  for (const vislang::VisualToken& t : tokenizer.assemble(entry.demos).tokens)
    ex.src.push_back(static_cast<int>(t.id));
  ex.tgt = entry.program_tokens;
  return ex;
}

std::vector<model::Example> make_examples(const std::vector<dataset::Entry>& entries,
                                          const vislang::Tokenizer& tokenizer) {
  std::vector<model::Example> out;
  out.reserve(entries.size());
  for (const dataset::Entry& e : entries) out.push_back(make_example(e, tokenizer));
  return out;
}

std::vector<std::size_t> batch_indices(const TrainConfig& config, std::size_t n,
                                       std::uint64_t step) {
  if (n == 0) throw ConfigError("cannot train on an empty dataset");
  std::vector<std::size_t> out;
  const std::uint64_t B = static_cast<std::uint64_t>(config.batch_size);
  std::uint64_t cached_epoch = UINT64_MAX;
  std::vector<std::size_t> perm;
  for (std::uint64_t b = 0; b < B; ++b) {
    const std::uint64_t g = (step - 1) * B + b;
    const std::uint64_t epoch = g / n;
    if (epoch != cached_epoch) {
      perm = keyed_permutation(n, counter_hash({config.seed, kEpochStream, epoch}));
      cached_epoch = epoch;
    }
    out.push_back(perm[g % n]);
  }
  return out;
}

TrainState init_state(const model::ModelConfig& model_config, const TrainConfig& config,
                      const std::string& dataset_config_hash) {
  config.validate();
  TrainState s(model_config);
  s.params = model::init_params<float>(model_config, config.seed);
  s.config = config;
  s.dataset_config_hash = dataset_config_hash;
  return s;
}

void save_checkpoint(const std::filesystem::path& path, const TrainState& state) {
  const std::string payload = floats_to_bytes(state.params.data) + floats_to_bytes(state.adam_m) +
                              floats_to_bytes(state.adam_v);
  json tensors = json::array();
  for (const model::TensorInfo& t : state.params.layout.tensors())
    tensors.push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}, {"offset", t.offset}});
  json header{{"format_version", kCheckpointVersion},
              {"model", state.params.config},
              {"train", state.config},
              {"tokenizer", vislang::kConventionId},
              {"dataset_config_hash", state.dataset_config_hash},
              {"step", state.step},
              {"best_val_loss", state.best_val_loss},
              {"has_best", state.has_best},
              {"param_count", state.params.data.size()},
              {"tensors", tensors},
              {"payload_sha256", sha256_hex(payload)}};
  const std::string h = header.dump();
  std::string out(kCheckpointMagic);
  const std::uint64_t len = h.size();
  out.append(reinterpret_cast<const char*>(&len), sizeof len);
  out += h;
  out += payload;
  io::write_file_atomic(path, out);
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = io::read_file(path);
  const std::size_t magic_len = std::strlen(kCheckpointMagic);
  if (bytes.size() < magic_len + 8 || bytes.compare(0, magic_len, kCheckpointMagic) != 0)
    throw CorruptDataset(path.string() + ": not a checkpoint (bad magic)");
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + magic_len, sizeof len);
  const std::size_t header_at = magic_len + 8;
  if (len > bytes.size() - header_at) throw CorruptDataset(path.string() + ": truncated header");
  json header;
  try {
    header = json::parse(bytes.substr(header_at, len));
  } catch (const json::exception& e) {
    throw CorruptDataset(path.string() + ": unreadable header: " + e.what());
  }
  try {
    if (header.at("format_version").get<int>() != kCheckpointVersion)
      throw VersionMismatch(path.string() + ": checkpoint format version " +
                            header.at("format_version").dump() + ", expected " +
                            std::to_string(kCheckpointVersion));
    if (header.at("tokenizer").get<std::string>() != vislang::kConventionId)
      throw VersionMismatch(path.string() + ": tokenizer convention " +
                            header.at("tokenizer").get<std::string>());
    const model::ModelConfig mc = header.at("model").get<model::ModelConfig>();
    TrainState s(mc);
    s.config = header.at("train").get<TrainConfig>();
    s.dataset_config_hash = header.at("dataset_config_hash").get<std::string>();
    s.step = header.at("step").get<std::uint64_t>();
    s.best_val_loss = header.at("best_val_loss").get<double>();
    s.has_best = header.at("has_best").get<bool>();
    const std::size_t n = s.params.data.size();
    if (header.at("param_count").get<std::size_t>() != n)
      throw CorruptDataset(path.string() + ": parameter count does not match model config");
    const std::string_view payload = std::string_view(bytes).substr(header_at + len);
    if (payload.size() != 3 * n * sizeof(float))
      throw CorruptDataset(path.string() + ": payload size mismatch");
    if (sha256_hex(payload) != header.at("payload_sha256").get<std::string>())
      throw CorruptDataset(path.string() + ": payload hash mismatch");
    bytes_to_floats(payload.substr(0, n * sizeof(float)), s.params.data);
    bytes_to_floats(payload.substr(n * sizeof(float), n * sizeof(float)), s.adam_m);
    bytes_to_floats(payload.substr(2 * n * sizeof(float)), s.adam_v);
    return s;
  } catch (const json::exception& e) {
    throw CorruptDataset(path.string() + ": malformed header: " + e.what());
  } catch (const ConfigError& e) {
    throw CorruptDataset(path.string() + ": invalid config in header: " + e.what());
  }
}

std::string metrics_to_json(const Metrics& m) {
  json j{{"step", m.step}, {"lr", m.lr}, {"train_loss", m.train_loss}, {"best", m.best}};
  j["val_loss"] = m.has_val ? json(m.val_loss) : json(nullptr);
  j["val_token_accuracy"] = m.has_val ? json(m.val_token_accuracy) : json(nullptr);
  return j.dump();
}

model::LossStats evaluate_loss(const model::Params<float>& params,
                               const std::vector<model::Example>& examples, int batch_size,
                               int jobs) {
  const std::size_t bs = static_cast<std::size_t>(std::max(1, batch_size));
  const std::size_t n_batches = (examples.size() + bs - 1) / bs;
  std::vector<model::LossStats> per(n_batches);
  auto run = [&](std::size_t b) {
    std::vector<model::Example> chunk(
        examples.begin() + static_cast<std::ptrdiff_t>(b * bs),
        examples.begin() + static_cast<std::ptrdiff_t>(std::min(examples.size(), (b + 1) * bs)));
    per[b] = model::loss(params, model::Batch::from_examples(chunk));
  };
  jobs = std::max(1, std::min<int>(jobs, static_cast<int>(n_batches)));
  if (jobs <= 1) {
    for (std::size_t b = 0; b < n_batches; ++b) run(b);
  } else {
    std::vector<std::thread> workers;
    for (int w = 0; w < jobs; ++w)
      workers.emplace_back([&, w] {
        for (std::size_t b = static_cast<std::size_t>(w); b < n_batches; b += static_cast<std::size_t>(jobs)) run(b);
      });
    for (std::thread& t : workers) t.join();
  }
  model::LossStats total;
  for (const model::LossStats& s : per) {
    total.loss_sum += s.loss_sum;
    total.tokens += s.tokens;
    total.correct += s.correct;
  }
  return total;
}

void perturb_percepts(std::vector<model::Example>& chunk, const TrainConfig& c, int q,
                      std::uint64_t step) {
  constexpr int offset = static_cast<int>(vislang::kPayloadOffset);
  for (std::size_t e = 0; e < chunk.size(); ++e) {
    const double eps = c.noise_max * to_unit(counter_hash({c.seed, kNoiseStream, step, e}));
    std::vector<int>& src = chunk[e].src;
    for (std::size_t i = 0; i < src.size(); ++i) {
      if (src[i] < offset) continue;
      int psi = src[i] - offset;
      for (int b = 0; b < q; ++b)
        if (to_unit(counter_hash({c.seed, kNoiseStream, step, e, i, static_cast<std::uint64_t>(b)})) < eps)
          psi ^= 1 << b;
      src[i] = psi + offset;
    }
  }
}

void train(TrainState& state, const std::vector<model::Example>& train_set,
           const std::vector<model::Example>& val_set, const TrainOptions& options) {
  const TrainConfig& c = state.config;
  c.validate();
  if (train_set.empty()) throw ConfigError("training set is empty");
  if (c.noise_max > 0.0 && options.percept_bits < 1)
    throw ConfigError("noise_max > 0 needs TrainOptions::percept_bits");
  const bool write = !options.out_dir.empty();
  std::ofstream metrics_file;
  if (write) {
    std::filesystem::create_directories(options.out_dir);
    const auto mode = state.step == 0 ? std::ios::out | std::ios::trunc : std::ios::out | std::ios::app;
    metrics_file.open(options.out_dir / "metrics.jsonl", mode);
    if (!metrics_file) throw IoError("cannot open " + (options.out_dir / "metrics.jsonl").string());
  }
  std::vector<float> grad;
  double interval_loss = 0.0;
  std::uint64_t interval_tokens = 0;
  const std::uint64_t total = static_cast<std::uint64_t>(c.steps);
  while (state.step < total) {
    const std::uint64_t step = state.step + 1;
    std::vector<model::Example> chunk;
    for (std::size_t i : batch_indices(c, train_set.size(), step)) chunk.push_back(train_set[i]);
    if (c.noise_max > 0.0) perturb_percepts(chunk, c, options.percept_bits, step);
    const model::Batch batch = model::Batch::from_examples(chunk);
    model::ForwardOptions fo;
    fo.train = true;
    fo.seed = c.seed;
    fo.step = step;
    const model::LossStats stats = model::loss_and_grad(state.params, batch, fo, grad, c.jobs);
    if (!std::isfinite(stats.loss_sum))
      throw DivergenceError("non-finite training loss at step " + std::to_string(step));
    const double lr = learning_rate(c, step);
    adamw_step(state, grad, lr);
    if (!state.params.all_finite())
      throw DivergenceError("non-finite parameters after step " + std::to_string(step));
    state.step = step;
    interval_loss += stats.loss_sum;
    interval_tokens += stats.tokens;

    if (step % static_cast<std::uint64_t>(c.eval_every) == 0 || step == total) {
      Metrics m;
      m.step = step;
      m.lr = lr;
      m.train_loss = interval_tokens ? interval_loss / static_cast<double>(interval_tokens) : 0.0;
      if (!val_set.empty()) {
        const model::LossStats v = evaluate_loss(state.params, val_set, c.batch_size, c.jobs);
        m.has_val = true;
        m.val_loss = v.mean();
        m.val_token_accuracy = v.tokens ? static_cast<double>(v.correct) / static_cast<double>(v.tokens) : 0.0;
      } else {
        m.val_loss = m.train_loss;
      }
      if (!state.has_best || m.val_loss < state.best_val_loss) {
        state.best_val_loss = m.val_loss;
        state.has_best = true;
        m.best = true;
      }
      if (write) {
        if (m.best) save_checkpoint(options.out_dir / "best.ckpt", state);
        save_checkpoint(options.out_dir / "last.ckpt", state);
        metrics_file << metrics_to_json(m) << '\n';
        metrics_file.flush();
      }
      if (options.on_metrics) options.on_metrics(m);
      interval_loss = 0.0;
      interval_tokens = 0;
    }
  }
}

std::pair<std::vector<dataset::Entry>, std::vector<dataset::Entry>> split_validation(
    const std::vector<dataset::Entry>& entries, double fraction, std::uint64_t seed) {
  const std::size_t n_val = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(entries.size())));
  std::vector<std::size_t> perm = keyed_permutation(entries.size(), counter_hash({seed, kSplitStream}));
  std::vector<bool> is_val(entries.size(), false);
  for (std::size_t i = 0; i < n_val; ++i) is_val[perm[i]] = true;
  std::pair<std::vector<dataset::Entry>, std::vector<dataset::Entry>> out;
  for (std::size_t i = 0; i < entries.size(); ++i)
    (is_val[i] ? out.second : out.first).push_back(entries[i]);
  return out;
}

}  // namespace demosynth::train
