#include "demosynth/dataset.hpp"

#include <algorithm>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "demosynth/config.hpp"
#include "demosynth/error.hpp"
#include "demosynth/hash.hpp"
#include "demosynth/io.hpp"
#include "demosynth/rng.hpp"
#include "demosynth/vislang.hpp"

namespace demosynth::dataset {

using nlohmann::json;

namespace {

constexpr std::uint64_t kProgramStream = 0x50524f47;  // "PROG"
constexpr std::uint64_t kWorldStream = 0x574f524c;    // "WORL"
constexpr int kSampleRetries = 16;

class Sampler {
 public:
  Sampler(std::uint64_t seed, const dsl::Language& lang, const SamplingWeights& w)
      : rng_(seed), lang_(lang), w_(w), budget_(lang.limits().max_stmts) {}

  dsl::Program program() {
    dsl::Program p;
    p.body = block(1);
    return p;
  }

 private:
  int block_length() {
    const double p = 1.0 / std::max(1.0, w_.mean_body_length);
    int n = 1;
    while (n < lang_.limits().max_stmts && !rng_.bernoulli(p)) ++n;
    return n;
  }

  // Picks index i with probability weights[i] / sum.
  std::size_t pick(const std::vector<double>& weights) {
    double total = 0.0;
    for (double x : weights) total += x;
    if (total <= 0.0) return 0;
    double u = rng_.uniform() * total;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (u < weights[i]) return i;
      u -= weights[i];
    }
    for (std::size_t i = weights.size(); i-- > 0;)
      if (weights[i] > 0.0) return i;
    return 0;
  }

  dsl::Block block(int level) {
    const int n = block_length();
    dsl::Block out;
    for (int i = 0; i < n && budget_ > 0; ++i) out.push_back(statement(level));
    return out;
  }

  dsl::Statement statement(int level) {
    --budget_;
    const bool may_nest = level < lang_.limits().max_nest && budget_ >= 1;
    std::vector<double> weights{w_.action, may_nest ? w_.repeat : 0.0,
                                may_nest ? w_.loop_while : 0.0, may_nest ? w_.if_then : 0.0,
                                may_nest && budget_ >= 2 ? w_.if_else : 0.0};
    switch (pick(weights)) {
      case 1: {
        const int lo = std::min(2, lang_.limits().max_repeat);
        const int count = rng_.range(lo, lang_.limits().max_repeat);
        return dsl::Statement::repeat(count, block(level + 1));
      }
      case 2: {
        dsl::Cond c = cond(1);
        return dsl::Statement::loop_while(std::move(c), block(level + 1));
      }
      case 3: {
        dsl::Cond c = cond(1);
        return dsl::Statement::if_then(std::move(c), block(level + 1));
      }
      case 4: {
        dsl::Cond c = cond(1);
        // Reserve one statement for the else branch.
        --budget_;
        dsl::Block then_body = block(level + 1);
        ++budget_;
        dsl::Block else_body = block(level + 1);
        return dsl::Statement::if_else(std::move(c), std::move(then_body), std::move(else_body));
      }
      default:
        return dsl::Statement::action(static_cast<int>(rng_.below(static_cast<std::uint64_t>(lang_.m()))));
    }
  }

  dsl::Cond cond(int level) {
    const bool may_nest = level < lang_.limits().max_nest;
    std::vector<double> weights{w_.cond_percept, may_nest ? w_.cond_not : 0.0,
                                may_nest ? w_.cond_and : 0.0, may_nest ? w_.cond_or : 0.0};
    switch (pick(weights)) {
      case 1:
        return dsl::Cond::negate(cond(level + 1));
      case 2: {
        dsl::Cond a = cond(level + 1);
        return dsl::Cond::both(std::move(a), cond(level + 1));
      }
      case 3: {
        dsl::Cond a = cond(level + 1);
        return dsl::Cond::either(std::move(a), cond(level + 1));
      }
      default:
        return dsl::Cond::percept_ref(static_cast<int>(rng_.below(static_cast<std::uint64_t>(lang_.q()))));
    }
  }

  Rng rng_;
  const dsl::Language& lang_;
  const SamplingWeights& w_;
  int budget_;
};

// Outcome of processing one candidate index.
struct Candidate {
  enum class Status { Ok, TooLong, Unsatisfiable } status = Status::Ok;
  Entry entry;
};

Candidate make_candidate(std::uint64_t index, const DatasetConfig& config,
                         const dsl::Language& lang) {
  Candidate c;
  const dsl::Program program =
      sample_program(counter_hash({config.seed, kProgramStream, index}), lang, config.weights);
  c.entry.index = index;
  c.entry.program_tokens = lang.to_tokens(program);
  c.entry.program_text = lang.pretty_print(program);
  if (static_cast<int>(c.entry.program_tokens.size()) > config.max_program_tokens) {
    c.status = Candidate::Status::TooLong;
    return c;
  }
  world::WorldConfig wc = config.world;
  wc.seed = counter_hash({config.seed, kWorldStream, index});
  auto result = exec::generate_demo_set(program, wc, config.k, config.attempt_budget, config.exec);
  if (auto* set = std::get_if<exec::DemoSet>(&result)) {
    c.entry.demos = std::move(set->demos);
  } else {
    c.status = Candidate::Status::Unsatisfiable;
  }
  return c;
}

std::string serialize_split(const std::vector<Entry>& entries) {
  std::string out;
  for (const Entry& e : entries) {
    out += entry_to_json_line(e);
    out += '\n';
  }
  return out;
}

const char* termination_name(exec::Termination t) {
  return t == exec::Termination::Completed ? "completed" : "budget_exceeded";
}

exec::Termination termination_from(const std::string& s) {
  if (s == "completed") return exec::Termination::Completed;
  if (s == "budget_exceeded") return exec::Termination::StepBudgetExceeded;
  throw CorruptDataset("unknown termination '" + s + "'");
}

json manifest_to_json(const Manifest& m) {
  json j;
  j["format_version"] = m.format_version;
  j["config"] = m.config;
  j["config_hash"] = m.config_hash;
  j["tokenizer"] = m.tokenizer;
  j["program_vocab_size"] = m.program_vocab_size;
  j["visual_vocab_size"] = m.visual_vocab_size;
  j["counts"] = {{"train", m.train_count}, {"test", m.test_count}};
  j["files"] = {{"train", {{"path", "train.jsonl.gz"}, {"sha256", m.train_sha256}}},
                {"test", {{"path", "test.jsonl.gz"}, {"sha256", m.test_sha256}}}};
  j["content_hash"] = m.content_hash;
  j["stats"] = {{"candidates", m.stats.candidates},
                {"duplicates", m.stats.duplicates},
                {"unsatisfiable", m.stats.unsatisfiable},
                {"too_long", m.stats.too_long}};
  return j;
}

Manifest manifest_from_json(const json& j) {
  Manifest m;
  m.format_version = j.at("format_version").get<int>();
  if (m.format_version != kFormatVersion)
    throw VersionMismatch("dataset format version " + std::to_string(m.format_version) +
                          ", this build reads " + std::to_string(kFormatVersion));
  m.config = j.at("config").get<DatasetConfig>();
  m.config_hash = j.at("config_hash").get<std::string>();
  m.tokenizer = j.at("tokenizer").get<std::string>();
  m.program_vocab_size = j.at("program_vocab_size").get<int>();
  m.visual_vocab_size = j.at("visual_vocab_size").get<std::uint32_t>();
  m.train_count = j.at("counts").at("train").get<std::uint64_t>();
  m.test_count = j.at("counts").at("test").get<std::uint64_t>();
  m.train_sha256 = j.at("files").at("train").at("sha256").get<std::string>();
  m.test_sha256 = j.at("files").at("test").at("sha256").get<std::string>();
  m.content_hash = j.at("content_hash").get<std::string>();
  const json& s = j.at("stats");
  m.stats = {s.at("candidates").get<std::uint64_t>(), s.at("duplicates").get<std::uint64_t>(),
             s.at("unsatisfiable").get<std::uint64_t>(), s.at("too_long").get<std::uint64_t>()};
  return m;
}

void validate_entry(const Entry& e, const DatasetConfig& config, const dsl::Language& lang,
                    bool replay) {
  dsl::Program program;
  try {
    program = lang.parse(e.program_text);
  } catch (const Error& err) {
    throw CorruptDataset("entry " + std::to_string(e.index) + ": program does not parse: " +
                         err.what());
  }
  if (lang.to_tokens(program) != e.program_tokens)
    throw CorruptDataset("entry " + std::to_string(e.index) + ": tokens disagree with program text");
  if (static_cast<int>(e.demos.size()) != config.k)
    throw CorruptDataset("entry " + std::to_string(e.index) + ": has " +
                         std::to_string(e.demos.size()) + " demos, manifest k=" +
                         std::to_string(config.k));
  for (const exec::Demonstration& d : e.demos) {
    if (d.steps.empty() || static_cast<int>(d.steps.size()) > config.exec.t_max)
      throw CorruptDataset("entry " + std::to_string(e.index) + ": demo length out of range");
    for (const exec::Step& s : d.steps) {
      if (s.percepts.size() != config.world.q || s.action < 0 || s.action >= config.world.m)
        throw CorruptDataset("entry " + std::to_string(e.index) + ": malformed step");
    }
  }
  if (!replay) return;
  world::WorldConfig wc = config.world;
  for (const exec::Demonstration& d : e.demos) {
    exec::Demonstration again = exec::truncate(
        exec::run_program(program, wc, world::init(wc, d.episode_seed), config.exec.step_budget),
        config.exec.t_max);
    again.episode_seed = d.episode_seed;
    if (again != d)
      throw CorruptDataset("entry " + std::to_string(e.index) + ": demo does not replay");
  }
  if (!exec::coverage_of(program, wc, e.demos, config.exec).complete)
    throw CorruptDataset("entry " + std::to_string(e.index) + ": demo set coverage incomplete");
}

std::vector<Entry> load_split(const std::filesystem::path& file, const std::string& expected_sha,
                              std::uint64_t expected_count) {
  const std::string raw = io::gzip_decompress(io::read_file(file));
  if (sha256_hex(raw) != expected_sha)
    throw CorruptDataset(file.string() + ": content hash does not match manifest");
  std::vector<Entry> entries;
  std::istringstream in(raw);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    entries.push_back(entry_from_json_line(line));
  }
  if (entries.size() != expected_count)
    throw CorruptDataset(file.string() + ": entry count " + std::to_string(entries.size()) +
                         " does not match manifest " + std::to_string(expected_count));
  return entries;
}

}  // namespace

dsl::Language DatasetConfig::language() const {
  return dsl::Language(world.q, world.action_names(), limits);
}

void DatasetConfig::validate() const {
  world.validate();
  if (k < 1) throw ConfigError("k must be >= 1");
  if (exec.step_budget < 1 || exec.t_max < 1) throw ConfigError("step_budget and t_max must be >= 1");
  if (attempt_budget < 1) throw ConfigError("attempt_budget must be >= 1");
  if (max_program_tokens < 7) throw ConfigError("max_program_tokens must be >= 7");
  if (limits.max_nest < 1 || limits.max_stmts < 1 || limits.max_repeat < 1)
    throw ConfigError("DSL limits must be positive");
  const SamplingWeights& w = weights;
  for (double x : {w.action, w.repeat, w.loop_while, w.if_then, w.if_else, w.cond_percept,
                   w.cond_not, w.cond_and, w.cond_or})
    if (!(x >= 0.0)) throw ConfigError("sampling weights must be >= 0");
  if (!(w.action > 0.0)) throw ConfigError("action weight must be > 0");
  if (!(w.cond_percept > 0.0)) throw ConfigError("percept condition weight must be > 0");
  if (!(w.mean_body_length >= 1.0)) throw ConfigError("mean_body_length must be >= 1");
}

dsl::Program sample_program(std::uint64_t seed, const dsl::Language& language,
                            const SamplingWeights& weights) {
  for (int attempt = 0; attempt < kSampleRetries; ++attempt) {
    Sampler s(attempt == 0 ? seed : counter_hash({seed, static_cast<std::uint64_t>(attempt)}),
              language, weights);
    dsl::Program p = s.program();
    try {
      language.check_limits(p);
      return p;
    } catch (const LimitError&) {
    }
  }
  return dsl::Program{{dsl::Statement::action(0)}};
}

Dataset build_dataset(std::uint64_t n_train, std::uint64_t n_test, const DatasetConfig& config,
                      int jobs) {
  if (n_train < 1 || n_test < 1) throw ConfigError("split counts must be >= 1");
  config.validate();
  const dsl::Language lang = config.language();
  jobs = std::max(1, jobs);
  const std::uint64_t target = n_train + n_test;
  const std::uint64_t max_candidates = 50 * target + 1000;

  Dataset data;
  GenerationStats& stats = data.manifest.stats;
  std::set<std::vector<int>> seen;
  std::uint64_t next = 0;
  const std::uint64_t chunk = static_cast<std::uint64_t>(jobs) * 64;
  while (data.train.size() + data.test.size() < target) {
    if (next >= max_candidates)
      throw BudgetError("only " + std::to_string(data.train.size() + data.test.size()) + " of " +
                        std::to_string(target) + " programs accepted after " +
                        std::to_string(next) + " candidates");
    const std::uint64_t count = std::min(chunk, max_candidates - next);
    std::vector<Candidate> batch(count);
    std::vector<std::thread> workers;
    for (int w = 0; w < jobs; ++w) {
      workers.emplace_back([&, w] {
        for (std::uint64_t i = static_cast<std::uint64_t>(w); i < count;
             i += static_cast<std::uint64_t>(jobs))
          batch[i] = make_candidate(next + i, config, lang);
      });
    }
    for (std::thread& t : workers) t.join();
    // Acceptance runs in index order so the result does not depend on jobs.
    for (Candidate& c : batch) {
      if (data.train.size() + data.test.size() >= target) break;
      ++stats.candidates;
      if (c.status == Candidate::Status::TooLong) {
        ++stats.too_long;
        continue;
      }
      if (seen.count(c.entry.program_tokens)) {
        ++stats.duplicates;
        continue;
      }
      if (c.status == Candidate::Status::Unsatisfiable) {
        ++stats.unsatisfiable;
        continue;
      }
      seen.insert(c.entry.program_tokens);
      (data.train.size() < n_train ? data.train : data.test).push_back(std::move(c.entry));
    }
    next += count;
  }

  Manifest& m = data.manifest;
  m.config = config;
  m.config_hash = config_hash(config);
  m.tokenizer = vislang::kConventionId;
  m.program_vocab_size = lang.vocab_size();
  m.visual_vocab_size = vislang::Tokenizer(config.world.q, config.world.m).vocab_size();
  m.train_count = data.train.size();
  m.test_count = data.test.size();
  m.train_sha256 = sha256_hex(serialize_split(data.train));
  m.test_sha256 = sha256_hex(serialize_split(data.test));
  m.content_hash = sha256_hex(m.train_sha256 + m.test_sha256);
  return data;
}

std::string entry_to_json_line(const Entry& e) {
  json demos = json::array();
  for (const exec::Demonstration& d : e.demos) {
    json steps = json::array();
    for (const exec::Step& s : d.steps) steps.push_back(json::array({s.percepts.to_string(), s.action}));
    demos.push_back({{"seed", d.episode_seed},
                     {"terminated", termination_name(d.terminated)},
                     {"steps", std::move(steps)}});
  }
  json j{{"index", e.index}, {"program", e.program_text}, {"tokens", e.program_tokens},
         {"demos", std::move(demos)}};
  return j.dump();
}

Entry entry_from_json_line(const std::string& line) {
  try {
    const json j = json::parse(line);
    Entry e;
    e.index = j.at("index").get<std::uint64_t>();
    e.program_text = j.at("program").get<std::string>();
    e.program_tokens = j.at("tokens").get<std::vector<int>>();
    for (const json& d : j.at("demos")) {
      exec::Demonstration demo;
      demo.episode_seed = d.at("seed").get<std::uint64_t>();
      demo.terminated = termination_from(d.at("terminated").get<std::string>());
      for (const json& s : d.at("steps")) {
        demo.steps.push_back({world::PerceptVector::from_string(s.at(0).get<std::string>()),
                              s.at(1).get<int>()});
      }
      e.demos.push_back(std::move(demo));
    }
    return e;
  } catch (const json::exception& ex) {
    throw CorruptDataset(std::string("malformed entry: ") + ex.what());
  } catch (const RangeError& ex) {
    throw CorruptDataset(std::string("malformed entry: ") + ex.what());
  }
}

std::string config_hash(const DatasetConfig& config) {
  return sha256_hex(json(config).dump());
}

void write_dataset(const std::filesystem::path& dir, const Dataset& data) {
  const std::string train = serialize_split(data.train);
  const std::string test = serialize_split(data.test);
  if (sha256_hex(train) != data.manifest.train_sha256 || sha256_hex(test) != data.manifest.test_sha256)
    throw Error("dataset manifest does not describe its entries");
  io::write_file_atomic(dir / "train.jsonl.gz", io::gzip_compress(train));
  io::write_file_atomic(dir / "test.jsonl.gz", io::gzip_compress(test));
  // Manifest last: its presence marks a complete dataset.
  io::write_file_atomic(dir / "manifest.json", manifest_to_json(data.manifest).dump(2) + "\n");
}

Manifest load_manifest(const std::filesystem::path& dir) {
  json j;
  try {
    j = json::parse(io::read_file(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw CorruptDataset(std::string("manifest is not valid JSON: ") + e.what());
  }
  try {
    Manifest m = manifest_from_json(j);
    if (m.tokenizer != vislang::kConventionId)
      throw VersionMismatch("dataset tokenizer '" + m.tokenizer + "' is not " +
                            vislang::kConventionId);
    if (config_hash(m.config) != m.config_hash)
      throw CorruptDataset("manifest config hash does not match its config");
    if (sha256_hex(m.train_sha256 + m.test_sha256) != m.content_hash)
      throw CorruptDataset("manifest content hash is inconsistent");
    m.config.validate();
    return m;
  } catch (const json::exception& e) {
    throw CorruptDataset(std::string("manifest is missing fields: ") + e.what());
  } catch (const ConfigError& e) {
    throw CorruptDataset(std::string("manifest config is invalid: ") + e.what());
  }
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset data;
  data.manifest = load_manifest(dir);
  const Manifest& m = data.manifest;
  data.train = load_split(dir / "train.jsonl.gz", m.train_sha256, m.train_count);
  data.test = load_split(dir / "test.jsonl.gz", m.test_sha256, m.test_count);
  const dsl::Language lang = m.config.language();
  if (lang.vocab_size() != m.program_vocab_size)
    throw VersionMismatch("program vocabulary size differs from manifest");
  std::set<std::vector<int>> train_forms;
  std::size_t n = 0;
  for (const std::vector<Entry>* split : {&data.train, &data.test}) {
    for (const Entry& e : *split) {
      // Deterministic 1% replay sample.
      validate_entry(e, m.config, lang, n % 100 == 0);
      ++n;
    }
  }
  for (const Entry& e : data.train) train_forms.insert(e.program_tokens);
  if (train_forms.size() != data.train.size())
    throw CorruptDataset("duplicate program in train split");
  for (const Entry& e : data.test)
    if (train_forms.count(e.program_tokens))
      throw CorruptDataset("test entry " + std::to_string(e.index) + " also appears in train");
  return data;
}

}  // namespace demosynth::dataset
