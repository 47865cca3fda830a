// demosynth: dataset generation, training, evaluation and developer utilities.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "demosynth/config.hpp"
#include "demosynth/dataset.hpp"
#include "demosynth/error.hpp"
#include "demosynth/eval.hpp"
#include "demosynth/exec.hpp"
#include "demosynth/io.hpp"
#include "demosynth/train.hpp"
#include "demosynth/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace demosynth;

namespace {

struct ConfigFlags {
  std::string file;
  std::vector<std::string> overrides;

  void attach(CLI::App* app) {
    app->add_option("--config", file, "TOML config file")->check(CLI::ExistingFile);
    app->add_option("--set", overrides, "Config override key=value (repeatable)");
  }

  // defaults < DEMOSYNTH_SEED < file < --set < explicit flags (applied by the caller).
  config::ExperimentConfig resolve(std::vector<std::string> flag_overrides = {}) const {
    json base = config::to_json(config::ExperimentConfig{});
    if (const char* env = std::getenv("DEMOSYNTH_SEED")) {
      config::merge_strict(base, config::parse_override(std::string("dataset.seed=") + env));
      config::merge_strict(base, config::parse_override(std::string("train.seed=") + env));
      config::merge_strict(base, config::parse_override(std::string("noise.seed=") + env));
    }
    if (!file.empty()) {
      try {
        config::merge_strict(base, config::parse_toml(io::read_file(file)));
      } catch (const ConfigError& e) {
        throw ConfigError(file + ": " + e.what());
      }
    }
    for (const std::string& o : overrides) config::merge_strict(base, config::parse_override(o));
    for (const std::string& o : flag_overrides) config::merge_strict(base, config::parse_override(o));
    return config::from_json(base);
  }
};

template <class T>
std::string num(const T& v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

std::vector<dataset::Entry> select_split(const dataset::Dataset& d, const std::string& split,
                                         std::uint64_t limit) {
  std::vector<dataset::Entry> e = split == "train" ? d.train : d.test;
  if (limit > 0 && e.size() > limit) e.resize(limit);
  return e;
}

eval::EvalOptions eval_options(const config::ExperimentConfig& c, int jobs) {
  eval::EvalOptions o;
  o.rules.depth = c.eval.closure_depth;
  o.rules.cap = c.eval.closure_cap;
  o.rules.commute = c.eval.commute;
  o.behavioral_trials = c.eval.behavioral_trials;
  o.decode.beam_width = c.eval.beam_width;
  o.noise = c.noise;
  o.jobs = jobs;
  return o;
}

train::TrainState load_matching_checkpoint(const fs::path& ckpt, const dataset::Manifest& m) {
  train::TrainState s = train::load_checkpoint(ckpt);
  if (s.dataset_config_hash != m.config_hash)
    throw ConfigError("checkpoint was trained on dataset config " + s.dataset_config_hash +
                      " but the dataset has " + m.config_hash);
  return s;
}

std::vector<double> parse_doubles(const std::string& list) {
  std::vector<double> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw CLI::ValidationError("--epsilons", "bad number '" + item + "'");
    out.push_back(v);
  }
  return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& list) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos)
      throw CLI::ValidationError("--seeds", "bad seed '" + item + "'");
    out.push_back(std::stoull(item));
  }
  return out;
}

dsl::Program read_program(const dsl::Language& lang, const std::string& path) {
  return lang.parse(io::read_file(path));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Program synthesis from demonstrations"};
  app.require_subcommand(1);
  ConfigFlags cfg;

  // gen
  CLI::App* gen = app.add_subcommand("gen", "Generate a dataset");
  cfg.attach(gen);
  std::uint64_t gen_train = 0, gen_test = 0, gen_seed = 0;
  int gen_k = 0, jobs = 1;
  std::string out_dir;
  auto* gen_train_opt = gen->add_option("--train", gen_train, "Training programs");
  auto* gen_test_opt = gen->add_option("--test", gen_test, "Test programs");
  auto* gen_k_opt = gen->add_option("--k", gen_k, "Demonstrations per program")->check(CLI::PositiveNumber);
  auto* gen_seed_opt = gen->add_option("--seed", gen_seed, "Dataset seed");
  gen->add_option("--out", out_dir, "Output directory")->required();
  gen->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);

  // train
  CLI::App* tr = app.add_subcommand("train", "Train the program generator");
  cfg.attach(tr);
  std::string data_dir;
  std::uint64_t tr_seed = 0;
  int tr_steps = 0;
  bool resume = false, quiet = false;
  tr->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  tr->add_option("--out", out_dir, "Checkpoint directory")->required();
  auto* tr_seed_opt = tr->add_option("--seed", tr_seed, "Training seed");
  auto* tr_steps_opt = tr->add_option("--steps", tr_steps, "Total optimizer steps");
  tr->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);
  tr->add_flag("--resume", resume, "Continue from <out>/last.ckpt");
  tr->add_flag("--quiet", quiet, "Do not echo metrics to stdout");

  // eval
  CLI::App* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  cfg.attach(ev);
  std::string ckpt, report_path, split = "test";
  double noise = 0.0;
  std::uint64_t ev_seed = 0, limit = 0;
  int beam = 0;
  ev->add_option("--ckpt", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  auto* noise_opt = ev->add_option("--noise", noise, "Perception noise rate")->check(CLI::Range(0.0, 1.0));
  auto* ev_seed_opt = ev->add_option("--seed", ev_seed, "Noise seed");
  auto* beam_opt = ev->add_option("--beam", beam, "Beam width (1 = greedy)")->check(CLI::PositiveNumber);
  ev->add_option("--split", split, "train or test")->check(CLI::IsMember({"train", "test"}));
  ev->add_option("--limit", limit, "Evaluate only the first N entries");
  ev->add_option("--report", report_path, "Write the JSON report here");
  ev->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);

  // ablate
  CLI::App* ab = app.add_subcommand("ablate", "Noise ablation table");
  cfg.attach(ab);
  std::string epsilons = "0,0.1,0.2", seeds = "1,2,3";
  ab->add_option("--ckpt", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  ab->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  ab->add_option("--epsilons", epsilons, "Comma-separated noise rates");
  ab->add_option("--seeds", seeds, "Comma-separated noise seeds");
  auto* ab_beam_opt = ab->add_option("--beam", beam, "Beam width (1 = greedy)")->check(CLI::PositiveNumber);
  ab->add_option("--split", split, "train or test")->check(CLI::IsMember({"train", "test"}));
  ab->add_option("--limit", limit, "Evaluate only the first N entries");
  ab->add_option("--report", report_path, "Write the JSON table here");
  ab->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);

  // vocab
  CLI::App* vo = app.add_subcommand("vocab", "Print the program and visual vocabularies");
  cfg.attach(vo);
  std::string format = "text";
  vo->add_option("--format", format, "text or json")->check(CLI::IsMember({"text", "json"}));

  // alias-check
  CLI::App* ac = app.add_subcommand("alias-check", "Compare two programs");
  cfg.attach(ac);
  std::string prog_a, prog_b;
  ac->add_option("program_a", prog_a, "Ground-truth program file")->required()->check(CLI::ExistingFile);
  ac->add_option("program_b", prog_b, "Predicted program file")->required()->check(CLI::ExistingFile);

  // run-program
  CLI::App* rp = app.add_subcommand("run-program", "Run a program and print its trace");
  cfg.attach(rp);
  std::string prog_file;
  std::uint64_t rp_seed = 0;
  int rp_steps = 50;
  rp->add_option("--file", prog_file, "Program file")->required()->check(CLI::ExistingFile);
  rp->add_option("--seed", rp_seed, "Episode seed");
  rp->add_option("--steps", rp_steps, "Step budget")->check(CLI::PositiveNumber);

  CLI::App* ver = app.add_subcommand("version", "Print version information");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen) {
      std::vector<std::string> fo;
      if (*gen_seed_opt) fo.push_back("dataset.seed=" + num(gen_seed));
      if (*gen_k_opt) fo.push_back("dataset.k=" + num(gen_k));
      if (*gen_train_opt) fo.push_back("n_train=" + num(gen_train));
      if (*gen_test_opt) fo.push_back("n_test=" + num(gen_test));
      const config::ExperimentConfig c = cfg.resolve(fo);
      fs::create_directories(out_dir);
      io::DirLock lock(out_dir);
      const dataset::Dataset d = dataset::build_dataset(c.n_train, c.n_test, c.dataset, jobs);
      dataset::write_dataset(out_dir, d);
      const dataset::GenerationStats& s = d.manifest.stats;
      std::cout << json{{"out", out_dir},
                        {"config_hash", d.manifest.config_hash},
                        {"train", d.manifest.train_count},
                        {"test", d.manifest.test_count},
                        {"candidates", s.candidates},
                        {"duplicates", s.duplicates},
                        {"unsatisfiable", s.unsatisfiable},
                        {"too_long", s.too_long}}
                       .dump()
                << "\n";
      return 0;
    }

    if (*tr) {
      std::vector<std::string> fo;
      if (*tr_seed_opt) fo.push_back("train.seed=" + num(tr_seed));
      if (*tr_steps_opt) fo.push_back("train.steps=" + num(tr_steps));
      fo.push_back("train.jobs=" + num(jobs));
      const config::ExperimentConfig c = cfg.resolve(fo);
      const dataset::Dataset d = dataset::load_dataset(data_dir);
      fs::create_directories(out_dir);
      io::DirLock lock(out_dir);
      const model::ModelConfig mc = train::model_config_for(d.manifest, c.model);
      const auto [tr_entries, val_entries] =
          train::split_validation(d.train, c.train.val_fraction, c.train.seed);
      const vislang::Tokenizer tok(d.manifest.config.world.q, d.manifest.config.world.m);
      const auto train_set = train::make_examples(tr_entries, tok);
      const auto val_set = train::make_examples(val_entries, tok);
      train::TrainState state = [&] {
        if (resume) {
          train::TrainState s = load_matching_checkpoint(fs::path(out_dir) / "last.ckpt", d.manifest);
          if (!(s.params.config == mc)) throw ConfigError("checkpoint model config differs from the resolved config");
          s.config.steps = c.train.steps;
          s.config.jobs = c.train.jobs;
          return s;
        }
        return train::init_state(mc, c.train, d.manifest.config_hash);
      }();
      config::ExperimentConfig resolved = c;
      resolved.model = mc;
      resolved.dataset = d.manifest.config;
      io::write_file_atomic(fs::path(out_dir) / "config.json", config::to_json(resolved).dump(2) + "\n");
      train::TrainOptions opts;
      opts.out_dir = out_dir;
      opts.percept_bits = d.manifest.config.world.q;
      if (!quiet) opts.on_metrics = [](const train::Metrics& m) { std::cout << train::metrics_to_json(m) << std::endl; };
      train::train(state, train_set, val_set, opts);
      return 0;
    }

    if (*ev || *ab) {
      std::vector<std::string> fo;
      if (*noise_opt) fo.push_back("noise.epsilon=" + num(noise));
      if (*ev_seed_opt) fo.push_back("noise.seed=" + num(ev_seed));
      if (*beam_opt || *ab_beam_opt) fo.push_back("eval.beam_width=" + num(beam));
      const config::ExperimentConfig c = cfg.resolve(fo);
      const dataset::Dataset d = dataset::load_dataset(data_dir);
      const train::TrainState state = load_matching_checkpoint(ckpt, d.manifest);
      const auto entries = select_split(d, split, limit);
      const eval::EvalOptions opts = eval_options(c, jobs);
      json out;
      if (*ev) {
        const eval::EvalReport r = eval::evaluate(state.params, entries, d.manifest.config, opts);
        out = eval::report_to_json(r);
        out["checkpoint_step"] = state.step;
        out["dataset_config_hash"] = d.manifest.config_hash;
        out["split"] = split;
        std::cout << "n=" << r.n << " exact=" << eval::fixed(r.acc_exact(), 4)
                  << " alias=" << eval::fixed(r.acc_alias(), 4)
                  << " parse_failures=" << r.parse_failure_count << "\n";
      } else {
        const auto rows = eval::ablate(state.params, entries, d.manifest.config, opts,
                                       parse_doubles(epsilons), parse_seeds(seeds));
        out = {{"checkpoint_step", state.step},
               {"dataset_config_hash", d.manifest.config_hash},
               {"split", split},
               {"rows", eval::ablation_to_json(rows)}};
        std::cout << eval::ablation_to_text(rows);
      }
      if (!report_path.empty()) io::write_file_atomic(report_path, out.dump(2) + "\n");
      return 0;
    }

    if (*vo) {
      const config::ExperimentConfig c = cfg.resolve();
      const dsl::Language lang = c.dataset.language();
      const vislang::Tokenizer tok(c.dataset.world.q, c.dataset.world.m);
      if (format == "json") {
        json tokens = json::array();
        for (int i = 0; i < lang.vocab_size(); ++i) tokens.push_back(lang.token_text(i));
        std::cout << json{{"program_vocab", tokens},
                          {"program_vocab_size", lang.vocab_size()},
                          {"visual_vocab_size", tok.vocab_size()},
                          {"visual_convention", vislang::kConventionId}}
                         .dump(2)
                  << "\n";
      } else {
        for (int i = 0; i < lang.vocab_size(); ++i) std::cout << i << "\t" << lang.token_text(i) << "\n";
        std::cout << "visual vocabulary: " << tok.vocab_size() << " (" << vislang::kConventionId << ")\n";
      }
      return 0;
    }

    if (*ac) {
      const config::ExperimentConfig c = cfg.resolve();
      const dsl::Language lang = c.dataset.language();
      const dsl::Program a = read_program(lang, prog_a);
      const dsl::Program b = read_program(lang, prog_b);
      eval::AliasRules rules = eval_options(c, 1).rules;
      const eval::AliasVerdict v = eval::alias_match(lang.to_tokens(b), a, lang, rules);
      const bool beh = eval::behavioral_eq(a, b, c.dataset.world, c.eval.behavioral_trials,
                                           c.dataset.exec.step_budget, c.dataset.seed);
      std::cout << "exact: " << (v.exact ? "yes" : "no") << "\n"
                << "alias: " << (v.alias ? "yes" : "no") << (v.overflow ? " (fallback search)" : "") << "\n"
                << "behavioral (" << c.eval.behavioral_trials << " states): " << (beh ? "yes" : "no") << "\n";
      return 0;
    }

    if (*rp) {
      const config::ExperimentConfig c = cfg.resolve();
      const dsl::Language lang = c.dataset.language();
      const dsl::Program p = read_program(lang, prog_file);
      const world::WorldState s0 = world::init(c.dataset.world, rp_seed);
      const exec::Demonstration d = exec::run_program(p, c.dataset.world, s0, rp_steps);
      const auto& names = c.dataset.world.action_names();
      for (std::size_t t = 0; t < d.steps.size(); ++t)
        std::cout << t << "\t" << d.steps[t].percepts.to_string() << "\t"
                  << names[static_cast<std::size_t>(d.steps[t].action)] << "\n";
      std::cout << (d.terminated == exec::Termination::Completed ? "completed" : "step budget exceeded")
                << " after " << d.steps.size() << " steps\n";
      return 0;
    }

    if (*ver) {
      std::cout << "demosynth " << kVersion << " (dataset format " << dataset::kFormatVersion
                << ", checkpoint format " << train::kCheckpointVersion << ", "
                << vislang::kConventionId << ")\n";
      return 0;
    }
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
