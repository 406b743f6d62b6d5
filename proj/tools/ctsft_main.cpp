#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "ctsft/checkpoint.hpp"
#include "ctsft/errors.hpp"
#include "ctsft/harness.hpp"

using namespace ctsft;
namespace fs = std::filesystem;

namespace {

struct Options {
  ExperimentConfig config;
  std::vector<std::string> targets;  // name:permuted_fraction:drift[:difficulty]
  std::vector<std::string> scopes;
  std::vector<std::string> rules;
  std::vector<std::string> modes;
  std::string competence_optimizer = "adam";
  std::string transfer_optimizer = "adam";
  bool no_transfer = false;
  bool no_checkpoints = false;
};

LanguageConfig parse_language(const std::string& text) {
  std::vector<std::string> parts;
  std::stringstream in(text);
  for (std::string f; std::getline(in, f, ':');) parts.push_back(f);
  if (parts.size() < 3 || parts.size() > 4) {
    throw ConfigError("language '" + text + "' must read name:permuted_fraction:drift[:difficulty]");
  }
  return {parts[0], std::stod(parts[1]), std::stod(parts[2]), parts.size() == 4 ? parts[3] : parts[0]};
}

void add_experiment_options(CLI::App& app, Options& o) {
  auto& c = o.config;
  app.add_option("--id", c.id, "Experiment id written to every row")->capture_default_str();
  app.add_option("--out", c.output_dir, "Output directory")->capture_default_str();
  app.add_option("--layers", c.n_layers)->capture_default_str();
  app.add_option("--heads", c.n_heads)->capture_default_str();
  app.add_option("--d-model", c.d_model)->capture_default_str();
  app.add_option("--d-mlp", c.d_mlp)->capture_default_str();
  app.add_option("--init-scale", c.init_scale)->capture_default_str();
  app.add_option("--classes", c.n_classes)->capture_default_str();
  app.add_option("--content-vocab", c.content_vocab)->capture_default_str();
  app.add_option("--keywords-per-class", c.keywords_per_class)->capture_default_str();
  app.add_option("--keyword-rate", c.keyword_rate)->capture_default_str();
  app.add_option("--min-length", c.min_length)->capture_default_str();
  app.add_option("--max-length", c.max_length)->capture_default_str();
  app.add_option("--target", o.targets, "Target language name:permuted_fraction:drift[:difficulty]");
  app.add_option("--pool-discovery", c.pools.discovery)->capture_default_str();
  app.add_option("--pool-heldout", c.pools.heldout_tuning)->capture_default_str();
  app.add_option("--pool-validation", c.pools.validation)->capture_default_str();
  app.add_option("--pool-test", c.pools.test)->capture_default_str();
  app.add_option("--n-src", c.n_src)->capture_default_str();
  app.add_option("--competence-lr", c.competence.learning_rate)->capture_default_str();
  app.add_option("--competence-epochs", c.competence.epochs)->capture_default_str();
  app.add_option("--competence-batch", c.competence.batch_size)->capture_default_str();
  app.add_option("--competence-optimizer", o.competence_optimizer)->capture_default_str();
  app.add_option("--transfer-lr", c.transfer.learning_rate)->capture_default_str();
  app.add_option("--transfer-epochs", c.transfer.epochs)->capture_default_str();
  app.add_option("--transfer-batch", c.transfer.batch_size)->capture_default_str();
  app.add_option("--transfer-optimizer", o.transfer_optimizer)->capture_default_str();
  app.add_option("--train-final-ln", c.transfer.final_layer_norm)->capture_default_str();
  app.add_option("--sizes", c.tuning_sizes, "Tuning set sizes")->capture_default_str();
  app.add_option("--scopes", o.scopes, "full circuit random least_relevant near_zero");
  app.add_option("--rules", o.rules, "directional magnitude");
  app.add_option("--ps", c.ps, "Selection ratios")->capture_default_str();
  app.add_option("--depths", c.depths, "Circuit depths")->capture_default_str();
  app.add_option("--seeds", c.seeds)->capture_default_str();
  app.add_option("--modes", o.modes, "Discovery pool modes: heldout shared");
  app.add_option("--discovery-inputs", c.discovery_inputs)->capture_default_str();
  app.add_option("--mean-set", c.mean_set)->capture_default_str();
  app.add_flag("--no-transfer", o.no_transfer, "Skip the tuning grid");
  app.add_flag("--no-checkpoints", o.no_checkpoints, "Do not store tuned checkpoints");
  app.add_option("--workers", c.workers)->capture_default_str();
}

ExperimentConfig finish(Options& o) {
  auto& c = o.config;
  if (!o.targets.empty()) {
    c.targets.clear();
    for (const auto& t : o.targets) c.targets.push_back(parse_language(t));
  }
  if (!o.scopes.empty()) {
    c.scopes.clear();
    for (const auto& s : o.scopes) c.scopes.push_back(parse_scope(s));
  }
  if (!o.rules.empty()) {
    c.rules.clear();
    for (const auto& r : o.rules) c.rules.push_back(parse_scoring_rule(r));
  }
  if (!o.modes.empty()) {
    c.modes.clear();
    for (const auto& m : o.modes) c.modes.push_back(parse_discovery_mode(m));
  }
  c.competence.optimizer = parse_optimizer(o.competence_optimizer);
  c.transfer.optimizer = parse_optimizer(o.transfer_optimizer);
  c.run_transfer = !o.no_transfer;
  c.save_checkpoints = !o.no_checkpoints;
  c.validate();
  return c;
}

// Theta1 from a checkpoint when given, otherwise recomputed from the seed.
SeedData seed_data(const ExperimentConfig& c, std::uint64_t seed, const std::string& checkpoint) {
  if (checkpoint.empty()) return prepare_seed(c, seed);
  auto d = generate_seed_data(c, seed);
  auto loaded = load_checkpoint(checkpoint);
  if (config_entries(loaded.config()) != config_entries(d.base.config())) {
    throw ConfigError("checkpoint " + checkpoint + " does not match the configured model");
  }
  d.theta1 = std::move(loaded);
  return d;
}

const LanguageData& language(const SeedData& d, const std::string& name) {
  return name == d.source.config.name ? d.source : d.target(name);
}

const TaggedPool& pool(const LanguageData& l, const std::string& name) {
  if (name == "discovery") return l.pools.discovery;
  if (name == "heldout") return l.pools.heldout_tuning;
  if (name == "validation") return l.pools.validation;
  if (name == "test") return l.pools.test;
  throw ConfigError("unknown pool '" + name + "'");
}

void print_evaluation(const std::string& what, const Evaluation& e) {
  std::printf("%s: n=%d accuracy=%.4f mean_margin=%.4f\n", what.c_str(), e.n, e.accuracy, e.mean_margin);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Circuit-targeted fine-tuning lab"};
  app.set_config("--config", "", "Read options from an INI or TOML file");
  app.require_subcommand(1);
  app.fallthrough();
  Options opts;
  add_experiment_options(app, opts);

  std::uint64_t seed = kDefaultSeeds[0];
  std::string target = "hard";
  std::string checkpoint;
  std::string circuit_file;
  std::string mode = "heldout";
  std::string rule = "directional";
  std::string scope = "circuit";
  std::string lang;
  std::string pool_name = "test";
  std::string csv;
  double p = 0.1;
  int depth = 2;
  int n = 25;
  bool stability = false;
  fs::path dest;

  auto* gen = app.add_subcommand("gen-data", "Write every language's pools as TSV");
  gen->add_option("--seed", seed)->capture_default_str();
  gen->add_option("--dest", dest, "Directory for the datasets")->required();

  auto* comp = app.add_subcommand("competence-tune", "Tune the base model on the source language");
  comp->add_option("--seed", seed)->capture_default_str();
  comp->add_option("--dest", dest, "Directory for theta1")->required();

  auto* disc = app.add_subcommand("discover", "Discover a circuit on a target language");
  disc->add_option("--seed", seed)->capture_default_str();
  disc->add_option("--language", target, "Target language")->capture_default_str();
  disc->add_option("--checkpoint", checkpoint, "theta1 manifest (recomputed when omitted)");
  disc->add_option("--mode", mode)->capture_default_str();
  disc->add_option("--rule", rule)->capture_default_str();
  disc->add_option("--p", p)->capture_default_str();
  disc->add_option("--max-depth", depth)->capture_default_str();
  disc->add_option("--dest", dest, "Directory for the circuit, means and score dump")->required();

  auto* tune = app.add_subcommand("ct-sft", "Tune theta1 on a target language under a scope");
  tune->add_option("--seed", seed)->capture_default_str();
  tune->add_option("--language", target)->capture_default_str();
  tune->add_option("--checkpoint", checkpoint, "theta1 manifest (recomputed when omitted)");
  tune->add_option("--circuit", circuit_file, "Circuit file from discover");
  tune->add_option("--scope", scope)->capture_default_str();
  tune->add_option("--depth", depth)->capture_default_str();
  tune->add_option("--n", n)->capture_default_str();
  tune->add_option("--dest", dest, "Directory for the tuned checkpoint")->required();

  auto* eval = app.add_subcommand("evaluate", "Accuracy and margin of a checkpoint on one pool");
  eval->add_option("--seed", seed)->capture_default_str();
  eval->add_option("--checkpoint", checkpoint)->required();
  eval->add_option("--language", lang, "Language name (default: source)");
  eval->add_option("--pool", pool_name)->capture_default_str();

  auto* faith = app.add_subcommand("faithfulness", "Faithfulness of a circuit on the validation pool");
  faith->add_option("--seed", seed)->capture_default_str();
  faith->add_option("--language", target)->capture_default_str();
  faith->add_option("--checkpoint", checkpoint, "theta1 manifest (recomputed when omitted)");
  faith->add_option("--circuit", circuit_file)->required();
  faith->add_option("--depth", depth)->capture_default_str();
  faith->add_option("--mode", mode)->capture_default_str();

  auto* sweep = app.add_subcommand("sweep", "Run the full grid and write results.csv");

  RetentionSelector selector;
  auto* report = app.add_subcommand("report", "Forgetting table from a results CSV, or the iteration-0 table");
  report->add_option("--csv", csv, "results.csv from sweep");
  report->add_option("--rule", selector.rule)->capture_default_str();
  report->add_option("--p", selector.p)->capture_default_str();
  report->add_option("--depth", selector.depth)->capture_default_str();
  report->add_flag("--stability", stability, "Compute the iteration-0 table under both discovery modes");

  CLI11_PARSE(app, argc, argv);

  try {
    const auto config = finish(opts);

    if (gen->parsed()) {
      const auto d = generate_seed_data(config, seed);
      std::vector<const LanguageData*> langs{&d.source};
      for (const auto& t : d.targets) langs.push_back(&t);
      for (const auto* l : langs) {
        for (const auto* pl : {&l->pools.discovery, &l->pools.heldout_tuning, &l->pools.validation, &l->pools.test}) {
          const auto path = dest / (l->config.name + "." + to_string(pl->kind) + ".tsv");
          write_dataset(path, pl->examples);
          std::printf("%s: %zu examples, hash %s\n", path.c_str(), pl->examples.size(),
                      examples_hash(pl->examples).c_str());
        }
      }
      return 0;
    }

    if (comp->parsed()) {
      const auto d = prepare_seed(config, seed);
      fs::create_directories(dest);
      save_checkpoint(d.theta1, dest / "theta1.manifest");
      write_run_record(dest / "competence.txt", d.competence);
      std::printf("theta1 %s\n", checkpoint_hash(d.theta1).c_str());
      print_evaluation(d.source.config.name + " test", evaluate(d.theta1, d.source.pools.test.examples));
      for (const auto& t : d.targets) print_evaluation(t.config.name + " test", evaluate(d.theta1, t.pools.test.examples));
      return 0;
    }

    if (disc->parsed()) {
      const auto d = seed_data(config, seed, checkpoint);
      const auto& t = d.target(target);
      const auto setup = discovery_setup(config, d, t, parse_discovery_mode(mode));
      CircuitConfig cc;
      cc.rule = parse_scoring_rule(rule);
      cc.p = p;
      cc.max_depth = depth;
      cc.seed = seed;
      auto circuit = discover(d.theta1, setup.means, setup.inputs, cc);
      circuit.provenance.checkpoint = checkpoint_hash(d.theta1);
      circuit.provenance.inputs = examples_hash(setup.examples);
      fs::create_directories(dest);
      write_circuit(dest / "circuit.txt", circuit);
      save_means(setup.means, circuit.provenance.checkpoint, dest / "means.txt");
      std::ofstream dump(dest / "readout_scores.tsv");
      write_score_dump(dump, score_readout(d.theta1, setup.means, setup.inputs, all_heads(d.theta1.config()), cc.rule));
      if (setup.short_of_target) std::printf("warning: fewer than %d correct discovery inputs\n", config.discovery_inputs);
      for (std::size_t k = 0; k < circuit.depths.size(); ++k) {
        std::printf("depth %zu:", k);
        for (const auto& h : circuit.depths[k]) std::printf(" %s(%.4g)", to_string(h.head).c_str(), h.score);
        std::printf("\n");
      }
      std::printf("stop: %s\n", circuit.stop_reason.c_str());
      return 0;
    }

    if (tune->parsed()) {
      const auto d = seed_data(config, seed, checkpoint);
      const auto& t = d.target(target);
      const auto sc = parse_scope(scope);
      std::vector<HeadId> heads;
      if (sc != Scope::full) {
        if (circuit_file.empty()) throw ConfigError("--circuit is required unless --scope full");
        const auto circuit = read_circuit(circuit_file);
        heads = circuit.heads_through(depth);
        if (sc != Scope::circuit) {
          const auto kind = sc == Scope::random           ? ControlKind::random
                            : sc == Scope::least_relevant ? ControlKind::least_relevant
                                                          : ControlKind::near_zero;
          heads = control_selection(kind, circuit.readout_scores, static_cast<int>(heads.size()), seed);
        }
      }
      if (n > static_cast<int>(t.pools.heldout_tuning.examples.size())) throw ConfigError("--n exceeds the held-out pool");
      auto tc = config.transfer;
      tc.seed = derive_seed(seed, "transfer/" + target + "/" + std::to_string(n));
      const auto res = ct_sft(d.theta1, heads, sc, std::span(t.pools.heldout_tuning.examples).first(n), tc);
      for (const auto& m : res.record.epochs) std::printf("epoch %d: loss %.5f (%d steps)\n", m.epoch, m.mean_loss, m.steps);
      fs::create_directories(dest);
      save_checkpoint(res.params, dest / "tuned.manifest");
      write_run_record(dest / "run.txt", res.record);
      std::printf("trainable %zu of %zu (%.4f)\n", res.record.trainable, res.record.total,
                  res.record.trainable_fraction());
      print_evaluation(target + " test", evaluate(res.params, t.pools.test.examples));
      print_evaluation(d.source.config.name + " test", evaluate(res.params, d.source.pools.test.examples));
      return 0;
    }

    if (eval->parsed()) {
      const auto d = seed_data(config, seed, checkpoint);
      const auto& l = language(d, lang.empty() ? d.source.config.name : lang);
      const auto& pl = pool(l, pool_name);
      print_evaluation(l.config.name + " " + to_string(pl.kind), evaluate(d.theta1, pl.examples));
      return 0;
    }

    if (faith->parsed()) {
      const auto d = seed_data(config, seed, checkpoint);
      const auto& t = d.target(target);
      const auto setup = discovery_setup(config, d, t, parse_discovery_mode(mode));
      const auto circuit = read_circuit(circuit_file);
      const auto rep = measure_faithfulness(d.theta1, setup.means, circuit.heads_through(depth), t.pools.validation);
      std::printf("circuit %zu heads through depth %d\n", rep.circuit_size, depth);
      std::printf("accuracy_faithfulness %.4f\nmargin_faithfulness %.4f%s (skipped %d of %d)\n", rep.accuracy,
                  rep.margin, rep.margin_degenerate ? " degenerate" : "", rep.margin_skipped, rep.n);
      return 0;
    }

    if (sweep->parsed()) {
      const auto s = run_experiment(config);
      std::printf("%d cells (%d reused), %zu rows -> %s\n", s.cells, s.reused, s.rows.size(), s.csv.c_str());
      for (const auto& f : s.failures) std::fprintf(stderr, "failed: %s: %s\n", f.cell.c_str(), f.message.c_str());
      return s.failures.empty() ? 0 : 1;
    }

    if (report->parsed()) {
      if (stability) {
        write_stability(std::cout, iteration0_stability(config));
        return 0;
      }
      if (csv.empty()) throw ConfigError("report needs --csv or --stability");
      std::printf("target\tscope\tn\tseeds\tmean_delta\n");
      for (const auto& r : forgetting_report(read_csv(csv), selector)) {
        std::printf("%s\t%s\t%d\t%zu\t%+.4f\n", r.target.c_str(), r.scope.c_str(), r.n, r.seeds.size(), r.mean_delta);
      }
      return 0;
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
