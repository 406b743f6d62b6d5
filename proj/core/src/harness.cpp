#include "ctsft/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include "ctsft/checkpoint.hpp"
#include "ctsft/errors.hpp"
#include "ctsft/hash.hpp"

namespace ctsft {

std::string to_string(DiscoveryMode mode) { return mode == DiscoveryMode::heldout ? "heldout" : "shared"; }

DiscoveryMode parse_discovery_mode(const std::string& name) {
  if (name == "heldout") return DiscoveryMode::heldout;
  if (name == "shared") return DiscoveryMode::shared;
  throw ConfigError("unknown discovery mode '" + name + "'");
}

TrainConfig ExperimentConfig::default_competence() {
  TrainConfig c;
  c.learning_rate = 1e-2;
  return c;
}

TrainConfig ExperimentConfig::default_transfer() {
  TrainConfig c;
  c.learning_rate = 3e-2;
  return c;
}

ModelConfig ExperimentConfig::model_config(const TaskSpec& task) const {
  ModelConfig m;
  m.n_layers = n_layers;
  m.n_heads = n_heads;
  m.d_model = d_model;
  m.d_mlp = d_mlp;
  m.init_scale = init_scale;
  m.vocab_size = task.vocab_size();
  m.max_seq_len = task.max_sequence();
  m.label_tokens = task.label_tokens();
  return m;
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (id.empty() || id.find(',') != std::string::npos) fail("experiment id must be nonempty and comma-free");
  if (targets.empty()) fail("at least one target language is required");
  std::set<std::string> names{source.name};
  for (const auto& t : targets) {
    if (t.name.empty() || t.name.find_first_of(",/ \t") != std::string::npos) {
      fail("language name '" + t.name + "' must be nonempty without commas, slashes or spaces");
    }
    if (!names.insert(t.name).second) fail("duplicate language name '" + t.name + "'");
  }
  if (seeds.empty()) fail("at least one seed is required");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) fail("seeds must be distinct");
  if (n_src < 0 || n_src > pools.discovery) fail("n_src must lie in [0, discovery pool size]");
  for (int n : tuning_sizes) {
    if (n < 1 || n > pools.heldout_tuning) fail("tuning size " + std::to_string(n) + " exceeds the held-out pool");
  }
  for (int d : depths) {
    if (d < 0 || d > kMaxCircuitDepth) fail("depth " + std::to_string(d) + " outside [0, 3]");
  }
  for (double p : ps) {
    if (!(p > 0.0 && p <= 1.0)) fail("selection ratio p must lie in (0, 1]");
  }
  if (rules.empty() || modes.empty()) fail("at least one scoring rule and one discovery mode are required");
  if (discovery_inputs < 1 || mean_set < n_classes) fail("discovery_inputs must be positive and mean_set >= n_classes");
  if (workers < 1) fail("workers must be positive");
  competence.validate();
  transfer.validate();
}

std::uint64_t derive_seed(std::uint64_t seed, const std::string& tag) {
  return Fingerprint().integer(static_cast<std::int64_t>(seed)).text(tag).value();
}

const LanguageData& SeedData::target(const std::string& name) const {
  for (const auto& t : targets) {
    if (t.config.name == name) return t;
  }
  throw ConfigError("unknown target language '" + name + "'");
}

SeedData generate_seed_data(const ExperimentConfig& config, std::uint64_t seed) {
  config.validate();
  SeedData d;
  d.seed = seed;
  d.task = make_task(config.n_classes, config.content_vocab, config.keywords_per_class, config.keyword_rate,
                     config.min_length, config.max_length, derive_seed(seed, "task"));
  auto make = [&](const LanguageConfig& lc, int id) {
    LanguageData ld;
    ld.config = lc;
    ld.spec = make_language(d.task, id, lc.name, lc.permuted_fraction, lc.drift, derive_seed(seed, "language/" + lc.name));
    const auto examples =
        generate_language(d.task, ld.spec, config.pools.total(), derive_seed(seed, "data/" + lc.name));
    ld.pools = split_pools(examples, config.pools, derive_seed(seed, "pools/" + lc.name));
    return ld;
  };
  d.source = make(config.source, 0);
  for (std::size_t i = 0; i < config.targets.size(); ++i) {
    d.targets.push_back(make(config.targets[i], static_cast<int>(i) + 1));
  }
  d.base = Parameters::initialize(config.model_config(d.task), derive_seed(seed, "init"));
  d.theta1 = d.base;
  return d;
}

SeedData prepare_seed(const ExperimentConfig& config, std::uint64_t seed) {
  auto d = generate_seed_data(config, seed);
  auto tc = config.competence;
  tc.seed = derive_seed(seed, "competence");
  auto tuned = competence_tune(d.base, d.source.pools.discovery.examples, config.n_src, tc);
  d.theta1 = std::move(tuned.params);
  d.competence = std::move(tuned.record);
  return d;
}

DiscoverySetup discovery_setup(const ExperimentConfig& config, const SeedData& data, const LanguageData& target,
                               DiscoveryMode mode) {
  const auto& pool =
      mode == DiscoveryMode::heldout ? target.pools.discovery.examples : target.pools.heldout_tuning.examples;
  DiscoverySetup s;
  s.mode = mode;
  auto sel = select_discovery_inputs(data.theta1, pool, config.discovery_inputs);
  s.examples = std::move(sel.examples);
  s.short_of_target = sel.short_of_target;
  const auto mean_set = sample_balanced_mean_set(
      pool, config.n_classes, config.mean_set,
      derive_seed(data.seed, "means/" + target.config.name));
  s.means = compute_baseline_means(data.theta1, mean_set);
  s.inputs = prepare_inputs(data.theta1, s.examples);
  return s;
}

// ---------------------------------------------------------------- CSV

namespace {

std::string number(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, res.ptr};
}

double parse_number(const std::string& s, const std::string& what) {
  if (s == "-") return -1.0;
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    if (s == "nan" || s == "-nan") return std::numeric_limits<double>::quiet_NaN();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    throw IoError("malformed " + what + " '" + s + "'");
  }
  return v;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, sep)) out.push_back(field);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

}  // namespace

void write_csv(std::ostream& out, const std::vector<ResultRow>& rows) {
  out << kCsvHeader << "\n";
  for (const auto& r : rows) {
    out << r.experiment << ',' << r.phase << ',' << r.source << ',' << r.target << ',' << r.scope << ',' << r.rule
        << ',' << (r.p < 0 ? "-" : number(r.p)) << ',' << (r.depth < 0 ? "-" : std::to_string(r.depth)) << ','
        << (r.n < 0 ? "-" : std::to_string(r.n)) << ',' << r.seed << ',' << r.metric << ',' << number(r.value)
        << "\n";
  }
}

void write_csv(const std::filesystem::path& path, const std::vector<ResultRow>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  write_csv(out, rows);
}

std::vector<ResultRow> read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) throw IoError(path.string() + ": missing result header");
  std::vector<ResultRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 12) throw IoError(path.string() + ": expected 12 fields in '" + line + "'");
    ResultRow r;
    r.experiment = f[0];
    r.phase = f[1];
    r.source = f[2];
    r.target = f[3];
    r.scope = f[4];
    r.rule = f[5];
    r.p = parse_number(f[6], "p");
    r.depth = static_cast<int>(parse_number(f[7], "depth"));
    r.n = static_cast<int>(parse_number(f[8], "n"));
    r.seed = std::stoull(f[9]);
    r.metric = f[10];
    r.value = parse_number(f[11], "value");
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---------------------------------------------------------------- grid

namespace {

struct Cell {
  std::string name;
  std::filesystem::path dir;
  std::string key;
  std::vector<ResultRow> rows;
  bool failed = false;
  bool reused = false;
  std::string message;
};

std::string describe(const TrainConfig& t) {
  std::ostringstream s;
  s.precision(17);
  s << t.epochs << '/' << t.batch_size << '/' << t.learning_rate << '/' << to_string(t.optimizer) << '/' << t.beta1
    << '/' << t.beta2 << '/' << t.epsilon << '/' << t.max_steps << '/' << t.final_layer_norm;
  return s.str();
}

std::string describe_language(const LanguageConfig& l) {
  std::ostringstream s;
  s.precision(17);
  s << l.name << ':' << l.permuted_fraction << ':' << l.drift;
  return s.str();
}

std::string seed_key(const ExperimentConfig& c, std::uint64_t seed) {
  std::ostringstream s;
  s.precision(17);
  s << "v1|" << c.n_layers << ',' << c.n_heads << ',' << c.d_model << ',' << c.d_mlp << ',' << c.init_scale << '|'
    << c.n_classes << ',' << c.content_vocab << ',' << c.keywords_per_class << ',' << c.keyword_rate << ','
    << c.min_length << ',' << c.max_length << '|' << describe_language(c.source);
  for (const auto& t : c.targets) s << ';' << describe_language(t);
  s << '|' << c.pools.discovery << ',' << c.pools.heldout_tuning << ',' << c.pools.validation << ',' << c.pools.test
    << '|' << c.n_src << '|' << describe(c.competence) << '|' << seed;
  return Fingerprint().text(s.str()).hex();
}

bool key_matches(const Cell& cell) {
  std::ifstream in(cell.dir / "key");
  std::string stored;
  return in && std::getline(in, stored) && stored == cell.key && std::filesystem::exists(cell.dir / "rows.csv");
}

void commit(const Cell& cell) {
  write_csv(cell.dir / "rows.csv", cell.rows);
  std::ofstream out(cell.dir / "key", std::ios::trunc);
  out << cell.key << "\n";
}

void run_jobs(std::vector<std::function<void()>>& jobs, int workers) {
  if (workers <= 1 || jobs.size() <= 1) {
    for (auto& j : jobs) j();
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  const auto count = std::min<std::size_t>(static_cast<std::size_t>(workers), jobs.size());
  for (std::size_t w = 0; w < count; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < jobs.size(); i = next++) jobs[i]();
    });
  }
  for (auto& t : pool) t.join();
}

// Runs `body` and records a failure instead of propagating it.
void guarded(Cell& cell, const std::function<void()>& body) {
  try {
    body();
  } catch (const std::exception& e) {
    cell.failed = true;
    cell.message = e.what();
    cell.rows.clear();
  }
}

std::string p_tag(double p) { return number(p); }

ResultRow row(const ExperimentConfig& c, std::string phase, std::string target, std::string scope, std::string rule,
              double p, int depth, int n, std::uint64_t seed, std::string metric, double value) {
  return {c.id, std::move(phase), c.source.name, std::move(target), std::move(scope), std::move(rule),
          p,    depth,            n,             seed,              std::move(metric), value};
}

HeadId top_of(const std::map<HeadId, double>& scores) {
  RelevanceTable t;
  t.scores = scores;
  return t.ranked().front();
}

ControlKind control_of(Scope s) {
  switch (s) {
    case Scope::random:
      return ControlKind::random;
    case Scope::least_relevant:
      return ControlKind::least_relevant;
    default:
      return ControlKind::near_zero;
  }
}

struct DiscoveryCell {
  Cell cell;
  std::size_t seed_index = 0;
  std::size_t target_index = 0;
  DiscoveryMode mode = DiscoveryMode::heldout;
  std::map<std::pair<ScoringRule, double>, Circuit> circuits;
};

std::filesystem::path circuit_path(const std::filesystem::path& dir, ScoringRule rule, double p) {
  return dir / ("circuit-" + to_string(rule) + "-p" + p_tag(p) + ".txt");
}

}  // namespace

RunSummary run_experiment(const ExperimentConfig& config) {
  config.validate();
  const auto cells_root = config.output_dir / "cells";
  const int max_depth = *std::max_element(config.depths.begin(), config.depths.end());

  // Competence tuning per seed.
  std::vector<Cell> seed_cells(config.seeds.size());
  std::vector<std::optional<SeedData>> seed_data(config.seeds.size());
  std::vector<std::function<void()>> jobs;
  for (std::size_t si = 0; si < config.seeds.size(); ++si) {
    auto& cell = seed_cells[si];
    const auto seed = config.seeds[si];
    cell.name = "seed-" + std::to_string(seed) + "/competence";
    cell.dir = cells_root / ("seed-" + std::to_string(seed)) / "competence";
    cell.key = seed_key(config, seed);
    jobs.emplace_back([&, si, seed] {
      guarded(cell, [&] {
        std::filesystem::create_directories(cell.dir);
        if (key_matches(cell) && std::filesystem::exists(cell.dir / "theta1.manifest")) {
          auto d = generate_seed_data(config, seed);
          d.theta1 = load_checkpoint(cell.dir / "theta1.manifest");
          d.competence = read_run_record(cell.dir / "competence.txt");
          cell.rows = read_csv(cell.dir / "rows.csv");
          cell.reused = true;
          seed_data[si] = std::move(d);
          return;
        }
        auto d = prepare_seed(config, seed);
        write_dataset(cell.dir / "data" / (d.source.config.name + ".test.tsv"), d.source.pools.test.examples);
        for (const auto& lang : d.targets) {
          write_dataset(cell.dir / "data" / (lang.config.name + ".heldout.tsv"), lang.pools.heldout_tuning.examples);
        }
        save_checkpoint(d.theta1, cell.dir / "theta1.manifest");
        write_run_record(cell.dir / "competence.txt", d.competence);
        const auto src = evaluate(d.theta1, d.source.pools.test.examples);
        cell.rows.push_back(row(config, "competence", "-", "full", "-", -1, -1, config.n_src, seed,
                                "acc_source_test", src.accuracy));
        cell.rows.push_back(row(config, "competence", "-", "full", "-", -1, -1, config.n_src, seed,
                                "margin_source_test", src.mean_margin));
        for (const auto& t : d.targets) {
          const auto ev = evaluate(d.theta1, t.pools.test.examples);
          cell.rows.push_back(row(config, "competence", t.config.name, "full", "-", -1, -1, config.n_src, seed,
                                  "acc_target_test", ev.accuracy));
        }
        commit(cell);
        seed_data[si] = std::move(d);
      });
    });
  }
  run_jobs(jobs, config.workers);

  // Discovery, circuits and faithfulness per (seed, target, mode).
  std::vector<DiscoveryCell> disc;
  for (std::size_t si = 0; si < config.seeds.size(); ++si) {
    for (std::size_t ti = 0; ti < config.targets.size(); ++ti) {
      for (auto mode : config.modes) {
        DiscoveryCell dc;
        dc.seed_index = si;
        dc.target_index = ti;
        dc.mode = mode;
        const auto seed = config.seeds[si];
        const auto& tname = config.targets[ti].name;
        dc.cell.name = "seed-" + std::to_string(seed) + "/" + tname + "/" + to_string(mode) + "/discovery";
        dc.cell.dir = cells_root / ("seed-" + std::to_string(seed)) / tname / to_string(mode) / "discovery";
        std::ostringstream k;
        k.precision(17);
        k << seed_cells[si].key << '|' << tname << '|' << to_string(mode) << '|' << config.discovery_inputs << ','
          << config.mean_set << '|' << max_depth;
        for (auto r : config.rules) k << ',' << to_string(r);
        for (double p : config.ps) k << ',' << p;
        for (int d : config.depths) k << ",d" << d;
        dc.cell.key = Fingerprint().text(k.str()).hex();
        disc.push_back(std::move(dc));
      }
    }
  }
  jobs.clear();
  for (auto& dc : disc) {
    jobs.emplace_back([&] {
      auto& cell = dc.cell;
      if (seed_cells[dc.seed_index].failed) {
        cell.failed = true;
        cell.message = "depends on failed cell " + seed_cells[dc.seed_index].name;
        return;
      }
      guarded(cell, [&] {
        std::filesystem::create_directories(cell.dir);
        if (key_matches(cell)) {
          for (auto rule : config.rules) {
            for (double p : config.ps) dc.circuits[{rule, p}] = read_circuit(circuit_path(cell.dir, rule, p));
          }
          cell.rows = read_csv(cell.dir / "rows.csv");
          cell.reused = true;
          return;
        }
        const auto& data = *seed_data[dc.seed_index];
        const auto& target = data.targets[dc.target_index];
        const auto& tname = target.config.name;
        const auto mode = to_string(dc.mode);
        const auto seed = data.seed;
        const auto setup = discovery_setup(config, data, target, dc.mode);
        const auto theta_hash = checkpoint_hash(data.theta1);
        save_means(setup.means, theta_hash, cell.dir / "means.txt");
        cell.rows.push_back(row(config, "discovery", tname, mode, "-", -1, -1, -1, seed, "discovery_inputs",
                                static_cast<double>(setup.examples.size())));
        for (auto rule : config.rules) {
          const auto rname = to_string(rule);
          bool first_p = true;
          for (double p : config.ps) {
            CircuitConfig cc;
            cc.rule = rule;
            cc.p = p;
            cc.max_depth = max_depth;
            cc.seed = seed;
            auto circuit = discover(data.theta1, setup.means, setup.inputs, cc);
            circuit.provenance.checkpoint = theta_hash;
            circuit.provenance.inputs = examples_hash(setup.examples);
            write_circuit(circuit_path(cell.dir, rule, p), circuit);
            if (first_p) {
              const auto top = top_of(circuit.readout_scores);
              cell.rows.push_back(row(config, "iteration0", tname, mode, rname, -1, 0, -1, seed, "top1_layer", top.layer));
              cell.rows.push_back(row(config, "iteration0", tname, mode, rname, -1, 0, -1, seed, "top1_head", top.head));
              cell.rows.push_back(row(config, "iteration0", tname, mode, rname, -1, 0, -1, seed, "top1_score",
                                      circuit.readout_scores.at(top)));
              first_p = false;
            }
            const auto topo = topology(circuit, data.theta1.config().n_layers);
            for (int d : config.depths) {
              const auto heads = circuit.heads_through(d);
              cell.rows.push_back(row(config, "circuit", tname, mode, rname, p, d, -1, seed, "circuit_size",
                                      static_cast<double>(heads.size())));
              const auto& counts = topo.cumulative[std::min<std::size_t>(static_cast<std::size_t>(d), topo.cumulative.size() - 1)];
              for (std::size_t l = 0; l < counts.size(); ++l) {
                cell.rows.push_back(row(config, "circuit", tname, mode, rname, p, d, -1, seed,
                                        "layer_" + std::to_string(l) + "_heads", counts[l]));
              }
              const auto rep = measure_faithfulness(data.theta1, setup.means, heads, target.pools.validation);
              for (const auto& [metric, value] :
                   std::vector<std::pair<std::string, double>>{{"accuracy_faithfulness", rep.accuracy},
                                                               {"margin_faithfulness", rep.margin},
                                                               {"margin_skipped", rep.margin_skipped},
                                                               {"circuit_gold_accuracy", rep.circuit_gold_accuracy},
                                                               {"full_gold_accuracy", rep.full_gold_accuracy},
                                                               {"circuit_size", static_cast<double>(rep.circuit_size)}}) {
                cell.rows.push_back(row(config, "faithfulness", tname, mode, rname, p, d, -1, seed, metric, value));
              }
              std::ofstream ex(cell.dir / ("faithfulness-" + rname + "-p" + p_tag(p) + "-d" + std::to_string(d) + ".tsv"));
              ex.precision(17);
              ex << "id\tgold\tfull_prediction\tcircuit_prediction\tfull_margin\tcircuit_margin\n";
              for (const auto& e : rep.examples) {
                ex << e.id << '\t' << e.gold << '\t' << e.full_prediction << '\t' << e.circuit_prediction << '\t'
                   << e.full_margin << '\t' << e.circuit_margin << '\n';
              }
            }
            dc.circuits[{rule, p}] = std::move(circuit);
          }
        }
        commit(cell);
      });
    });
  }
  run_jobs(jobs, config.workers);

  // Tuning runs, driven by the first discovery mode.
  struct TransferCell {
    Cell cell;
    std::size_t seed_index = 0;
    std::size_t target_index = 0;
    const DiscoveryCell* discovery = nullptr;
    Scope scope = Scope::full;
    ScoringRule rule = ScoringRule::directional;
    double p = -1.0;
    int depth = -1;
    int n = 0;
  };
  std::vector<TransferCell> transfer;
  if (config.run_transfer) {
    for (const auto& dc : disc) {
      if (dc.mode != config.modes.front()) continue;
      const auto seed = config.seeds[dc.seed_index];
      const auto& tname = config.targets[dc.target_index].name;
      auto add = [&](Scope scope, ScoringRule rule, double p, int depth, int n) {
        TransferCell tc;
        tc.seed_index = dc.seed_index;
        tc.target_index = dc.target_index;
        tc.discovery = &dc;
        tc.scope = scope;
        tc.rule = rule;
        tc.p = p;
        tc.depth = depth;
        tc.n = n;
        std::string label = to_string(scope);
        if (scope != Scope::full) label += "-" + to_string(rule) + "-p" + p_tag(p) + "-d" + std::to_string(depth);
        label += "-n" + std::to_string(n);
        tc.cell.name = "seed-" + std::to_string(seed) + "/" + tname + "/transfer/" + label;
        tc.cell.dir = cells_root / ("seed-" + std::to_string(seed)) / tname / "transfer" / label;
        tc.cell.key = Fingerprint()
                          .text(dc.cell.key)
                          .text(label)
                          .text(describe(config.transfer))
                          .integer(config.save_checkpoints ? 1 : 0)
                          .hex();
        transfer.push_back(std::move(tc));
      };
      for (int n : config.tuning_sizes) {
        for (auto scope : config.scopes) {
          if (scope == Scope::full) {
            add(scope, ScoringRule::directional, -1.0, -1, n);
            continue;
          }
          for (auto rule : config.rules) {
            for (double p : config.ps) {
              for (int d : config.depths) add(scope, rule, p, d, n);
            }
          }
        }
      }
    }
  }
  jobs.clear();
  for (auto& tc : transfer) {
    jobs.emplace_back([&] {
      auto& cell = tc.cell;
      if (tc.discovery->cell.failed) {
        cell.failed = true;
        cell.message = "depends on failed cell " + tc.discovery->cell.name;
        return;
      }
      guarded(cell, [&] {
        std::filesystem::create_directories(cell.dir);
        if (key_matches(cell)) {
          cell.rows = read_csv(cell.dir / "rows.csv");
          cell.reused = true;
          return;
        }
        const auto& data = *seed_data[tc.seed_index];
        const auto& target = data.targets[tc.target_index];
        const auto& tname = target.config.name;
        const auto seed = data.seed;
        std::vector<HeadId> heads;
        std::string provenance;
        if (tc.scope != Scope::full) {
          const auto& circuit = tc.discovery->circuits.at({tc.rule, tc.p});
          heads = circuit.heads_through(tc.depth);
          provenance = circuit.provenance.checkpoint + ":" + circuit.provenance.inputs;
          if (tc.scope != Scope::circuit) {
            heads = control_selection(control_of(tc.scope), circuit.readout_scores, static_cast<int>(heads.size()),
                                      derive_seed(seed, "control/" + tname + "/" + to_string(tc.rule) + "/" +
                                                            p_tag(tc.p) + "/" + std::to_string(tc.depth)));
          }
        }
        auto train_cfg = config.transfer;
        train_cfg.seed = derive_seed(seed, "transfer/" + tname + "/" + std::to_string(tc.n));
        const auto set = std::span(target.pools.heldout_tuning.examples).first(static_cast<std::size_t>(tc.n));
        auto result = ct_sft(data.theta1, heads, tc.scope, set, train_cfg);
        result.record.circuit_provenance = provenance;
        write_run_record(cell.dir / "run.txt", result.record);
        if (config.save_checkpoints) save_checkpoint(result.params, cell.dir / "checkpoint.manifest");
        const auto tgt = evaluate(result.params, target.pools.test.examples);
        const auto src = evaluate(result.params, data.source.pools.test.examples);
        const auto src0 = evaluate(data.theta1, data.source.pools.test.examples);
        const auto rule = tc.scope == Scope::full ? std::string("-") : to_string(tc.rule);
        for (const auto& [metric, value] :
             std::vector<std::pair<std::string, double>>{{"acc_target_test", tgt.accuracy},
                                                         {"margin_target_test", tgt.mean_margin},
                                                         {"acc_source_test", src.accuracy},
                                                         {"retention_delta", src.accuracy - src0.accuracy},
                                                         {"trainable_fraction", result.record.trainable_fraction()},
                                                         {"heads", static_cast<double>(heads.size())}}) {
          cell.rows.push_back(row(config, "transfer", tname, to_string(tc.scope), rule, tc.p, tc.depth, tc.n, seed,
                                  metric, value));
        }
        commit(cell);
      });
    });
  }
  run_jobs(jobs, config.workers);

  // Assemble in grid order.
  RunSummary summary;
  auto collect = [&](const Cell& cell, ResultRow failed_row) {
    ++summary.cells;
    summary.reused += cell.reused ? 1 : 0;
    if (cell.failed) {
      summary.failures.push_back({cell.name, cell.message});
      failed_row.metric = "cell_failed";
      failed_row.value = 1.0;
      summary.rows.push_back(std::move(failed_row));
      return;
    }
    summary.rows.insert(summary.rows.end(), cell.rows.begin(), cell.rows.end());
  };
  for (std::size_t si = 0; si < seed_cells.size(); ++si) {
    collect(seed_cells[si], row(config, "competence", "-", "full", "-", -1, -1, config.n_src, config.seeds[si], "", 0));
  }
  for (const auto& dc : disc) {
    collect(dc.cell, row(config, "discovery", config.targets[dc.target_index].name, to_string(dc.mode), "-", -1, -1,
                         -1, config.seeds[dc.seed_index], "", 0));
  }
  for (const auto& tc : transfer) {
    collect(tc.cell, row(config, "transfer", config.targets[tc.target_index].name, to_string(tc.scope),
                         tc.scope == Scope::full ? "-" : to_string(tc.rule), tc.p, tc.depth, tc.n,
                         config.seeds[tc.seed_index], "", 0));
  }
  summary.csv = config.output_dir / "results.csv";
  write_csv(summary.csv, summary.rows);
  std::ofstream failures(config.output_dir / "failures.tsv", std::ios::trunc);
  failures << "cell\tmessage\n";
  for (const auto& f : summary.failures) failures << f.cell << '\t' << f.message << '\n';
  return summary;
}

// ---------------------------------------------------------------- reports

std::vector<RetentionRow> forgetting_report(const std::vector<ResultRow>& rows, const RetentionSelector& selector) {
  std::map<std::uint64_t, double> theta1;
  for (const auto& r : rows) {
    if (r.phase == "competence" && r.metric == "acc_source_test") theta1[r.seed] = r.value;
  }
  std::map<std::tuple<std::string, std::string, int>, RetentionRow> table;
  std::vector<std::tuple<std::string, std::string, int>> order;
  for (const auto& r : rows) {
    if (r.phase != "transfer" || r.metric != "acc_source_test") continue;
    if (r.scope != "full" && (r.rule != selector.rule || r.p != selector.p || r.depth != selector.depth)) continue;
    const auto it = theta1.find(r.seed);
    if (it == theta1.end()) {
      throw ReportError("no theta1 source evaluation for seed " + std::to_string(r.seed));
    }
    const auto key = std::make_tuple(r.target, r.scope, r.n);
    auto [pos, inserted] = table.try_emplace(key);
    if (inserted) {
      order.push_back(key);
      pos->second.target = r.target;
      pos->second.scope = r.scope;
      pos->second.n = r.n;
    }
    pos->second.seeds.push_back(r.seed);
    pos->second.deltas.push_back(r.value - it->second);
  }
  std::vector<RetentionRow> out;
  for (const auto& key : order) {
    auto row = table.at(key);
    double sum = 0.0;
    for (double d : row.deltas) sum += d;
    row.mean_delta = sum / static_cast<double>(row.deltas.size());
    out.push_back(std::move(row));
  }
  return out;
}

StabilityTable iteration0_stability(const ExperimentConfig& config) {
  if (config.seeds.size() < 2) {
    throw ConfigError("iteration-0 stability needs at least two seeds");
  }
  config.validate();
  StabilityTable table;
  const std::vector<DiscoveryMode> modes{DiscoveryMode::heldout, DiscoveryMode::shared};
  std::map<DiscoveryMode, LayerRange> ranges;
  for (auto seed : config.seeds) {
    const auto data = prepare_seed(config, seed);
    for (const auto& target : data.targets) {
      for (auto mode : modes) {
        const auto setup = discovery_setup(config, data, target, mode);
        const auto scores =
            score_readout(data.theta1, setup.means, setup.inputs, all_heads(data.theta1.config()), config.rules.front());
        const auto top = scores.ranked().front();
        table.rows.push_back({seed, target.config.name, mode, top, scores.score(top)});
        auto [it, fresh] = ranges.try_emplace(mode, LayerRange{mode, top.layer, top.layer});
        if (!fresh) {
          it->second.min_layer = std::min(it->second.min_layer, top.layer);
          it->second.max_layer = std::max(it->second.max_layer, top.layer);
        }
      }
    }
  }
  for (auto mode : modes) table.summary.push_back(ranges.at(mode));
  return table;
}

void write_stability(std::ostream& out, const StabilityTable& table) {
  out << "seed\ttarget\tmode\ttop1\tscore\n";
  const auto old = out.precision(17);
  for (const auto& r : table.rows) {
    out << r.seed << '\t' << r.target << '\t' << to_string(r.mode) << '\t' << to_string(r.head) << '\t' << r.score
        << '\n';
  }
  out << "# layer range of the top-1 head\n";
  for (const auto& s : table.summary) {
    out << "# " << to_string(s.mode) << '\t' << s.min_layer << '-' << s.max_layer << '\n';
  }
  out.precision(old);
}

}  // namespace ctsft
