#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "ctsft/circuit.hpp"
#include "ctsft/corpus.hpp"
#include "ctsft/faithfulness.hpp"
#include "ctsft/tuning.hpp"

namespace ctsft {

/// Where discovery inputs and the mean set come from: the dedicated
/// discovery pool (`heldout`) or the pool CT-SFT trains on (`shared`).
enum class DiscoveryMode { heldout, shared };

std::string to_string(DiscoveryMode mode);
DiscoveryMode parse_discovery_mode(const std::string& name);

struct LanguageConfig {
  std::string name;
  double permuted_fraction = 0.0;
  double drift = 0.0;
  std::string difficulty;  // "source", "easy", "hard", ...
};

inline const std::vector<std::uint64_t> kDefaultSeeds{31, 777, 2025, 12345};

struct ExperimentConfig {
  std::string id = "ctsft";
  std::filesystem::path output_dir = "ctsft-out";

  // Model.
  int n_layers = 6;
  int n_heads = 8;
  int d_model = 32;
  int d_mlp = 64;
  float init_scale = 0.1F;

  // Task.
  int n_classes = 3;
  int content_vocab = 36;
  int keywords_per_class = 4;
  double keyword_rate = 0.5;
  int min_length = 6;
  int max_length = 12;
  LanguageConfig source{"src", 0.0, 0.0, "source"};
  std::vector<LanguageConfig> targets{{"hard", 1.0, 0.6, "hard"}, {"easy", 0.25, 0.1, "easy"}};
  PoolCounts pools;

  int n_src = 250;
  TrainConfig competence = default_competence();
  TrainConfig transfer = default_transfer();

  std::vector<int> tuning_sizes{25, 50, 75, 100};
  std::vector<Scope> scopes{Scope::full, Scope::circuit, Scope::random, Scope::least_relevant, Scope::near_zero};
  std::vector<ScoringRule> rules{ScoringRule::directional, ScoringRule::magnitude};
  std::vector<double> ps{0.1};
  std::vector<int> depths{0, 1, 2};
  std::vector<std::uint64_t> seeds = kDefaultSeeds;
  /// Every mode gets discovery and faithfulness cells; the first one also
  /// drives the tuning grid.
  std::vector<DiscoveryMode> modes{DiscoveryMode::heldout};
  int discovery_inputs = 50;
  int mean_set = 48;

  bool run_transfer = true;
  bool save_checkpoints = true;
  int workers = 1;

  [[nodiscard]] ModelConfig model_config(const TaskSpec& task) const;
  /// Throws ConfigError for an inconsistent configuration.
  void validate() const;

  static TrainConfig default_competence();
  static TrainConfig default_transfer();
};

/// Seed for a named sub-stream of an experiment seed.
std::uint64_t derive_seed(std::uint64_t seed, const std::string& tag);

struct LanguageData {
  LanguageConfig config;
  LanguageSpec spec;
  Pools pools;
};

struct SeedData {
  std::uint64_t seed = 0;
  TaskSpec task;
  LanguageData source;
  std::vector<LanguageData> targets;
  Parameters base;
  Parameters theta1;
  RunRecord competence;

  /// Throws ConfigError for an unknown target.
  [[nodiscard]] const LanguageData& target(const std::string& name) const;
};

/// Data generation and competence tuning for one seed; deterministic.
SeedData prepare_seed(const ExperimentConfig& config, std::uint64_t seed);

/// Pools and base model only; `theta1` is left equal to `base`.
SeedData generate_seed_data(const ExperimentConfig& config, std::uint64_t seed);

struct DiscoverySetup {
  DiscoveryMode mode = DiscoveryMode::heldout;
  std::vector<Example> examples;
  bool short_of_target = false;
  std::vector<PreparedInput> inputs;
  BaselineMeans means;
};

/// Discovery inputs (correctly predicted examples) and balanced means for
/// `target` under `mode`, both on theta1.
DiscoverySetup discovery_setup(const ExperimentConfig& config, const SeedData& data, const LanguageData& target,
                               DiscoveryMode mode);

/// One metric of one grid cell. Non-applicable numeric fields are negative
/// and written as "-".
struct ResultRow {
  std::string experiment;
  std::string phase;
  std::string source;
  std::string target;
  std::string scope;
  std::string rule;
  double p = -1.0;
  int depth = -1;
  int n = -1;
  std::uint64_t seed = 0;
  std::string metric;
  double value = 0.0;

  friend bool operator==(const ResultRow&, const ResultRow&) = default;
};

inline constexpr const char* kCsvHeader = "experiment,phase,source,target,scope,rule,p,depth,n,seed,metric,value";

void write_csv(std::ostream& out, const std::vector<ResultRow>& rows);
void write_csv(const std::filesystem::path& path, const std::vector<ResultRow>& rows);
/// Throws IoError for a malformed file.
std::vector<ResultRow> read_csv(const std::filesystem::path& path);

struct CellFailure {
  std::string cell;
  std::string message;
};

struct RunSummary {
  std::vector<ResultRow> rows;
  std::vector<CellFailure> failures;
  int cells = 0;
  int reused = 0;
  std::filesystem::path csv;
};

/// Runs the whole grid: competence tuning, discovery and faithfulness per
/// (seed, target, mode), then the tuning runs. Every cell persists its
/// artifacts under `output_dir/cells`; a cell whose key file matches is
/// reused instead of recomputed. A failing cell is recorded and the grid
/// continues; cells that depend on it are marked failed too.
RunSummary run_experiment(const ExperimentConfig& config);

struct RetentionRow {
  std::string target;
  std::string scope;
  int n = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<double> deltas;  // source accuracy after tuning minus theta1's, per seed
  double mean_delta = 0.0;
};

struct RetentionSelector {
  std::string rule = "directional";
  double p = 0.1;
  int depth = 2;
};

/// Source-retention table, one row per (target, scope, n). Surgical scopes
/// are taken at `selector`; full FT has no rule, p or depth. Throws
/// ReportError when a seed has no theta1 source evaluation.
std::vector<RetentionRow> forgetting_report(const std::vector<ResultRow>& rows, const RetentionSelector& selector);

struct StabilityRow {
  std::uint64_t seed = 0;
  std::string target;
  DiscoveryMode mode = DiscoveryMode::heldout;
  HeadId head{};
  double score = 0.0;
};

struct LayerRange {
  DiscoveryMode mode = DiscoveryMode::heldout;
  int min_layer = 0;
  int max_layer = 0;
};

struct StabilityTable {
  std::vector<StabilityRow> rows;  // one per (seed, target, mode)
  std::vector<LayerRange> summary;
};

/// Depth-0 top-ranked head per seed under both discovery modes, scored with
/// the first configured rule. Throws ConfigError with fewer than 2 seeds.
StabilityTable iteration0_stability(const ExperimentConfig& config);

void write_stability(std::ostream& out, const StabilityTable& table);

}  // namespace ctsft
