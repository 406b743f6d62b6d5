#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ctsft/corpus.hpp"
#include "ctsft/model.hpp"

namespace ctsft {

enum class Scope { circuit, random, least_relevant, near_zero, full };

std::string to_string(Scope scope);
/// Accepts the names above plus "least" for least_relevant.
Scope parse_scope(const std::string& name);

/// Trainable coordinates: the slices of the selected heads plus every
/// LayerNorm gain and bias. Under `full` every coordinate is trainable.
class HeadMask {
 public:
  HeadMask() = default;
  /// `final_layer_norm` controls whether the pre-unembedding LayerNorm is
  /// trainable under the surgical scopes. Throws InputError for an invalid head.
  HeadMask(const Parameters& params, std::vector<HeadId> heads, Scope scope, bool final_layer_norm = true);

  [[nodiscard]] Scope scope() const { return scope_; }
  [[nodiscard]] const std::vector<HeadId>& heads() const { return heads_; }
  /// Sorted, disjoint, merged ranges.
  [[nodiscard]] const std::vector<CoordRange>& ranges() const { return ranges_; }
  [[nodiscard]] std::size_t count() const { return count_; }
  [[nodiscard]] std::size_t total() const { return total_; }
  [[nodiscard]] double fraction() const { return total_ == 0 ? 0.0 : static_cast<double>(count_) / total_; }
  [[nodiscard]] bool contains(std::size_t coord) const;

 private:
  Scope scope_ = Scope::full;
  std::vector<HeadId> heads_;
  std::vector<CoordRange> ranges_;
  std::size_t count_ = 0;
  std::size_t total_ = 0;
};

enum class OptimizerKind { adam, sgd };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& name);

struct TrainConfig {
  int epochs = 5;
  int batch_size = 16;
  double learning_rate = 5e-5;
  OptimizerKind optimizer = OptimizerKind::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;
  int max_steps = 0;  // when positive, train exactly this many steps (epochs cycle)
  bool final_layer_norm = true;
  /// Called after every epoch with the current parameters.
  std::function<void(int epoch, const Parameters&)> on_epoch;

  /// Throws ConfigError for non-positive epochs, batch size or learning rate.
  void validate() const;
};

/// Adam (or plain SGD) over an explicit coordinate set; moment buffers exist
/// only for those coordinates and start at zero.
class MaskedOptimizer {
 public:
  MaskedOptimizer(const HeadMask& mask, const TrainConfig& config);

  /// Updates masked coordinates of `params` from `gradient`; all other
  /// coordinates are left untouched.
  void step(std::span<float> params, std::span<const float> gradient);

  [[nodiscard]] std::size_t state_size() const { return m_.size(); }
  [[nodiscard]] long steps() const { return t_; }

 private:
  std::vector<CoordRange> ranges_;
  OptimizerKind kind_;
  float lr_, beta1_, beta2_, eps_;
  std::vector<float> m_, v_;
  long t_ = 0;
};

struct EpochMetrics {
  int epoch = 0;
  double mean_loss = 0.0;
  int steps = 0;
};

struct RunRecord {
  std::string initial_hash;
  std::string final_hash;
  Scope scope = Scope::full;
  std::vector<HeadId> heads;
  std::string circuit_provenance;
  std::string data_hash;
  int n = 0;
  std::uint64_t seed = 0;
  std::size_t trainable = 0;
  std::size_t total = 0;
  int steps = 0;
  std::vector<EpochMetrics> epochs;

  [[nodiscard]] double trainable_fraction() const {
    return total == 0 ? 0.0 : static_cast<double>(trainable) / total;
  }
};

void write_run_record(const std::filesystem::path& path, const RunRecord& record);
RunRecord read_run_record(const std::filesystem::path& path);

struct TuneResult {
  Parameters params;
  RunRecord record;
};

/// Trains the masked coordinates of `start` on `examples` with mean
/// cross-entropy. Throws TrainingError naming the step on a non-finite loss
/// or parameter.
TuneResult train(const Parameters& start, std::span<const Example> examples, const HeadMask& mask,
                 const TrainConfig& config);

/// Full-parameter training on the first `n_src` examples of `pool`.
/// n_src = 0 returns `base` unchanged. Throws ConfigError when n_src exceeds
/// the pool.
TuneResult competence_tune(const Parameters& base, std::span<const Example> pool, int n_src,
                           const TrainConfig& config);

/// Head-masked tuning of `theta1` on `tuning_set`. The head set must be
/// nonempty unless `allow_layer_norm_only`; scope `full` ignores `heads`.
TuneResult ct_sft(const Parameters& theta1, std::span<const HeadId> heads, Scope scope,
                  std::span<const Example> tuning_set, const TrainConfig& config,
                  bool allow_layer_norm_only = false);

struct Evaluation {
  int n = 0;
  double accuracy = 0.0;
  std::vector<double> class_accuracy;  // recall per class; NaN for an absent class
  std::vector<int> class_counts;
  double mean_margin = 0.0;  // gold logit minus the best other logit
};

/// Throws InputError for an empty set or an out-of-range label.
Evaluation evaluate(const Parameters& params, std::span<const Example> examples);

}  // namespace ctsft
