#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctsft/corpus.hpp"
#include "ctsft/model.hpp"

namespace ctsft {

/// Per-head mean output at the label position, estimated over a mean set.
struct BaselineMeans {
  int n_layers = 0;
  int n_heads = 0;
  int d_model = 0;
  std::vector<float> values;  // [layer][head][d_model]
  int set_size = 0;
  std::vector<int> class_counts;
  std::string set_hash;

  [[nodiscard]] std::span<const float> mean(HeadId s) const;
  [[nodiscard]] bool covers(const ModelConfig& config) const;
  /// All classes represented equally in the mean set.
  [[nodiscard]] bool balanced() const;
};

/// mu(s) = average of a_x(s) over `mean_set`. Throws InputError for an empty set.
BaselineMeans compute_baseline_means(const Parameters& params, std::span<const Example> mean_set);

/// Same estimate from precomputed traces (labels are not needed for the mean).
BaselineMeans compute_baseline_means(const ModelConfig& config, std::span<const ActivationTrace> traces);

/// Baseline means with every head set to zero.
BaselineMeans zero_means(const ModelConfig& config);

/// Means cache file, keyed by checkpoint hash and mean-set hash.
void save_means(const BaselineMeans& means, const std::string& checkpoint_hash, const std::filesystem::path& path);
/// Returns nothing when the file is missing or was computed for another key.
std::optional<BaselineMeans> load_means(const std::filesystem::path& path, const std::string& checkpoint_hash,
                                        const std::string& set_hash);

/// Decomposition target: either a downstream head or the label logits.
struct Target {
  bool logits = true;
  HeadId head{};

  static Target readout() { return {true, {}}; }
  static Target at(HeadId h) { return {false, h}; }
  friend bool operator==(const Target&, const Target&) = default;
};

std::string to_string(const Target& t);

/// beta/gamma of a source head at a target: per-label vectors for the
/// readout, residual-write (d_model) vectors for a head.
struct Contribution {
  HeadId source{};
  Target target{};
  std::vector<float> beta;
  std::vector<float> gamma;
  std::uint64_t input_id = 0;
};

/// Both streams at one propagated site together with the full activation.
struct StreamSite {
  std::string name;
  std::vector<float> gamma;
  std::vector<float> beta;
  std::vector<float> full;

  /// ||gamma + beta - full||_inf / ||full||_inf (absolute when full is ~0).
  [[nodiscard]] double relative_error() const;
};

struct DualStream {
  std::vector<StreamSite> sites;

  [[nodiscard]] double max_relative_error() const;
};

struct Decomposition {
  std::vector<Contribution> contributions;  // in the order of the requested targets
  DualStream streams;                        // filled only when requested
};

struct DecomposeOptions {
  bool record_streams = false;
  std::uint64_t input_id = 0;
};

/// Splits head `source`'s label-position output into gamma = mu(source) and
/// beta = a_x(source) - mu(source), routes every other head into gamma and
/// propagates both streams to `targets`.
///
/// Linear maps and residual sums act on each stream; LayerNorm uses the full
/// stream's statistics; attention weights come from the full forward pass; a
/// pointwise activation f maps (gamma, beta) to (f(gamma), f(gamma + beta) - f(gamma)).
///
/// Throws TopologyError when a head target is not in a later layer, and
/// NumericError (naming the layer) when a stream becomes non-finite.
Decomposition decompose(const Parameters& params, const BaselineMeans& means, const ActivationTrace& trace,
                        HeadId source, std::span<const Target> targets, const DecomposeOptions& options = {});

Decomposition decompose(const Parameters& params, const BaselineMeans& means, std::span<const int> tokens,
                        HeadId source, std::span<const Target> targets, const DecomposeOptions& options = {});

}  // namespace ctsft
