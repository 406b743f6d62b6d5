#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ctsft/scoring.hpp"

namespace ctsft {

inline constexpr int kMaxCircuitDepth = 3;

struct CircuitConfig {
  ScoringRule rule = ScoringRule::directional;
  double p = 0.02;            // selection ratio per depth
  int max_depth = 2;          // last expansion depth, at most kMaxCircuitDepth
  std::vector<int> k_per_depth;  // optional overrides of K_d
  std::uint64_t seed = 0;

  /// Throws ConfigError for p outside (0, 1] or max_depth outside [0, 3].
  void validate() const;
};

/// K_d = max(1, round(p * total_heads)).
int heads_per_depth(double p, int total_heads);

struct SelectedHead {
  HeadId head{};
  double score = 0.0;

  friend bool operator==(const SelectedHead&, const SelectedHead&) = default;
};

struct Provenance {
  std::string checkpoint;
  std::string inputs;
  std::string mean_set;
};

struct Circuit {
  CircuitConfig config;
  std::vector<std::vector<SelectedHead>> depths;  // C^(d), in selection order
  std::string stop_reason;
  Provenance provenance;
  std::map<HeadId, double> readout_scores;  // full depth-0 table, used by the control selections

  /// Union over depths, lexicographic order.
  [[nodiscard]] std::vector<HeadId> heads() const;
  /// Union of depths 0..depth.
  [[nodiscard]] std::vector<HeadId> heads_through(int depth) const;
  [[nodiscard]] std::size_t size() const { return heads().size(); }
};

/// Source of per-depth relevance tables; lets discovery run over hand-set
/// tables as well as the decomposition engine.
class CircuitScorer {
 public:
  virtual ~CircuitScorer() = default;
  virtual RelevanceTable readout(std::span<const HeadId> candidates) const = 0;
  virtual RelevanceTable frontier(std::span<const HeadId> candidates, std::span<const HeadId> targets) const = 0;
};

class DecompositionScorer final : public CircuitScorer {
 public:
  DecompositionScorer(const Parameters& params, const BaselineMeans& means, std::span<const PreparedInput> inputs,
                      ScoringRule rule)
      : params_(params), means_(means), inputs_(inputs), rule_(rule) {}

  RelevanceTable readout(std::span<const HeadId> candidates) const override;
  RelevanceTable frontier(std::span<const HeadId> candidates, std::span<const HeadId> targets) const override;

 private:
  const Parameters& params_;
  const BaselineMeans& means_;
  std::span<const PreparedInput> inputs_;
  ScoringRule rule_;
};

/// Backward frontier expansion from the readout.
///
/// Depth 0 ranks every head against the readout. Depth d >= 1 ranks the
/// not-yet-selected heads in layers strictly below the deepest frontier layer
/// against the depth d-1 selection. Each depth keeps the top K_d; expansion
/// stops at max_depth or when no upstream candidate remains.
Circuit discover(const CircuitScorer& scorer, const ModelConfig& model, const CircuitConfig& config);

/// Decomposition-backed discovery over `inputs`. Throws InputError when
/// `inputs` is empty.
Circuit discover(const Parameters& params, const BaselineMeans& means, std::span<const PreparedInput> inputs,
                 const CircuitConfig& config);

enum class ControlKind { random, least_relevant, near_zero };

std::string to_string(ControlKind kind);

/// K heads chosen from `scores` without using the top of the ranking:
/// uniform sample, bottom-K, or the K scores closest to zero. Ties break in
/// lexicographic order. Throws InputError when K exceeds the table.
std::vector<HeadId> control_selection(ControlKind kind, const std::map<HeadId, double>& scores, int k,
                                      std::uint64_t seed);

struct TopologyHistogram {
  int n_layers = 0;
  std::vector<std::vector<int>> per_depth;   // newly selected heads per layer
  std::vector<std::vector<int>> cumulative;  // union through each depth
};

TopologyHistogram topology(const Circuit& circuit, int n_layers);

void write_circuit(const std::filesystem::path& path, const Circuit& circuit);
Circuit read_circuit(const std::filesystem::path& path);

}  // namespace ctsft
