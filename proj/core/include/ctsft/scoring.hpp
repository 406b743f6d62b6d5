#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ctsft/cdt.hpp"
#include "ctsft/model.hpp"

namespace ctsft {

/// `magnitude`: unsigned L1 ratio of relevant to irrelevant stream.
/// `directional`: logit margin at the readout, task-direction projection upstream.
enum class ScoringRule { magnitude, directional };

std::string to_string(ScoringRule rule);
/// Accepts "magnitude"/"norm" and "directional"/"projection"; throws ConfigError otherwise.
ScoringRule parse_scoring_rule(const std::string& name);

/// ||beta||_1 / ||gamma||_1; +infinity when gamma is all zero.
double magnitude_ratio(std::span<const float> beta, std::span<const float> gamma);

/// beta[gold] minus the mean of beta over `others`. Throws ConfigError when
/// `others` is empty or contains `gold`.
double logit_margin_score(std::span<const float> beta, int gold, std::span<const int> others);

struct TaskDirection {
  std::vector<float> v_task;
  int gold = 0;
  std::vector<int> others;
  double norm = 0.0;
};

/// Every class except `gold`.
std::vector<int> competitors(int gold, int n_classes);

/// Unembedding row of the gold label minus the mean of the competitor rows.
/// Labels are class indices into the config's label tokens. Throws
/// ScoringError when the direction has zero length.
TaskDirection task_direction(const Parameters& params, int gold, std::span<const int> others);

/// (beta . v_task) / ||v_task||_2. Throws InputError on a width mismatch.
double projection_score(std::span<const float> beta, const TaskDirection& direction);

struct RawScore {
  std::uint64_t input_id = 0;
  HeadId source{};
  Target target{};
  double score = 0.0;
};

/// Aggregate relevance per head: arithmetic mean of its raw scores over
/// inputs (and frontier targets). Heads with an infinite magnitude ratio keep
/// +infinity and are listed in `infinite`.
struct RelevanceTable {
  ScoringRule rule = ScoringRule::directional;
  std::map<HeadId, double> scores;
  std::vector<HeadId> infinite;
  std::vector<RawScore> raw;
  std::vector<std::string> warnings;

  /// Throws InputError for a head that was not scored.
  [[nodiscard]] double score(HeadId s) const;
  /// Descending score, ties in lexicographic head order.
  [[nodiscard]] std::vector<HeadId> ranked() const;
};

RelevanceTable aggregate(ScoringRule rule, std::vector<RawScore> raw);

/// A discovery input with its cached forward pass.
struct PreparedInput {
  std::uint64_t id = 0;
  int label = 0;
  ActivationTrace trace;
};

std::vector<PreparedInput> prepare_inputs(const Parameters& params, std::span<const Example> examples);

/// Relevance of each candidate to the label readout (circuit depth 0).
RelevanceTable score_readout(const Parameters& params, const BaselineMeans& means,
                             std::span<const PreparedInput> inputs, std::span<const HeadId> candidates,
                             ScoringRule rule);

/// Relevance of each candidate to the frontier heads downstream of it,
/// averaged over those targets and over inputs.
RelevanceTable score_frontier(const Parameters& params, const BaselineMeans& means,
                              std::span<const PreparedInput> inputs, std::span<const HeadId> candidates,
                              std::span<const HeadId> frontier, ScoringRule rule);

/// Tab-separated dump: input id, source layer, source head, target, rule, raw score.
void write_score_dump(std::ostream& out, const RelevanceTable& table);

}  // namespace ctsft
