#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ctsft/cdt.hpp"
#include "ctsft/corpus.hpp"
#include "ctsft/scoring.hpp"

namespace ctsft {

/// Label logits with every head outside `circuit` replaced by its baseline
/// mean at the final position. Throws ConfigError when the means do not
/// cover the model.
std::vector<float> circuit_only_forward(const Parameters& params, const BaselineMeans& means,
                                        std::span<const HeadId> circuit, std::span<const int> tokens);

struct ExampleFaithfulness {
  std::uint64_t id = 0;
  int gold = 0;
  int full_prediction = 0;
  int circuit_prediction = 0;
  double full_margin = 0.0;     // gold logit minus the best other logit
  double circuit_margin = 0.0;
  bool margin_retained = false;  // full margin > 0
  double margin_ratio = 0.0;     // clamp(circuit / full, 0, 1) when retained
};

struct FaithfulnessReport {
  double accuracy = 0.0;  // agreement with the full model's prediction
  double margin = 0.0;    // mean clamped margin ratio over retained examples
  bool margin_degenerate = false;  // no example had a positive full margin
  int margin_skipped = 0;
  double full_gold_accuracy = 0.0;
  double circuit_gold_accuracy = 0.0;
  int n = 0;
  std::size_t circuit_size = 0;
  int depth = -1;
  ScoringRule rule = ScoringRule::directional;
  std::string validation_hash;
  std::vector<ExampleFaithfulness> examples;
};

/// Mean-ablation faithfulness of `circuit` on the validation pool. Throws
/// InputError when `validation` is not tagged as the validation pool or is
/// empty.
FaithfulnessReport measure_faithfulness(const Parameters& params, const BaselineMeans& means,
                                        std::span<const HeadId> circuit, const TaggedPool& validation);

double accuracy_faithfulness(const Parameters& params, const BaselineMeans& means, std::span<const HeadId> circuit,
                             const TaggedPool& validation);

/// NaN when every full-model margin is nonpositive.
double margin_faithfulness(const Parameters& params, const BaselineMeans& means, std::span<const HeadId> circuit,
                           const TaggedPool& validation);

}  // namespace ctsft
