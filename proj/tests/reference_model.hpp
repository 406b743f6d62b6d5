#pragma once

// Straightforward double-precision re-implementation of the classifier, kept
// independent of the library's forward pass. Used as the finite-difference
// oracle and as the independent ablation path.

#include <map>
#include <span>
#include <vector>

#include "ctsft/model.hpp"

namespace ctsft::testing {

using RefOverrides = std::map<HeadId, std::vector<double>>;

std::vector<double> to_double(std::span<const float> values);

/// Label logits; `overrides` replaces head outputs at the final position.
std::vector<double> reference_logits(const ModelConfig& config, const ParamLayout& layout,
                                     std::span<const double> flat, std::span<const int> tokens,
                                     const RefOverrides* overrides = nullptr);

/// Final-position output of every head, keyed by head.
std::map<HeadId, std::vector<double>> reference_head_outputs(const ModelConfig& config, const ParamLayout& layout,
                                                             std::span<const double> flat,
                                                             std::span<const int> tokens);

double reference_loss(const ModelConfig& config, const ParamLayout& layout, std::span<const double> flat,
                      std::span<const int> tokens, int label);

}  // namespace ctsft::testing
