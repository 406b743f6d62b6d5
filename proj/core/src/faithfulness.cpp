#include "ctsft/faithfulness.hpp"

#include <algorithm>
#include <limits>
#include <set>

#include "ctsft/errors.hpp"

namespace ctsft {

namespace {

int argmax(const std::vector<float>& z) {
  return static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
}

double margin(const std::vector<float>& z, int gold) {
  float other = -std::numeric_limits<float>::infinity();
  for (std::size_t c = 0; c < z.size(); ++c) {
    if (static_cast<int>(c) != gold) {
      other = std::max(other, z[c]);
    }
  }
  return static_cast<double>(z[static_cast<std::size_t>(gold)]) - other;
}

}  // namespace

std::vector<float> circuit_only_forward(const Parameters& params, const BaselineMeans& means,
                                        std::span<const HeadId> circuit, std::span<const int> tokens) {
  const auto& cfg = params.config();
  if (!means.covers(cfg)) {
    throw ConfigError("baseline means do not cover every head of the model");
  }
  const std::set<HeadId> keep(circuit.begin(), circuit.end());
  HeadOverrides overrides(cfg);
  for (const auto& h : all_heads(cfg)) {
    if (!keep.contains(h)) {
      overrides.set(h, means.mean(h));
    }
  }
  return logits(params, tokens, overrides.empty() ? nullptr : &overrides);
}

FaithfulnessReport measure_faithfulness(const Parameters& params, const BaselineMeans& means,
                                        std::span<const HeadId> circuit, const TaggedPool& validation) {
  if (validation.kind != PoolKind::validation) {
    throw InputError("faithfulness reads the validation pool only, got the " + to_string(validation.kind) + " pool");
  }
  if (validation.examples.empty()) {
    throw InputError("faithfulness needs a nonempty validation set");
  }
  FaithfulnessReport rep;
  rep.n = static_cast<int>(validation.examples.size());
  rep.circuit_size = std::set<HeadId>(circuit.begin(), circuit.end()).size();
  rep.validation_hash = examples_hash(validation.examples);
  int agree = 0;
  int full_correct = 0;
  int circuit_correct = 0;
  int retained = 0;
  double ratio_sum = 0.0;
  for (const auto& ex : validation.examples) {
    const auto full = logits(params, ex.tokens);
    const auto part = circuit_only_forward(params, means, circuit, ex.tokens);
    ExampleFaithfulness e;
    e.id = ex.id;
    e.gold = ex.label;
    e.full_prediction = argmax(full);
    e.circuit_prediction = argmax(part);
    e.full_margin = margin(full, ex.label);
    e.circuit_margin = margin(part, ex.label);
    agree += e.full_prediction == e.circuit_prediction ? 1 : 0;
    full_correct += e.full_prediction == ex.label ? 1 : 0;
    circuit_correct += e.circuit_prediction == ex.label ? 1 : 0;
    if (e.full_margin > 0.0) {
      e.margin_retained = true;
      e.margin_ratio = std::clamp(e.circuit_margin / e.full_margin, 0.0, 1.0);
      ratio_sum += e.margin_ratio;
      ++retained;
    } else {
      ++rep.margin_skipped;
    }
    rep.examples.push_back(e);
  }
  rep.accuracy = static_cast<double>(agree) / rep.n;
  rep.full_gold_accuracy = static_cast<double>(full_correct) / rep.n;
  rep.circuit_gold_accuracy = static_cast<double>(circuit_correct) / rep.n;
  if (retained == 0) {
    rep.margin_degenerate = true;
    rep.margin = std::numeric_limits<double>::quiet_NaN();
  } else {
    rep.margin = ratio_sum / retained;
  }
  return rep;
}

double accuracy_faithfulness(const Parameters& params, const BaselineMeans& means, std::span<const HeadId> circuit,
                             const TaggedPool& validation) {
  return measure_faithfulness(params, means, circuit, validation).accuracy;
}

double margin_faithfulness(const Parameters& params, const BaselineMeans& means, std::span<const HeadId> circuit,
                           const TaggedPool& validation) {
  return measure_faithfulness(params, means, circuit, validation).margin;
}

}  // namespace ctsft
