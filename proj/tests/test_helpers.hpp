#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "ctsft/model.hpp"

namespace ctsft::testing {

inline ModelConfig small_config(int layers = 2, int heads = 2, int d_model = 8, bool linear = false) {
  ModelConfig c;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_model = d_model;
  c.d_mlp = 2 * d_model;
  c.vocab_size = 12;
  c.max_seq_len = 10;
  c.linear_mode = linear;
  c.label_tokens = {9, 10, 11};
  c.init_scale = 0.3F;
  return c;
}

inline std::vector<int> random_tokens(std::mt19937_64& rng, const ModelConfig& c, int length) {
  std::uniform_int_distribution<int> pick(0, c.vocab_size - 1);
  std::vector<int> tokens(static_cast<std::size_t>(length));
  for (auto& t : tokens) {
    t = pick(rng);
  }
  return tokens;
}

inline double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, static_cast<double>(std::abs(a[i] - b[i])));
  }
  return m;
}

}  // namespace ctsft::testing
