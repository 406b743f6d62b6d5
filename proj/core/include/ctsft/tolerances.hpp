#pragma once

namespace ctsft {

// Numeric tolerances shared by the library and its test suites.
struct Tolerances {
  // gamma + beta vs. the full activation, relative (float32).
  static constexpr double completeness = 1e-4;
  // Decomposition vs. single-head mean ablation in linear mode (absolute).
  static constexpr double affine_oracle = 1e-5;
  static constexpr double gradient_rel = 1e-3;
  static constexpr double finite_difference_step = 1e-3;
  // Denominator floor used when forming a relative gradient error.
  static constexpr double gradient_rel_floor = 1e-5;
  static constexpr double arithmetic = 1e-6;
  static constexpr float layer_norm_eps = 1e-5F;
};

}  // namespace ctsft
