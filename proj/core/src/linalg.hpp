#pragma once

#include <cmath>

// Small dense kernels shared by the forward pass and the decomposition engine.
namespace ctsft::detail {

// Weights are float; T is the stream type (float for the forward pass,
// double for the decomposition). Sums accumulate in double either way.
template <typename T>
inline T dot(const float* a, const T* b, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  }
  return static_cast<T>(s);
}

// y = W x for row-major W (rows x cols).
template <typename T>
inline void matvec(const float* w, int rows, int cols, const T* x, T* y) {
  for (int r = 0; r < rows; ++r) {
    y[r] = dot(w + static_cast<long>(r) * cols, x, cols);
  }
}

// tanh approximation
template <typename T>
inline T gelu(T x) {
  constexpr T k = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  const T inner = k * (x + static_cast<T>(0.044715) * x * x * x);
  return static_cast<T>(0.5) * x * (static_cast<T>(1) + std::tanh(inner));
}

inline float gelu_grad(float x) {
  constexpr float k = 0.7978845608028654F;
  const float inner = k * (x + 0.044715F * x * x * x);
  const float th = std::tanh(inner);
  const float dinner = k * (1.0F + 3.0F * 0.044715F * x * x);
  return 0.5F * (1.0F + th) + 0.5F * x * (1.0F - th * th) * dinner;
}

struct NormStats {
  float mean;
  float rstd;
};

inline NormStats layer_norm_stats(const float* x, int d, float eps = 1e-5F) {
  float mean = 0.0F;
  for (int i = 0; i < d; ++i) {
    mean += x[i];
  }
  mean /= static_cast<float>(d);
  float var = 0.0F;
  for (int i = 0; i < d; ++i) {
    const float c = x[i] - mean;
    var += c * c;
  }
  var /= static_cast<float>(d);
  return {mean, 1.0F / std::sqrt(var + eps)};
}

}  // namespace ctsft::detail
