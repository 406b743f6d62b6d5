#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ctsft {

/// Shape of the decoder-only classifier.
///
/// `label_tokens[c]` is the vocabulary token read out for class `c`; logits are
/// only ever produced for these tokens, at the final sequence position.
/// `linear_mode` turns the network into an affine map of its input embedding:
/// uniform causal attention, no LayerNorm, identity MLP activation.
struct ModelConfig {
  int n_layers = 2;
  int n_heads = 4;
  int d_model = 32;
  int d_mlp = 64;
  int vocab_size = 16;
  int max_seq_len = 32;
  bool linear_mode = false;
  std::vector<int> label_tokens;
  float init_scale = 0.1F;

  [[nodiscard]] int d_head() const { return d_model / n_heads; }
  [[nodiscard]] int n_labels() const { return static_cast<int>(label_tokens.size()); }
  [[nodiscard]] int total_heads() const { return n_layers * n_heads; }

  /// Throws ConfigError when a dimension is non-positive, d_model is not a
  /// multiple of n_heads, or a label token lies outside the vocabulary.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// An attention head, ordered lexicographically by (layer, head).
struct HeadId {
  int layer = 0;
  int head = 0;

  friend auto operator<=>(const HeadId&, const HeadId&) = default;
};

std::string to_string(HeadId id);

/// Row-major index of a head: layer * n_heads + head.
[[nodiscard]] inline int flat_index(HeadId id, int n_heads) { return id.layer * n_heads + id.head; }

/// Every head of the model in lexicographic order.
std::vector<HeadId> all_heads(const ModelConfig& config);

enum class ParamGroup { embedding, attention, layer_norm, mlp, unembedding };

struct TensorInfo {
  std::string name;
  ParamGroup group = ParamGroup::embedding;
  int layer = -1;
  std::size_t offset = 0;
  int rows = 0;
  int cols = 0;

  [[nodiscard]] std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
};

/// Offsets (into the flat parameter vector) of one block's tensors.
/// Matrices are row-major with shape (out, in): y = W x.
struct LayerOffsets {
  std::size_t ln1_gain = 0;
  std::size_t ln1_bias = 0;
  std::size_t wq = 0;
  std::size_t wk = 0;
  std::size_t wv = 0;
  std::size_t wo = 0;
  std::size_t ln2_gain = 0;
  std::size_t ln2_bias = 0;
  std::size_t w_in = 0;
  std::size_t b_in = 0;
  std::size_t w_out = 0;
  std::size_t b_out = 0;
};

/// Placement of every named tensor inside one contiguous float buffer.
class ParamLayout {
 public:
  explicit ParamLayout(const ModelConfig& config);

  [[nodiscard]] std::size_t total() const { return total_; }
  [[nodiscard]] const std::vector<TensorInfo>& tensors() const { return tensors_; }
  /// Throws InputError for an unknown name.
  [[nodiscard]] const TensorInfo& tensor(std::string_view name) const;

  std::size_t token_embedding = 0;
  std::size_t position_embedding = 0;
  std::vector<LayerOffsets> layers;
  std::size_t final_ln_gain = 0;
  std::size_t final_ln_bias = 0;
  std::size_t unembedding = 0;

 private:
  std::size_t add(std::string name, ParamGroup group, int layer, int rows, int cols);

  std::vector<TensorInfo> tensors_;
  std::size_t total_ = 0;
};

/// Model weights: a validated config plus one flat float32 buffer laid out by
/// ParamLayout. Copies are deep; the layout is shared and immutable.
class Parameters {
 public:
  Parameters() = default;
  /// All-zero parameters (LayerNorm gains included).
  explicit Parameters(ModelConfig config);

  /// Gaussian init with std `config.init_scale`; LayerNorm gains 1, biases 0.
  static Parameters initialize(ModelConfig config, std::uint64_t seed);

  [[nodiscard]] const ModelConfig& config() const { return config_; }
  [[nodiscard]] const ParamLayout& layout() const { return *layout_; }
  [[nodiscard]] std::size_t size() const { return values_.size(); }

  [[nodiscard]] std::span<float> values() { return values_; }
  [[nodiscard]] std::span<const float> values() const { return values_; }

  [[nodiscard]] std::span<float> tensor(std::string_view name);
  [[nodiscard]] std::span<const float> tensor(std::string_view name) const;

  /// Unembedding row of vocabulary token `token`.
  [[nodiscard]] std::span<const float> unembedding_row(int token) const;

  friend bool operator==(const Parameters& a, const Parameters& b) {
    return a.config_ == b.config_ && a.values_ == b.values_;
  }

 private:
  ModelConfig config_;
  std::shared_ptr<const ParamLayout> layout_;
  std::vector<float> values_;
};

/// Intermediate values of one transformer block over all positions.
/// Position-major buffers: [t * width + i]. Attention probabilities are
/// [h][t][j] with zeros above the causal diagonal.
struct LayerTrace {
  std::vector<float> resid_in;
  std::vector<float> ln1_out;
  std::vector<float> ln1_mean;
  std::vector<float> ln1_rstd;
  std::vector<float> q;
  std::vector<float> k;
  std::vector<float> v;
  std::vector<float> probs;
  std::vector<float> mix;
  std::vector<float> head_out;  // [h][t][d_model]: each head's residual write
  std::vector<float> resid_mid;
  std::vector<float> ln2_out;
  std::vector<float> ln2_mean;
  std::vector<float> ln2_rstd;
  std::vector<float> mlp_pre;
  std::vector<float> mlp_act;
  std::vector<float> resid_out;
};

/// Everything a forward pass computed; consumed by backward, decomposition and
/// the baseline-mean estimator.
struct ActivationTrace {
  int seq_len = 0;
  int d_model = 0;
  bool patched = false;
  std::vector<LayerTrace> layers;
  std::vector<float> final_in;  // residual at the label position
  float final_mean = 0.0F;
  float final_rstd = 1.0F;
  std::vector<float> final_out;
  std::vector<float> logits;  // one per label token

  /// a_x(s): head output (residual write) at `position`.
  [[nodiscard]] std::span<const float> head_output(HeadId s, int position) const;
  /// a_x(s) at the label-prediction (final) position.
  [[nodiscard]] std::span<const float> label_head_output(HeadId s) const { return head_output(s, seq_len - 1); }
};

/// Replacement head outputs applied at the final position only.
class HeadOverrides {
 public:
  explicit HeadOverrides(const ModelConfig& config);

  void set(HeadId s, std::span<const float> value);
  [[nodiscard]] const float* find(HeadId s) const;
  [[nodiscard]] bool empty() const { return count_ == 0; }

 private:
  int n_heads_ = 0;
  int d_model_ = 0;
  std::vector<std::vector<float>> values_;
  int count_ = 0;
};

/// Runs the model on one token sequence. Throws InputError on an empty
/// sequence, an over-long sequence, or an out-of-vocabulary token.
ActivationTrace forward(const Parameters& params, std::span<const int> tokens,
                        const HeadOverrides* overrides = nullptr);

/// Label logits only.
std::vector<float> logits(const Parameters& params, std::span<const int> tokens,
                          const HeadOverrides* overrides = nullptr);

struct LabeledTokens {
  std::span<const int> tokens;
  int label = 0;  // class index into ModelConfig::label_tokens
};

struct Gradient {
  std::vector<float> values;  // congruent to Parameters::values()
  double loss = 0.0;          // mean cross-entropy over the batch
};

/// Mean cross-entropy gradient over `batch`. Throws NumericError naming the
/// batch index whose loss is not finite.
Gradient backward(const Parameters& params, std::span<const LabeledTokens> batch);

/// Cross-entropy of a single example (no gradient).
double example_loss(const Parameters& params, const LabeledTokens& example);

/// Half-open coordinate range in the flat parameter vector.
struct CoordRange {
  std::size_t begin = 0;
  std::size_t end = 0;

  friend bool operator==(const CoordRange&, const CoordRange&) = default;
};

/// Coordinates owned by head `s`: its row block of Q, K, V and its column
/// block of O. Throws InputError for an invalid head.
std::vector<CoordRange> head_param_slices(const ParamLayout& layout, const ModelConfig& config, HeadId s);
std::vector<CoordRange> head_param_slices(const Parameters& params, HeadId s);

}  // namespace ctsft
