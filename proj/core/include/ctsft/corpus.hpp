#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ctsft/model.hpp"

namespace ctsft {

struct Example {
  std::uint64_t id = 0;
  std::vector<int> tokens;  // content tokens followed by the query token
  int label = 0;            // class index
  int language = 0;

  friend bool operator==(const Example&, const Example&) = default;
};

/// Synthetic classification task.
///
/// Vocabulary layout: token 0 is the query marker placed at the label
/// position, tokens 1..content_vocab are content, and the last n_classes
/// tokens are the single-token labels. Each class draws content tokens from
/// its own distribution: with probability `keyword_rate` a class keyword,
/// otherwise a uniform content token.
struct TaskSpec {
  int n_classes = 3;
  int content_vocab = 48;
  int keywords_per_class = 4;
  double keyword_rate = 0.3;
  int min_length = 8;  // content tokens, query marker excluded
  int max_length = 12;
  std::uint64_t seed = 1;
  std::vector<std::vector<int>> keywords;           // content-local indices per class
  std::vector<std::vector<double>> distributions;  // per class, over content-local indices

  [[nodiscard]] static constexpr int query_token() { return 0; }
  [[nodiscard]] int content_token(int local) const { return 1 + local; }
  [[nodiscard]] int label_token(int cls) const { return 1 + content_vocab + cls; }
  [[nodiscard]] std::vector<int> label_tokens() const;
  [[nodiscard]] int vocab_size() const { return 1 + content_vocab + n_classes; }
  /// Longest sequence the task produces (query marker included).
  [[nodiscard]] int max_sequence() const { return max_length + 1; }
};

/// Builds keyword sets and class distributions. Throws ConfigError when the
/// keyword sets do not fit in the content vocabulary.
TaskSpec make_task(int n_classes, int content_vocab, int keywords_per_class, double keyword_rate, int min_length,
                   int max_length, std::uint64_t seed);

/// A language over the task's content vocabulary.
///
/// `drift` moves that fraction of every class's probability mass onto a
/// language-specific keyword distribution; `permutation` then renames content
/// tokens (content-local index i is written as permutation[i]).
struct LanguageSpec {
  int id = 0;
  std::string name = "src";
  std::vector<int> permutation;
  double drift = 0.0;
  std::uint64_t seed = 0;
};

/// Permutes a `fraction` of the content vocabulary among itself (0 yields the
/// identity, 1 a full random permutation).
LanguageSpec make_language(const TaskSpec& task, int id, std::string name, double permuted_fraction, double drift,
                           std::uint64_t seed);

/// Per-class distributions of a language over content-local indices, before
/// the permutation is applied.
std::vector<std::vector<double>> language_distributions(const TaskSpec& task, const LanguageSpec& lang);

/// `n` labelled examples, class counts within one of balanced, deterministic
/// under `seed`. Throws ConfigError when n < n_classes or the permutation does
/// not cover the content vocabulary.
std::vector<Example> generate_language(const TaskSpec& task, const LanguageSpec& lang, int n, std::uint64_t seed);

enum class PoolKind { discovery, heldout_tuning, validation, test };

std::string to_string(PoolKind kind);

/// Examples tagged with the pool they were drawn into. Accessors that must not
/// see the test split check the tag.
struct TaggedPool {
  PoolKind kind = PoolKind::discovery;
  std::vector<Example> examples;
};

struct PoolCounts {
  int discovery = 400;
  int heldout_tuning = 100;
  int validation = 100;
  int test = 400;

  [[nodiscard]] int total() const { return discovery + heldout_tuning + validation + test; }
};

struct Pools {
  TaggedPool discovery{PoolKind::discovery, {}};
  TaggedPool heldout_tuning{PoolKind::heldout_tuning, {}};
  TaggedPool validation{PoolKind::validation, {}};
  TaggedPool test{PoolKind::test, {}};
};

/// Disjoint pools of exact sizes, each in canonical (id) order. Throws
/// ConfigError when there are too few examples.
Pools split_pools(std::span<const Example> examples, const PoolCounts& counts, std::uint64_t seed);

/// Sort by example id.
void canonical_order(std::vector<Example>& examples);

/// Argmax over label logits (lowest class index on ties).
int predict(const Parameters& params, const Example& example);

struct DiscoverySelection {
  std::vector<Example> examples;
  bool short_of_target = false;  // fewer than k correct predictions were available
};

/// First `k` correctly predicted pool examples in canonical order. Throws
/// DiscoveryError when the model gets none right.
DiscoverySelection select_discovery_inputs(const Parameters& params, std::span<const Example> pool, int k = 50);

/// Label-balanced subset: floor(k / n_classes) per class, reduced to the
/// smallest class count when a class is short. Throws BalanceError naming a
/// class that is absent.
std::vector<Example> sample_balanced_mean_set(std::span<const Example> pool, int n_classes, int k,
                                              std::uint64_t seed);

std::vector<LabeledTokens> as_batch(std::span<const Example> examples);

/// Fingerprint of the example ids, in the given order.
std::string examples_hash(std::span<const Example> examples);

// Dataset files: one example per line, tab-separated
//   <example-id> <language-id> <label-id> <space-separated token ids>
// Lines starting with '#' are comments.
void write_dataset(const std::filesystem::path& path, std::span<const Example> examples);
std::vector<Example> read_dataset(const std::filesystem::path& path);

}  // namespace ctsft
