#include <doctest.h>

#include <filesystem>
#include <random>

#include "ctsft/cdt.hpp"
#include "ctsft/errors.hpp"
#include "ctsft/tolerances.hpp"
#include "test_helpers.hpp"

using namespace ctsft;
using testing::random_tokens;
using testing::small_config;

namespace {

std::vector<Example> random_examples(std::mt19937_64& rng, const ModelConfig& c, int n) {
  std::vector<Example> out;
  for (int i = 0; i < n; ++i) {
    out.push_back({static_cast<std::uint64_t>(i + 1), random_tokens(rng, c, 4 + i % 5), i % c.n_labels(), 0});
  }
  return out;
}

// Trace holding only head outputs: one position, every head emitting `value`.
ActivationTrace constant_trace(const ModelConfig& c, const std::vector<float>& value) {
  ActivationTrace tr;
  tr.seq_len = 1;
  tr.d_model = c.d_model;
  tr.layers.resize(static_cast<std::size_t>(c.n_layers));
  for (auto& l : tr.layers) {
    for (int h = 0; h < c.n_heads; ++h) {
      l.head_out.insert(l.head_out.end(), value.begin(), value.end());
    }
  }
  return tr;
}

}  // namespace

TEST_CASE("baseline mean of a single example is its activation") {
  std::mt19937_64 rng(1);
  const auto p = Parameters::initialize(small_config(), 3);
  const auto ex = random_examples(rng, p.config(), 1);
  const auto means = compute_baseline_means(p, ex);
  const auto tr = forward(p, ex[0].tokens);
  for (const auto& s : all_heads(p.config())) {
    const auto mu = means.mean(s);
    const auto a = tr.label_head_output(s);
    CHECK(std::equal(mu.begin(), mu.end(), a.begin()));
  }
  CHECK(means.set_size == 1);
  CHECK(means.class_counts == std::vector<int>{1, 0, 0});
  CHECK_FALSE(means.balanced());
}

TEST_CASE("opposite activations cancel in the mean") {
  const auto c = small_config();
  std::vector<float> v(8);
  std::iota(v.begin(), v.end(), 1.0F);
  std::vector<float> neg(v);
  for (auto& x : neg) {
    x = -x;
  }
  const std::vector<ActivationTrace> traces{constant_trace(c, v), constant_trace(c, neg)};
  const auto means = compute_baseline_means(c, traces);
  for (float x : means.values) {
    CHECK(x == 0.0F);
  }
}

TEST_CASE("baseline means match a brute-force average") {
  std::mt19937_64 rng(5);
  const auto p = Parameters::initialize(small_config(2, 4, 8), 8);
  const auto set = random_examples(rng, p.config(), 6);
  const auto means = compute_baseline_means(p, set);
  CHECK(means.balanced());
  for (const auto& s : all_heads(p.config())) {
    for (int i = 0; i < 8; ++i) {
      double brute = 0.0;
      for (const auto& ex : set) {
        brute += forward(p, ex.tokens).label_head_output(s)[static_cast<std::size_t>(i)];
      }
      brute /= 6.0;
      CHECK(std::abs(means.mean(s)[static_cast<std::size_t>(i)] - brute) <= Tolerances::arithmetic);
    }
  }
  CHECK_THROWS_AS(compute_baseline_means(p, std::span<const Example>{}), InputError);
}

TEST_CASE("means cache round-trips and checks its key") {
  std::mt19937_64 rng(2);
  const auto p = Parameters::initialize(small_config(), 1);
  const auto set = random_examples(rng, p.config(), 3);
  const auto means = compute_baseline_means(p, set);
  const auto path = std::filesystem::temp_directory_path() / "ctsft_means" / "means.manifest";
  save_means(means, "abc", path);
  const auto loaded = load_means(path, "abc", means.set_hash);
  REQUIRE(loaded.has_value());
  CHECK(loaded->values == means.values);
  CHECK(loaded->class_counts == means.class_counts);
  CHECK_FALSE(load_means(path, "other", means.set_hash).has_value());
  CHECK_FALSE(load_means(path.parent_path() / "none.manifest", "abc", means.set_hash).has_value());
}

TEST_CASE("head output equal to its mean has no relevant stream") {
  std::mt19937_64 rng(9);
  const auto p = Parameters::initialize(small_config(3, 2, 8), 4);
  const auto x = random_examples(rng, p.config(), 1);
  const auto means = compute_baseline_means(p, x);  // mu(s) = a_x(s)
  const std::vector<Target> targets{Target::at({2, 0}), Target::at({2, 1}), Target::readout()};
  const auto dec = decompose(p, means, x[0].tokens, {0, 1}, targets);
  REQUIRE(dec.contributions.size() == 3);
  for (const auto& c : dec.contributions) {
    for (float b : c.beta) {
      CHECK(b == 0.0F);
    }
  }
}

TEST_CASE("linear mode: decomposition equals single-head mean ablation") {
  std::mt19937_64 rng(13);
  const auto p = Parameters::initialize(small_config(3, 2, 8, true), 21);
  const auto mean_set = random_examples(rng, p.config(), 6);
  const auto means = compute_baseline_means(p, mean_set);
  const auto x = random_tokens(rng, p.config(), 7);
  const auto full = logits(p, x);
  const std::vector<Target> readout{Target::readout()};
  for (const auto& s : all_heads(p.config())) {
    HeadOverrides ablate(p.config());
    ablate.set(s, means.mean(s));
    const auto ablated = logits(p, x, &ablate);
    const auto dec = decompose(p, means, x, s, readout);
    for (std::size_t c = 0; c < full.size(); ++c) {
      CHECK(std::abs(dec.contributions[0].beta[c] - (full[c] - ablated[c])) <= Tolerances::affine_oracle);
    }
  }
}

TEST_CASE("completeness at every propagated site") {
  std::mt19937_64 rng(31);
  for (bool linear : {false, true}) {
    const auto p = Parameters::initialize(small_config(3, 2, 8, linear), 17);
    const auto means = compute_baseline_means(p, random_examples(rng, p.config(), 6));
    const auto x = random_tokens(rng, p.config(), 6);
    const std::vector<Target> readout{Target::readout()};
    for (const auto& s : all_heads(p.config())) {
      const auto dec = decompose(p, means, x, s, readout, {.record_streams = true});
      CHECK(!dec.streams.sites.empty());
      CHECK(dec.streams.max_relative_error() <= Tolerances::completeness);
    }
  }
}

TEST_CASE("relevant stream is linear in the source deviation (linear mode)") {
  std::mt19937_64 rng(4);
  const auto p = Parameters::initialize(small_config(2, 2, 8, true), 2);
  const auto means = compute_baseline_means(p, random_examples(rng, p.config(), 4));
  const auto x = random_tokens(rng, p.config(), 5);
  const auto tr = forward(p, x);
  const HeadId s{0, 1};
  const std::vector<Target> targets{Target::at({1, 0}), Target::readout()};
  const auto base = decompose(p, means, tr, s, targets);
  const float c = 2.5F;
  auto scaled = means;
  const auto a = tr.label_head_output(s);
  const auto mu = means.mean(s);
  for (std::size_t i = 0; i < 8; ++i) {
    scaled.values[static_cast<std::size_t>(flat_index(s, 2)) * 8 + i] = a[i] - c * (a[i] - mu[i]);
  }
  const auto dec = decompose(p, scaled, tr, s, targets);
  for (std::size_t t = 0; t < targets.size(); ++t) {
    for (std::size_t i = 0; i < base.contributions[t].beta.size(); ++i) {
      CHECK(dec.contributions[t].beta[i] == doctest::Approx(c * base.contributions[t].beta[i]).epsilon(1e-4).scale(1e-5));
    }
  }
}

TEST_CASE("zero baseline: layer contributions plus non-attention path give the logits") {
  std::mt19937_64 rng(6);
  const auto p = Parameters::initialize(small_config(2, 4, 8, true), 12);
  const auto means = zero_means(p.config());
  const auto x = random_tokens(rng, p.config(), 6);
  const auto full = logits(p, x);
  const std::vector<Target> readout{Target::readout()};
  for (int layer = 0; layer < 2; ++layer) {
    HeadOverrides silence(p.config());
    const std::vector<float> zero(8, 0.0F);
    std::vector<double> total(full.size(), 0.0);
    for (int h = 0; h < 4; ++h) {
      silence.set({layer, h}, zero);
      const auto dec = decompose(p, means, x, {layer, h}, readout);
      for (std::size_t c = 0; c < total.size(); ++c) {
        total[c] += dec.contributions[0].beta[c];
      }
    }
    const auto rest = logits(p, x, &silence);
    for (std::size_t c = 0; c < full.size(); ++c) {
      CHECK(total[c] + rest[c] == doctest::Approx(full[c]).epsilon(1e-4).scale(1e-4));
    }
  }
}

TEST_CASE("decompose rejects upstream targets and non-finite streams") {
  std::mt19937_64 rng(1);
  const auto p = Parameters::initialize(small_config(2, 2, 8), 1);
  auto means = compute_baseline_means(p, random_examples(rng, p.config(), 3));
  const auto x = random_tokens(rng, p.config(), 4);
  const std::vector<Target> same_layer{Target::at({1, 0})};
  CHECK_THROWS_AS(decompose(p, means, x, {1, 1}, same_layer), TopologyError);
  const std::vector<Target> upstream{Target::at({0, 0})};
  CHECK_THROWS_AS(decompose(p, means, x, {1, 1}, upstream), TopologyError);
  means.values[0] = std::numeric_limits<float>::infinity();
  const std::vector<Target> readout{Target::readout()};
  CHECK_THROWS_WITH_AS(decompose(p, means, x, {0, 0}, readout), doctest::Contains("layer 0"), NumericError);
  CHECK_THROWS_AS(decompose(p, zero_means(small_config(3, 2, 8)), x, {0, 0}, readout), ConfigError);
}
