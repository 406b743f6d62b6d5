#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "ctsft/errors.hpp"
#include "ctsft/scoring.hpp"
#include "ctsft/tolerances.hpp"
#include "test_helpers.hpp"

using namespace ctsft;
using testing::random_tokens;
using testing::small_config;

namespace {

std::vector<Example> random_examples(std::mt19937_64& rng, const ModelConfig& c, int n) {
  std::vector<Example> out;
  for (int i = 0; i < n; ++i) {
    out.push_back({static_cast<std::uint64_t>(i + 1), random_tokens(rng, c, 3 + i % 5), i % c.n_labels(), 0});
  }
  return out;
}

// Two-dimensional model whose label rows are set by hand.
Parameters with_label_rows(const std::vector<std::vector<float>>& rows) {
  auto c = small_config(1, 2, 2);
  Parameters p(c);
  auto u = p.tensor("unembed");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto tok = static_cast<std::size_t>(c.label_tokens[i]);
    for (std::size_t j = 0; j < 2; ++j) {
      u[tok * 2 + j] = rows[i][j];
    }
  }
  return p;
}

}  // namespace

TEST_CASE("magnitude ratio worked example") {
  const std::vector<float> beta{1.0F, -1.0F};
  const std::vector<float> gamma{2.0F, 2.0F};
  CHECK(magnitude_ratio(beta, gamma) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("magnitude ratio of a zero irrelevant stream is +inf") {
  const std::vector<float> beta{1.0F, 0.0F};
  const std::vector<float> gamma{0.0F, 0.0F};
  CHECK(std::isinf(magnitude_ratio(beta, gamma)));
}

TEST_CASE("logit margin worked examples") {
  const std::vector<int> others{1, 2};
  CHECK(logit_margin_score(std::vector<float>{2.0F, 0.5F, -0.5F}, 0, others) == doctest::Approx(2.0));
  CHECK(logit_margin_score(std::vector<float>{0.7F, 0.7F, 0.7F}, 0, others) == 0.0);
  CHECK(logit_margin_score(std::vector<float>{0.0F, 1.0F, 1.0F}, 0, others) == doctest::Approx(-1.0));
  CHECK_THROWS_AS(logit_margin_score(std::vector<float>{1.0F, 2.0F}, 0, std::vector<int>{}), ConfigError);
  CHECK_THROWS_AS(logit_margin_score(std::vector<float>{1.0F, 2.0F}, 0, std::vector<int>{0, 1}), ConfigError);
}

TEST_CASE("logit margin matches a brute-force mean") {
  std::mt19937_64 rng(3);
  std::normal_distribution<float> n(0.0F, 2.0F);
  for (int trial = 0; trial < 50; ++trial) {
    const int classes = 2 + trial % 6;
    std::vector<float> beta(static_cast<std::size_t>(classes));
    for (auto& b : beta) {
      b = n(rng);
    }
    const int gold = trial % classes;
    double others = 0.0;
    for (int c = 0; c < classes; ++c) {
      if (c != gold) {
        others += beta[static_cast<std::size_t>(c)];
      }
    }
    const double expect = beta[static_cast<std::size_t>(gold)] - others / (classes - 1);
    CHECK(std::abs(logit_margin_score(beta, gold, competitors(gold, classes)) - expect) <= Tolerances::arithmetic);
  }
}

TEST_CASE("task direction and projection worked example") {
  const auto p = with_label_rows({{1.0F, 0.0F}, {0.0F, 0.0F}, {0.0F, 0.0F}});
  const auto dir = task_direction(p, 0, competitors(0, 3));
  CHECK(dir.v_task == std::vector<float>{1.0F, 0.0F});
  CHECK(dir.norm == 1.0);
  CHECK(projection_score(std::vector<float>{3.0F, 4.0F}, dir) == 3.0);
  CHECK_THROWS_AS(projection_score(std::vector<float>{1.0F}, dir), InputError);
}

TEST_CASE("task direction subtracts the mean competitor row") {
  const auto p = with_label_rows({{1.0F, 1.0F}, {2.0F, 0.0F}, {0.0F, 4.0F}});
  const auto dir = task_direction(p, 0, competitors(0, 3));
  CHECK(dir.v_task[0] == doctest::Approx(0.0));
  CHECK(dir.v_task[1] == doctest::Approx(-1.0));
  CHECK(projection_score(std::vector<float>{5.0F, 2.0F}, dir) == doctest::Approx(-2.0));
}

TEST_CASE("identical label rows give a degenerate task direction") {
  const auto p = with_label_rows({{1.0F, 2.0F}, {1.0F, 2.0F}, {1.0F, 2.0F}});
  CHECK_THROWS_AS(task_direction(p, 1, competitors(1, 3)), ScoringError);
}

TEST_CASE("projection is invariant to positive rescaling of the direction and flips with sign") {
  std::mt19937_64 rng(9);
  std::normal_distribution<float> n(0.0F, 1.0F);
  for (int trial = 0; trial < 20; ++trial) {
    TaskDirection dir;
    std::vector<float> beta(6);
    double sq = 0.0;
    for (int i = 0; i < 6; ++i) {
      dir.v_task.push_back(n(rng));
      sq += static_cast<double>(dir.v_task.back()) * dir.v_task.back();
      beta[static_cast<std::size_t>(i)] = n(rng);
    }
    dir.norm = std::sqrt(sq);
    const double base = projection_score(beta, dir);
    auto scaled = dir;
    for (auto& x : scaled.v_task) {
      x *= 4.0F;
    }
    scaled.norm *= 4.0;
    CHECK(projection_score(beta, scaled) == doctest::Approx(base).epsilon(1e-6));
    auto flipped = dir;
    for (auto& x : flipped.v_task) {
      x = -x;
    }
    CHECK(projection_score(beta, flipped) == doctest::Approx(-base).epsilon(1e-6));
    double brute = 0.0;
    for (int i = 0; i < 6; ++i) {
      brute += static_cast<double>(beta[static_cast<std::size_t>(i)]) * dir.v_task[static_cast<std::size_t>(i)];
    }
    CHECK(std::abs(base - brute / dir.norm) <= Tolerances::arithmetic);
  }
}

TEST_CASE("magnitude ranks an anti-aligned head above an aligned one; directional does not") {
  // Head (1,0) pushes strongly against the gold label, head (1,1) weakly toward it.
  const HeadId against{1, 0};
  const HeadId toward{1, 1};
  const std::vector<float> gamma{1.0F, 1.0F, 1.0F};
  const std::vector<float> beta_against{-3.0F, 0.0F, 0.0F};
  const std::vector<float> beta_toward{1.0F, 0.0F, 0.0F};
  const std::vector<int> others{1, 2};

  std::vector<RawScore> mag{{1, against, Target::readout(), magnitude_ratio(beta_against, gamma)},
                            {1, toward, Target::readout(), magnitude_ratio(beta_toward, gamma)}};
  std::vector<RawScore> dir{{1, against, Target::readout(), logit_margin_score(beta_against, 0, others)},
                            {1, toward, Target::readout(), logit_margin_score(beta_toward, 0, others)}};
  const auto by_mag = aggregate(ScoringRule::magnitude, mag).ranked();
  const auto by_dir = aggregate(ScoringRule::directional, dir).ranked();
  CHECK(by_mag.front() == against);
  CHECK(by_dir.front() == toward);
  CHECK(logit_margin_score(beta_against, 0, others) < 0.0);
}

TEST_CASE("aggregation averages over inputs, keeps infinite heads first, and breaks ties lexicographically") {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<RawScore> raw{{1, {0, 1}, Target::readout(), 1.0}, {2, {0, 1}, Target::readout(), 3.0},
                            {1, {0, 0}, Target::readout(), 2.0}, {2, {0, 0}, Target::readout(), 2.0},
                            {1, {1, 0}, Target::readout(), 0.5}, {2, {1, 0}, Target::readout(), inf},
                            {1, {1, 1}, Target::readout(), -1.0}};
  const auto t = aggregate(ScoringRule::magnitude, raw);
  CHECK(t.score({0, 1}) == 2.0);
  CHECK(t.score({0, 0}) == 2.0);
  CHECK(std::isinf(t.score({1, 0})));
  CHECK(t.infinite == std::vector<HeadId>{{1, 0}});
  CHECK(t.warnings.size() == 1);
  CHECK(t.ranked() == std::vector<HeadId>{{1, 0}, {0, 0}, {0, 1}, {1, 1}});
  CHECK_THROWS_AS(static_cast<void>(t.score({2, 0})), InputError);
  std::vector<RawScore> bad{{1, {0, 0}, Target::readout(), std::nan("")}};
  CHECK_THROWS_AS(aggregate(ScoringRule::directional, bad), NumericError);
}

TEST_CASE("readout margin scores equal the mean ablation effect in linear mode") {
  std::mt19937_64 rng(21);
  const auto p = Parameters::initialize(small_config(2, 2, 8, true), 4);
  const auto set = random_examples(rng, p.config(), 6);
  const auto means = compute_baseline_means(p, set);
  const auto inputs = prepare_inputs(p, set);
  const auto heads = all_heads(p.config());
  const auto table = score_readout(p, means, inputs, heads, ScoringRule::directional);
  for (const auto& s : heads) {
    double expect = 0.0;
    for (const auto& ex : set) {
      const auto full = logits(p, ex.tokens);
      HeadOverrides ablate(p.config());
      ablate.set(s, means.mean(s));
      const auto abl = logits(p, ex.tokens, &ablate);
      std::vector<float> effect(full.size());
      for (std::size_t c = 0; c < full.size(); ++c) {
        effect[c] = full[c] - abl[c];
      }
      expect += logit_margin_score(effect, ex.label, competitors(ex.label, 3));
    }
    expect /= static_cast<double>(set.size());
    CHECK(std::abs(table.score(s) - expect) <= Tolerances::affine_oracle);
  }
  CHECK(table.raw.size() == heads.size() * set.size());
}

TEST_CASE("frontier projection scores average the per-target projections") {
  std::mt19937_64 rng(22);
  const auto p = Parameters::initialize(small_config(3, 2, 8), 6);
  const auto set = random_examples(rng, p.config(), 4);
  const auto means = compute_baseline_means(p, set);
  const auto inputs = prepare_inputs(p, set);
  const std::vector<HeadId> frontier{{2, 0}, {1, 1}};
  const std::vector<HeadId> candidates{{0, 0}, {0, 1}, {1, 0}};
  const auto table = score_frontier(p, means, inputs, candidates, frontier, ScoringRule::directional);
  for (const auto& s : candidates) {
    std::vector<Target> targets;
    for (const auto& t : frontier) {
      if (t.layer > s.layer) {
        targets.push_back(Target::at(t));
      }
    }
    double sum = 0.0;
    int count = 0;
    for (const auto& in : inputs) {
      const auto dir = task_direction(p, in.label, competitors(in.label, 3));
      const auto dec = decompose(p, means, in.trace, s, targets);
      for (const auto& c : dec.contributions) {
        sum += projection_score(c.beta, dir);
        ++count;
      }
    }
    CHECK(table.score(s) == doctest::Approx(sum / count).epsilon(1e-9));
  }
  // (1,0) only reaches (2,0); layer-0 heads reach both.
  CHECK(table.raw.size() == inputs.size() * 5);
  const std::vector<HeadId> stuck{{2, 1}};
  CHECK_THROWS_AS(score_frontier(p, means, inputs, stuck, frontier, ScoringRule::magnitude), TopologyError);
}

TEST_CASE("scoring rule names and score dump") {
  CHECK(parse_scoring_rule("norm") == ScoringRule::magnitude);
  CHECK(parse_scoring_rule("projection") == ScoringRule::directional);
  CHECK_THROWS_AS(parse_scoring_rule("cosine"), ConfigError);
  std::vector<RawScore> raw{{7, {0, 1}, Target::readout(), 0.25}};
  std::ostringstream out;
  write_score_dump(out, aggregate(ScoringRule::magnitude, raw));
  CHECK(out.str() == "input_id\tsource_layer\tsource_head\ttarget\trule\traw_score\n7\t0\t1\tLOGITS\tmagnitude\t0.25\n");
}
