#include <doctest.h>

#include <filesystem>
#include <map>
#include <numeric>
#include <set>

#include "ctsft/corpus.hpp"
#include "ctsft/errors.hpp"
#include "test_helpers.hpp"

using namespace ctsft;

namespace {

TaskSpec default_task() { return make_task(3, 48, 4, 0.3, 8, 12, 7); }

ModelConfig config_for(const TaskSpec& task) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_mlp = 16;
  c.vocab_size = task.vocab_size();
  c.max_seq_len = task.max_sequence();
  c.label_tokens = task.label_tokens();
  return c;
}

std::set<std::uint64_t> ids(const std::vector<Example>& xs) {
  std::set<std::uint64_t> out;
  for (const auto& x : xs) {
    out.insert(x.id);
  }
  return out;
}

}  // namespace

TEST_CASE("task vocabulary layout") {
  const auto task = default_task();
  CHECK(task.vocab_size() == 52);
  CHECK(task.label_tokens() == std::vector<int>{49, 50, 51});
  std::set<int> all;
  for (const auto& kw : task.keywords) {
    CHECK(kw.size() == 4);
    all.insert(kw.begin(), kw.end());
  }
  CHECK(all.size() == 12);
  CHECK_THROWS_AS(make_task(3, 10, 4, 0.3, 8, 12, 1), ConfigError);
}

TEST_CASE("generated examples are balanced, deterministic and in range") {
  const auto task = default_task();
  const auto lang = make_language(task, 0, "src", 0.0, 0.0, 1);
  const auto a = generate_language(task, lang, 100, 5);
  const auto b = generate_language(task, lang, 100, 5);
  CHECK(a == b);
  std::map<int, int> counts;
  for (const auto& ex : a) {
    ++counts[ex.label];
    CHECK(ex.tokens.back() == TaskSpec::query_token());
    CHECK(static_cast<int>(ex.tokens.size()) <= task.max_sequence());
    for (std::size_t i = 0; i + 1 < ex.tokens.size(); ++i) {
      CHECK(ex.tokens[i] >= 1);
      CHECK(ex.tokens[i] <= task.content_vocab);
    }
  }
  CHECK(counts[0] >= 33);
  CHECK(counts[0] <= 34);
  CHECK(counts[2] >= 33);
  const auto c = generate_language(task, lang, 100, 6);
  std::set<std::uint64_t> common;
  const auto ia = ids(a);
  for (auto id : ids(c)) {
    if (ia.contains(id)) {
      common.insert(id);
    }
  }
  CHECK(common.empty());
  CHECK_THROWS_AS(generate_language(task, lang, 2, 1), ConfigError);
}

TEST_CASE("identity language reproduces the source distribution") {
  const auto task = default_task();
  const auto lang = make_language(task, 0, "src", 0.0, 0.0, 3);
  CHECK(language_distributions(task, lang) == task.distributions);
  const auto xs = generate_language(task, lang, 3000, 9);
  // empirical keyword rate per class vs the analytic rate
  for (int cls = 0; cls < 3; ++cls) {
    double hits = 0.0;
    double total = 0.0;
    double expected = 0.0;
    for (int k : task.keywords[static_cast<std::size_t>(cls)]) {
      expected += task.distributions[static_cast<std::size_t>(cls)][static_cast<std::size_t>(k)];
    }
    const std::set<int> kw(task.keywords[static_cast<std::size_t>(cls)].begin(),
                           task.keywords[static_cast<std::size_t>(cls)].end());
    for (const auto& ex : xs) {
      if (ex.label != cls) {
        continue;
      }
      for (std::size_t i = 0; i + 1 < ex.tokens.size(); ++i) {
        hits += kw.contains(ex.tokens[i] - 1) ? 1.0 : 0.0;
        total += 1.0;
      }
    }
    CHECK(hits / total == doctest::Approx(expected).epsilon(0.05));
  }
}

TEST_CASE("permutation is a bijection and drift redistributes mass") {
  const auto task = default_task();
  const auto full = make_language(task, 1, "hard", 1.0, 0.5, 11);
  std::set<int> images(full.permutation.begin(), full.permutation.end());
  CHECK(images.size() == 48);
  int moved = 0;
  for (int i = 0; i < 48; ++i) {
    moved += full.permutation[static_cast<std::size_t>(i)] != i ? 1 : 0;
  }
  CHECK(moved == 48);
  const auto partial = make_language(task, 2, "easy", 0.25, 0.0, 11);
  moved = 0;
  for (int i = 0; i < 48; ++i) {
    moved += partial.permutation[static_cast<std::size_t>(i)] != i ? 1 : 0;
  }
  CHECK(moved == 12);
  const auto dists = language_distributions(task, full);
  for (const auto& p : dists) {
    CHECK(std::accumulate(p.begin(), p.end(), 0.0) == doctest::Approx(1.0));
  }
  auto broken = full;
  broken.permutation[0] = broken.permutation[1];
  CHECK_THROWS_AS(generate_language(task, broken, 10, 1), ConfigError);
  broken.permutation.pop_back();
  CHECK_THROWS_AS(generate_language(task, broken, 10, 1), ConfigError);
}

TEST_CASE("permuted language with remapped embeddings keeps accuracy") {
  const auto task = default_task();
  const auto src = make_language(task, 0, "src", 0.0, 0.0, 1);
  auto tgt = make_language(task, 0, "tgt", 1.0, 0.0, 4);  // same id: same example stream
  const auto xs = generate_language(task, src, 90, 3);
  const auto ys = generate_language(task, tgt, 90, 3);
  const auto model = Parameters::initialize(config_for(task), 5);
  auto remapped = model;
  const auto d = static_cast<std::size_t>(model.config().d_model);
  auto emb_src = model.tensor("tok_emb");
  auto emb_dst = remapped.tensor("tok_emb");
  for (int i = 0; i < task.content_vocab; ++i) {
    const auto from = static_cast<std::size_t>(task.content_token(i)) * d;
    const auto to = static_cast<std::size_t>(task.content_token(tgt.permutation[static_cast<std::size_t>(i)])) * d;
    std::copy(emb_src.begin() + static_cast<std::ptrdiff_t>(from),
              emb_src.begin() + static_cast<std::ptrdiff_t>(from + d),
              emb_dst.begin() + static_cast<std::ptrdiff_t>(to));
  }
  int agree_src = 0;
  int agree_tgt = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    agree_src += predict(model, xs[i]) == xs[i].label ? 1 : 0;
    agree_tgt += predict(remapped, ys[i]) == ys[i].label ? 1 : 0;
  }
  CHECK(agree_src == agree_tgt);
}

TEST_CASE("pool split sizes and disjointness") {
  const auto task = default_task();
  const auto xs = generate_language(task, make_language(task, 0, "src", 0, 0, 1), 1000, 2);
  const auto pools = split_pools(xs, PoolCounts{}, 42);
  CHECK(pools.discovery.examples.size() == 400);
  CHECK(pools.heldout_tuning.examples.size() == 100);
  CHECK(pools.validation.examples.size() == 100);
  CHECK(pools.test.examples.size() == 400);
  CHECK(pools.test.kind == PoolKind::test);
  std::set<std::uint64_t> all;
  for (const auto* pool : {&pools.discovery, &pools.heldout_tuning, &pools.validation, &pools.test}) {
    const auto s = ids(pool->examples);
    all.insert(s.begin(), s.end());
    CHECK(std::is_sorted(pool->examples.begin(), pool->examples.end(),
                         [](const Example& a, const Example& b) { return a.id < b.id; }));
  }
  CHECK(all.size() == 1000);
  const auto again = split_pools(xs, PoolCounts{}, 42);
  CHECK(again.test.examples == pools.test.examples);
  const auto other = split_pools(xs, PoolCounts{}, 43);
  CHECK(other.test.examples.size() == 400);
  CHECK(other.test.examples != pools.test.examples);
  CHECK_THROWS_AS(split_pools(std::span(xs).first(999), PoolCounts{}, 1), ConfigError);
}

TEST_CASE("pool split of four examples is a permutation") {
  const auto task = default_task();
  const auto xs = generate_language(task, make_language(task, 0, "src", 0, 0, 1), 4, 2);
  const auto pools = split_pools(xs, PoolCounts{1, 1, 1, 1}, 7);
  std::set<std::uint64_t> got;
  for (const auto* pool : {&pools.discovery, &pools.heldout_tuning, &pools.validation, &pools.test}) {
    REQUIRE(pool->examples.size() == 1);
    got.insert(pool->examples[0].id);
  }
  CHECK(got == ids(xs));
}

TEST_CASE("balanced mean set sizes") {
  const auto task = default_task();
  const auto xs = generate_language(task, make_language(task, 0, "src", 0, 0, 1), 300, 2);
  auto count = [](const std::vector<Example>& s) {
    std::map<int, int> c;
    for (const auto& x : s) {
      ++c[x.label];
    }
    return c;
  };
  const auto m50 = sample_balanced_mean_set(xs, 3, 50, 1);
  CHECK(m50.size() == 48);
  CHECK(count(m50) == std::map<int, int>{{0, 16}, {1, 16}, {2, 16}});
  const auto m6 = sample_balanced_mean_set(std::span(xs).first(30), 3, 6, 1);
  CHECK(count(m6) == std::map<int, int>{{0, 2}, {1, 2}, {2, 2}});

  std::vector<Example> short_pool;
  std::map<int, int> taken;
  for (const auto& x : xs) {
    const int cap = x.label == 1 ? 5 : 40;
    if (taken[x.label] < cap) {
      short_pool.push_back(x);
      ++taken[x.label];
    }
  }
  const auto reduced = sample_balanced_mean_set(short_pool, 3, 50, 1);
  CHECK(reduced.size() == 15);

  std::vector<Example> missing;
  for (const auto& x : xs) {
    if (x.label != 2) {
      missing.push_back(x);
    }
  }
  CHECK_THROWS_WITH_AS(sample_balanced_mean_set(missing, 3, 50, 1), doctest::Contains("class 2"), BalanceError);
}

TEST_CASE("discovery inputs: correct predictions only, in canonical order") {
  const auto task = default_task();
  const auto xs = generate_language(task, make_language(task, 0, "src", 0, 0, 1), 90, 2);
  // Unembedding row of class 0 only: a majority-class predictor.
  Parameters majority(config_for(task));
  majority.tensor("ln_final.bias")[0] = 1.0F;
  const auto d = static_cast<std::size_t>(majority.config().d_model);
  majority.tensor("unembed")[static_cast<std::size_t>(task.label_token(0)) * d] = 1.0F;
  const auto sel = select_discovery_inputs(majority, xs, 50);
  int brute = 0;
  for (const auto& x : xs) {
    brute += x.label == 0 ? 1 : 0;
  }
  CHECK(static_cast<int>(sel.examples.size()) == brute);  // 30 of 90
  CHECK(sel.short_of_target);
  for (const auto& x : sel.examples) {
    CHECK(x.label == 0);
  }
  CHECK(std::is_sorted(sel.examples.begin(), sel.examples.end(),
                       [](const Example& a, const Example& b) { return a.id < b.id; }));
  const auto five = select_discovery_inputs(majority, xs, 5);
  CHECK(five.examples.size() == 5);
  CHECK_FALSE(five.short_of_target);

  std::vector<Example> no_zero;
  for (const auto& x : xs) {
    if (x.label != 0) {
      no_zero.push_back(x);
    }
  }
  CHECK_THROWS_AS(select_discovery_inputs(majority, no_zero, 50), DiscoveryError);
}

TEST_CASE("dataset file round-trip") {
  const auto task = default_task();
  const auto xs = generate_language(task, make_language(task, 3, "tgt", 0.5, 0.2, 1), 20, 2);
  const auto path = std::filesystem::temp_directory_path() / "ctsft_corpus" / "data.tsv";
  write_dataset(path, xs);
  CHECK(read_dataset(path) == xs);
}
