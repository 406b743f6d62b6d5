#include "ctsft/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "ctsft/errors.hpp"
#include "ctsft/hash.hpp"

namespace ctsft {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30U)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27U)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31U);
}

std::vector<double> keyword_distribution(int content_vocab, std::span<const int> keywords, double rate) {
  std::vector<double> p(static_cast<std::size_t>(content_vocab), (1.0 - rate) / content_vocab);
  for (int k : keywords) {
    p[static_cast<std::size_t>(k)] += rate / static_cast<double>(keywords.size());
  }
  return p;
}

}  // namespace

std::vector<int> TaskSpec::label_tokens() const {
  std::vector<int> out;
  for (int c = 0; c < n_classes; ++c) {
    out.push_back(label_token(c));
  }
  return out;
}

TaskSpec make_task(int n_classes, int content_vocab, int keywords_per_class, double keyword_rate, int min_length,
                   int max_length, std::uint64_t seed) {
  if (n_classes < 2) {
    throw ConfigError("a task needs at least two classes");
  }
  if (keywords_per_class < 1 || n_classes * keywords_per_class > content_vocab) {
    throw ConfigError("content vocabulary of " + std::to_string(content_vocab) + " cannot hold " +
                      std::to_string(n_classes) + " x " + std::to_string(keywords_per_class) + " keywords");
  }
  if (min_length < 1 || max_length < min_length) {
    throw ConfigError("invalid sequence-length range");
  }
  if (keyword_rate < 0.0 || keyword_rate > 1.0) {
    throw ConfigError("keyword_rate must lie in [0, 1]");
  }
  TaskSpec task;
  task.n_classes = n_classes;
  task.content_vocab = content_vocab;
  task.keywords_per_class = keywords_per_class;
  task.keyword_rate = keyword_rate;
  task.min_length = min_length;
  task.max_length = max_length;
  task.seed = seed;

  std::vector<int> order(static_cast<std::size_t>(content_vocab));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  for (int c = 0; c < n_classes; ++c) {
    std::vector<int> kw(order.begin() + c * keywords_per_class, order.begin() + (c + 1) * keywords_per_class);
    std::sort(kw.begin(), kw.end());
    task.distributions.push_back(keyword_distribution(content_vocab, kw, keyword_rate));
    task.keywords.push_back(std::move(kw));
  }
  return task;
}

LanguageSpec make_language(const TaskSpec& task, int id, std::string name, double permuted_fraction, double drift,
                           std::uint64_t seed) {
  if (permuted_fraction < 0.0 || permuted_fraction > 1.0 || drift < 0.0 || drift > 1.0) {
    throw ConfigError("permuted fraction and drift must lie in [0, 1]");
  }
  LanguageSpec lang;
  lang.id = id;
  lang.name = std::move(name);
  lang.drift = drift;
  lang.seed = seed;
  lang.permutation.resize(static_cast<std::size_t>(task.content_vocab));
  std::iota(lang.permutation.begin(), lang.permutation.end(), 0);

  std::mt19937_64 rng(splitmix(seed));
  std::vector<int> chosen(lang.permutation);
  std::shuffle(chosen.begin(), chosen.end(), rng);
  const auto count = static_cast<std::size_t>(std::lround(permuted_fraction * task.content_vocab));
  chosen.resize(count);
  // One random cycle through the chosen tokens, so every chosen token moves.
  if (count > 1) {
    for (std::size_t i = 0; i < count; ++i) {
      lang.permutation[static_cast<std::size_t>(chosen[i])] = chosen[(i + 1) % count];
    }
  }
  return lang;
}

std::vector<std::vector<double>> language_distributions(const TaskSpec& task, const LanguageSpec& lang) {
  if (lang.drift == 0.0) {
    return task.distributions;
  }
  // Language-specific keyword sets for the drifted mass.
  std::vector<int> order(static_cast<std::size_t>(task.content_vocab));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(splitmix(lang.seed ^ 0x5bd1e995ULL));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<double>> out;
  for (int c = 0; c < task.n_classes; ++c) {
    const std::span<const int> kw(order.data() + c * task.keywords_per_class,
                                  static_cast<std::size_t>(task.keywords_per_class));
    const auto shifted = keyword_distribution(task.content_vocab, kw, task.keyword_rate);
    std::vector<double> p(static_cast<std::size_t>(task.content_vocab));
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] = (1.0 - lang.drift) * task.distributions[static_cast<std::size_t>(c)][i] + lang.drift * shifted[i];
    }
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<Example> generate_language(const TaskSpec& task, const LanguageSpec& lang, int n, std::uint64_t seed) {
  if (n < task.n_classes) {
    throw ConfigError("need at least one example per class (n=" + std::to_string(n) + ")");
  }
  if (static_cast<int>(lang.permutation.size()) != task.content_vocab) {
    throw ConfigError("language '" + lang.name + "' permutation covers " + std::to_string(lang.permutation.size()) +
                      " tokens but the content vocabulary has " + std::to_string(task.content_vocab));
  }
  std::vector<bool> seen(lang.permutation.size(), false);
  for (int image : lang.permutation) {
    if (image < 0 || image >= task.content_vocab || seen[static_cast<std::size_t>(image)]) {
      throw ConfigError("language '" + lang.name + "' permutation is not a bijection");
    }
    seen[static_cast<std::size_t>(image)] = true;
  }

  const auto dists = language_distributions(task, lang);
  std::vector<std::discrete_distribution<int>> samplers;
  for (const auto& p : dists) {
    samplers.emplace_back(p.begin(), p.end());
  }

  std::mt19937_64 rng(splitmix(seed));
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    labels[static_cast<std::size_t>(i)] = i % task.n_classes;
  }
  std::shuffle(labels.begin(), labels.end(), rng);
  std::uniform_int_distribution<int> length(task.min_length, task.max_length);

  std::vector<Example> out;
  out.reserve(static_cast<std::size_t>(n));
  const std::uint64_t stream = splitmix(splitmix(seed) ^ (static_cast<std::uint64_t>(lang.id) << 32U));
  for (int i = 0; i < n; ++i) {
    Example ex;
    ex.id = splitmix(stream + static_cast<std::uint64_t>(i));
    ex.label = labels[static_cast<std::size_t>(i)];
    ex.language = lang.id;
    const int len = length(rng);
    for (int t = 0; t < len; ++t) {
      const int local = samplers[static_cast<std::size_t>(ex.label)](rng);
      ex.tokens.push_back(task.content_token(lang.permutation[static_cast<std::size_t>(local)]));
    }
    ex.tokens.push_back(TaskSpec::query_token());
    out.push_back(std::move(ex));
  }
  return out;
}

std::string to_string(PoolKind kind) {
  switch (kind) {
    case PoolKind::discovery:
      return "discovery";
    case PoolKind::heldout_tuning:
      return "heldout";
    case PoolKind::validation:
      return "validation";
    case PoolKind::test:
      return "test";
  }
  return "unknown";
}

void canonical_order(std::vector<Example>& examples) {
  std::sort(examples.begin(), examples.end(), [](const Example& a, const Example& b) { return a.id < b.id; });
}

Pools split_pools(std::span<const Example> examples, const PoolCounts& counts, std::uint64_t seed) {
  if (counts.discovery < 0 || counts.heldout_tuning < 0 || counts.validation < 0 || counts.test < 0) {
    throw ConfigError("pool counts must be non-negative");
  }
  if (static_cast<int>(examples.size()) < counts.total()) {
    throw ConfigError("need " + std::to_string(counts.total()) + " examples for the pools, have " +
                      std::to_string(examples.size()));
  }
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(splitmix(seed));
  std::shuffle(order.begin(), order.end(), rng);

  Pools pools;
  std::size_t next = 0;
  auto fill = [&](TaggedPool& pool, int count) {
    for (int i = 0; i < count; ++i) {
      pool.examples.push_back(examples[order[next++]]);
    }
    canonical_order(pool.examples);
  };
  fill(pools.discovery, counts.discovery);
  fill(pools.heldout_tuning, counts.heldout_tuning);
  fill(pools.validation, counts.validation);
  fill(pools.test, counts.test);
  return pools;
}

int predict(const Parameters& params, const Example& example) {
  const auto z = logits(params, example.tokens);
  return static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
}

DiscoverySelection select_discovery_inputs(const Parameters& params, std::span<const Example> pool, int k) {
  std::vector<Example> ordered(pool.begin(), pool.end());
  canonical_order(ordered);
  DiscoverySelection sel;
  for (const auto& ex : ordered) {
    if (static_cast<int>(sel.examples.size()) >= k) {
      break;
    }
    if (predict(params, ex) == ex.label) {
      sel.examples.push_back(ex);
    }
  }
  if (sel.examples.empty()) {
    throw DiscoveryError("no correctly predicted example in the discovery pool (task competence too weak)");
  }
  sel.short_of_target = static_cast<int>(sel.examples.size()) < k;
  return sel;
}

std::vector<Example> sample_balanced_mean_set(std::span<const Example> pool, int n_classes, int k,
                                              std::uint64_t seed) {
  if (n_classes < 1 || k < n_classes) {
    throw ConfigError("mean set size must be at least the number of classes");
  }
  std::vector<std::vector<Example>> by_class(static_cast<std::size_t>(n_classes));
  for (const auto& ex : pool) {
    if (ex.label < 0 || ex.label >= n_classes) {
      throw InputError("example label " + std::to_string(ex.label) + " outside the class range");
    }
    by_class[static_cast<std::size_t>(ex.label)].push_back(ex);
  }
  std::size_t per_class = static_cast<std::size_t>(k / n_classes);
  for (int c = 0; c < n_classes; ++c) {
    const auto available = by_class[static_cast<std::size_t>(c)].size();
    if (available == 0) {
      throw BalanceError("class " + std::to_string(c) + " is absent from the mean-estimation pool");
    }
    per_class = std::min(per_class, available);
  }
  std::mt19937_64 rng(splitmix(seed ^ 0xa5a5a5a5ULL));
  std::vector<Example> out;
  for (auto& members : by_class) {
    canonical_order(members);
    std::shuffle(members.begin(), members.end(), rng);
    out.insert(out.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(per_class));
  }
  canonical_order(out);
  return out;
}

std::vector<LabeledTokens> as_batch(std::span<const Example> examples) {
  std::vector<LabeledTokens> batch;
  batch.reserve(examples.size());
  for (const auto& ex : examples) {
    batch.push_back({ex.tokens, ex.label});
  }
  return batch;
}

std::string examples_hash(std::span<const Example> examples) {
  Fingerprint fp;
  for (const auto& ex : examples) {
    fp.integer(static_cast<std::int64_t>(ex.id));
  }
  return fp.hex();
}

void write_dataset(const std::filesystem::path& path, std::span<const Example> examples) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw IoError("cannot write " + path.string());
  }
  out << "# example_id\tlanguage\tlabel\ttokens\n";
  for (const auto& ex : examples) {
    out << ex.id << '\t' << ex.language << '\t' << ex.label << '\t';
    for (std::size_t i = 0; i < ex.tokens.size(); ++i) {
      out << (i == 0 ? "" : " ") << ex.tokens[i];
    }
    out << '\n';
  }
}

std::vector<Example> read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("cannot open " + path.string());
  }
  std::vector<Example> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') {
      continue;
    }
    std::istringstream fields(line);
    Example ex;
    std::string tokens;
    if (!(fields >> ex.id >> ex.language >> ex.label) || !std::getline(fields >> std::ws, tokens)) {
      throw IoError(path.string() + ":" + std::to_string(line_no) + ": malformed record");
    }
    std::istringstream toks(tokens);
    int t = 0;
    while (toks >> t) {
      ex.tokens.push_back(t);
    }
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace ctsft
