#include "ctsft/circuit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "ctsft/errors.hpp"

namespace ctsft {

void CircuitConfig::validate() const {
  if (!(p > 0.0 && p <= 1.0)) {
    throw ConfigError("selection ratio p must lie in (0, 1]");
  }
  if (max_depth < 0 || max_depth > kMaxCircuitDepth) {
    throw ConfigError("max_depth must lie in [0, " + std::to_string(kMaxCircuitDepth) + "]");
  }
  for (int k : k_per_depth) {
    if (k < 1) {
      throw ConfigError("per-depth K overrides must be positive");
    }
  }
}

int heads_per_depth(double p, int total_heads) {
  return std::max(1, static_cast<int>(std::lround(p * total_heads)));
}

std::vector<HeadId> Circuit::heads() const { return heads_through(static_cast<int>(depths.size()) - 1); }

std::vector<HeadId> Circuit::heads_through(int depth) const {
  std::set<HeadId> all;
  for (int d = 0; d <= depth && d < static_cast<int>(depths.size()); ++d) {
    for (const auto& s : depths[static_cast<std::size_t>(d)]) {
      all.insert(s.head);
    }
  }
  return {all.begin(), all.end()};
}

RelevanceTable DecompositionScorer::readout(std::span<const HeadId> candidates) const {
  return score_readout(params_, means_, inputs_, candidates, rule_);
}

RelevanceTable DecompositionScorer::frontier(std::span<const HeadId> candidates,
                                             std::span<const HeadId> targets) const {
  return score_frontier(params_, means_, inputs_, candidates, targets, rule_);
}

Circuit discover(const CircuitScorer& scorer, const ModelConfig& model, const CircuitConfig& config) {
  config.validate();
  Circuit circuit;
  circuit.config = config;
  const auto total = model.total_heads();
  auto k_at = [&](int depth) {
    const auto d = static_cast<std::size_t>(depth);
    return d < config.k_per_depth.size() ? config.k_per_depth[d] : heads_per_depth(config.p, total);
  };
  auto take_top = [](const RelevanceTable& table, int k) {
    std::vector<SelectedHead> out;
    for (const auto& h : table.ranked()) {
      if (static_cast<int>(out.size()) == k) {
        break;
      }
      out.push_back({h, table.score(h)});
    }
    return out;
  };

  const auto candidates = all_heads(model);
  const auto root = scorer.readout(candidates);
  circuit.readout_scores = root.scores;
  circuit.depths.push_back(take_top(root, k_at(0)));

  std::set<HeadId> selected;
  for (const auto& s : circuit.depths.back()) {
    selected.insert(s.head);
  }
  for (int depth = 1;; ++depth) {
    if (depth > config.max_depth) {
      circuit.stop_reason = "max_depth";
      break;
    }
    const auto& previous = circuit.depths.back();
    std::vector<HeadId> frontier;
    int deepest = -1;
    for (const auto& s : previous) {
      frontier.push_back(s.head);
      deepest = std::max(deepest, s.head.layer);
    }
    if (deepest <= 0) {
      circuit.stop_reason = "frontier reached layer 0";
      break;
    }
    std::vector<HeadId> upstream;
    for (const auto& h : candidates) {
      if (h.layer < deepest && !selected.contains(h)) {
        upstream.push_back(h);
      }
    }
    if (upstream.empty()) {
      circuit.stop_reason = "no upstream candidates";
      break;
    }
    const auto table = scorer.frontier(upstream, frontier);
    circuit.depths.push_back(take_top(table, k_at(depth)));
    for (const auto& s : circuit.depths.back()) {
      selected.insert(s.head);
    }
  }
  return circuit;
}

Circuit discover(const Parameters& params, const BaselineMeans& means, std::span<const PreparedInput> inputs,
                 const CircuitConfig& config) {
  if (inputs.empty()) {
    throw InputError("circuit discovery needs at least one input");
  }
  const DecompositionScorer scorer(params, means, inputs, config.rule);
  auto circuit = discover(scorer, params.config(), config);
  circuit.provenance.mean_set = means.set_hash;
  return circuit;
}

std::string to_string(ControlKind kind) {
  switch (kind) {
    case ControlKind::random:
      return "random";
    case ControlKind::least_relevant:
      return "least_relevant";
    case ControlKind::near_zero:
      return "near_zero";
  }
  return "unknown";
}

std::vector<HeadId> control_selection(ControlKind kind, const std::map<HeadId, double>& scores, int k,
                                      std::uint64_t seed) {
  if (k < 0 || k > static_cast<int>(scores.size())) {
    throw InputError("cannot select " + std::to_string(k) + " heads from a table of " +
                     std::to_string(scores.size()));
  }
  std::vector<std::pair<HeadId, double>> items(scores.begin(), scores.end());  // lexicographic
  std::vector<HeadId> out;
  if (kind == ControlKind::random) {
    std::vector<HeadId> heads;
    for (const auto& [h, s] : items) {
      heads.push_back(h);
    }
    std::mt19937_64 rng(seed);
    std::sample(heads.begin(), heads.end(), std::back_inserter(out), k, rng);
  } else {
    auto key = [kind](double s) { return kind == ControlKind::least_relevant ? s : std::abs(s); };
    std::stable_sort(items.begin(), items.end(),
                     [&](const auto& a, const auto& b) { return key(a.second) < key(b.second); });
    for (int i = 0; i < k; ++i) {
      out.push_back(items[static_cast<std::size_t>(i)].first);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

TopologyHistogram topology(const Circuit& circuit, int n_layers) {
  TopologyHistogram hist;
  hist.n_layers = n_layers;
  std::set<HeadId> seen;
  std::vector<int> running(static_cast<std::size_t>(n_layers), 0);
  for (const auto& depth : circuit.depths) {
    std::vector<int> row(static_cast<std::size_t>(n_layers), 0);
    for (const auto& s : depth) {
      if (s.head.layer < 0 || s.head.layer >= n_layers) {
        throw InputError("circuit head " + to_string(s.head) + " outside the model");
      }
      if (seen.insert(s.head).second) {
        ++row[static_cast<std::size_t>(s.head.layer)];
        ++running[static_cast<std::size_t>(s.head.layer)];
      }
    }
    hist.per_depth.push_back(row);
    hist.cumulative.push_back(running);
  }
  return hist;
}

void write_circuit(const std::filesystem::path& path, const Circuit& circuit) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw IoError("cannot write " + path.string());
  }
  out.precision(17);
  out << "# ctsft circuit v1\n";
  out << "config.rule " << to_string(circuit.config.rule) << "\n";
  out << "config.p " << circuit.config.p << "\n";
  out << "config.max_depth " << circuit.config.max_depth << "\n";
  out << "config.seed " << circuit.config.seed << "\n";
  out << "config.k_per_depth";
  for (int k : circuit.config.k_per_depth) {
    out << " " << k;
  }
  out << "\n";
  out << "provenance.checkpoint " << (circuit.provenance.checkpoint.empty() ? "-" : circuit.provenance.checkpoint)
      << "\n";
  out << "provenance.inputs " << (circuit.provenance.inputs.empty() ? "-" : circuit.provenance.inputs) << "\n";
  out << "provenance.mean_set " << (circuit.provenance.mean_set.empty() ? "-" : circuit.provenance.mean_set) << "\n";
  out << "stop_reason " << circuit.stop_reason << "\n";
  for (std::size_t d = 0; d < circuit.depths.size(); ++d) {
    for (const auto& s : circuit.depths[d]) {
      out << "select " << d << " " << s.head.layer << " " << s.head.head << " " << s.score << "\n";
    }
  }
  for (const auto& [h, s] : circuit.readout_scores) {
    out << "readout " << h.layer << " " << h.head << " " << s << "\n";
  }
}

Circuit read_circuit(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("cannot open " + path.string());
  }
  Circuit c;
  std::string line;
  auto dash = [](std::string s) { return s == "-" ? std::string() : s; };
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') {
      continue;
    }
    std::istringstream f(line);
    std::string key;
    f >> key;
    if (key == "config.rule") {
      std::string r;
      f >> r;
      c.config.rule = parse_scoring_rule(r);
    } else if (key == "config.p") {
      f >> c.config.p;
    } else if (key == "config.max_depth") {
      f >> c.config.max_depth;
    } else if (key == "config.seed") {
      f >> c.config.seed;
    } else if (key == "config.k_per_depth") {
      int k = 0;
      while (f >> k) {
        c.config.k_per_depth.push_back(k);
      }
      f.clear();
    } else if (key == "provenance.checkpoint") {
      f >> c.provenance.checkpoint;
      c.provenance.checkpoint = dash(c.provenance.checkpoint);
    } else if (key == "provenance.inputs") {
      f >> c.provenance.inputs;
      c.provenance.inputs = dash(c.provenance.inputs);
    } else if (key == "provenance.mean_set") {
      f >> c.provenance.mean_set;
      c.provenance.mean_set = dash(c.provenance.mean_set);
    } else if (key == "stop_reason") {
      std::getline(f >> std::ws, c.stop_reason);
    } else if (key == "select") {
      std::size_t d = 0;
      SelectedHead s;
      f >> d >> s.head.layer >> s.head.head >> s.score;
      if (c.depths.size() <= d) {
        c.depths.resize(d + 1);
      }
      c.depths[d].push_back(s);
    } else if (key == "readout") {
      HeadId h;
      double s = 0.0;
      f >> h.layer >> h.head >> s;
      c.readout_scores[h] = s;
    } else {
      throw IoError(path.string() + ": unknown circuit line '" + line + "'");
    }
    if (f.fail() && !f.eof()) {
      throw IoError(path.string() + ": malformed circuit line '" + line + "'");
    }
  }
  return c;
}

}  // namespace ctsft
