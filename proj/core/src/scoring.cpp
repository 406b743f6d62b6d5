#include "ctsft/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include "ctsft/errors.hpp"

namespace ctsft {

std::string to_string(ScoringRule rule) { return rule == ScoringRule::magnitude ? "magnitude" : "directional"; }

ScoringRule parse_scoring_rule(const std::string& name) {
  if (name == "magnitude" || name == "norm") {
    return ScoringRule::magnitude;
  }
  if (name == "directional" || name == "projection") {
    return ScoringRule::directional;
  }
  throw ConfigError("unknown scoring rule '" + name + "'");
}

double magnitude_ratio(std::span<const float> beta, std::span<const float> gamma) {
  double num = 0.0;
  double den = 0.0;
  for (float b : beta) {
    num += std::abs(static_cast<double>(b));
  }
  for (float g : gamma) {
    den += std::abs(static_cast<double>(g));
  }
  if (den == 0.0) {
    return std::numeric_limits<double>::infinity();
  }
  return num / den;
}

double logit_margin_score(std::span<const float> beta, int gold, std::span<const int> others) {
  if (others.empty()) {
    throw ConfigError("logit margin needs at least one competitor label");
  }
  double sum = 0.0;
  for (int y : others) {
    if (y == gold) {
      throw ConfigError("gold label listed among its competitors");
    }
    sum += beta[static_cast<std::size_t>(y)];
  }
  return static_cast<double>(beta[static_cast<std::size_t>(gold)]) - sum / static_cast<double>(others.size());
}

std::vector<int> competitors(int gold, int n_classes) {
  std::vector<int> out;
  for (int c = 0; c < n_classes; ++c) {
    if (c != gold) {
      out.push_back(c);
    }
  }
  return out;
}

TaskDirection task_direction(const Parameters& params, int gold, std::span<const int> others) {
  const auto& cfg = params.config();
  if (others.empty()) {
    throw ConfigError("task direction needs at least one competitor label");
  }
  auto row = [&](int cls) {
    if (cls < 0 || cls >= cfg.n_labels()) {
      throw InputError("label " + std::to_string(cls) + " has no unembedding row");
    }
    return params.unembedding_row(cfg.label_tokens[static_cast<std::size_t>(cls)]);
  };
  TaskDirection dir;
  dir.gold = gold;
  dir.others.assign(others.begin(), others.end());
  const auto g = row(gold);
  std::vector<double> acc(g.begin(), g.end());
  for (int y : others) {
    const auto r = row(y);
    for (std::size_t i = 0; i < acc.size(); ++i) {
      acc[i] -= static_cast<double>(r[i]) / static_cast<double>(others.size());
    }
  }
  double sq = 0.0;
  dir.v_task.resize(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) {
    dir.v_task[i] = static_cast<float>(acc[i]);
    sq += acc[i] * acc[i];
  }
  dir.norm = std::sqrt(sq);
  if (dir.norm == 0.0) {
    throw ScoringError("task direction is zero: label " + std::to_string(gold) +
                       " is indistinguishable from its competitors at the readout");
  }
  return dir;
}

double projection_score(std::span<const float> beta, const TaskDirection& direction) {
  if (beta.size() != direction.v_task.size()) {
    throw InputError("projection: contribution has width " + std::to_string(beta.size()) +
                     ", task direction has width " + std::to_string(direction.v_task.size()));
  }
  double dot = 0.0;
  for (std::size_t i = 0; i < beta.size(); ++i) {
    dot += static_cast<double>(beta[i]) * direction.v_task[i];
  }
  return dot / direction.norm;
}

double RelevanceTable::score(HeadId s) const {
  const auto it = scores.find(s);
  if (it == scores.end()) {
    throw InputError("head " + to_string(s) + " was not scored");
  }
  return it->second;
}

std::vector<HeadId> RelevanceTable::ranked() const {
  std::vector<std::pair<HeadId, double>> items(scores.begin(), scores.end());
  std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) {
      return a.second > b.second;
    }
    return a.first < b.first;
  });
  std::vector<HeadId> out;
  out.reserve(items.size());
  for (const auto& [h, s] : items) {
    out.push_back(h);
  }
  return out;
}

RelevanceTable aggregate(ScoringRule rule, std::vector<RawScore> raw) {
  RelevanceTable table;
  table.rule = rule;
  std::map<HeadId, std::pair<double, int>> sums;
  std::map<HeadId, bool> infinite;
  for (const auto& r : raw) {
    auto& [sum, count] = sums[r.source];
    if (std::isinf(r.score) && r.score > 0) {
      infinite[r.source] = true;
    } else {
      if (!std::isfinite(r.score)) {
        throw NumericError("non-finite relevance score for head " + to_string(r.source));
      }
      sum += r.score;
    }
    ++count;
  }
  for (const auto& [head, acc] : sums) {
    if (infinite.contains(head)) {
      table.scores[head] = std::numeric_limits<double>::infinity();
      table.infinite.push_back(head);
      table.warnings.push_back("head " + to_string(head) + " has a zero irrelevant stream; ranked first");
    } else {
      table.scores[head] = acc.first / acc.second;
    }
  }
  table.raw = std::move(raw);
  return table;
}

std::vector<PreparedInput> prepare_inputs(const Parameters& params, std::span<const Example> examples) {
  std::vector<PreparedInput> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) {
    out.push_back({ex.id, ex.label, forward(params, ex.tokens)});
  }
  return out;
}

namespace {

std::vector<TaskDirection> directions_by_label(const Parameters& params) {
  std::vector<TaskDirection> dirs;
  const int n = params.config().n_labels();
  for (int c = 0; c < n; ++c) {
    dirs.push_back(task_direction(params, c, competitors(c, n)));
  }
  return dirs;
}

}  // namespace

RelevanceTable score_readout(const Parameters& params, const BaselineMeans& means,
                             std::span<const PreparedInput> inputs, std::span<const HeadId> candidates,
                             ScoringRule rule) {
  if (inputs.empty()) {
    throw InputError("no discovery inputs to score");
  }
  const int n = params.config().n_labels();
  const Target readout = Target::readout();
  std::vector<RawScore> raw;
  raw.reserve(inputs.size() * candidates.size());
  for (const auto& in : inputs) {
    const auto others = competitors(in.label, n);
    for (const auto& s : candidates) {
      const auto dec = decompose(params, means, in.trace, s, std::span(&readout, 1), {.input_id = in.id});
      const auto& c = dec.contributions.front();
      const double score =
          rule == ScoringRule::magnitude ? magnitude_ratio(c.beta, c.gamma) : logit_margin_score(c.beta, in.label, others);
      raw.push_back({in.id, s, readout, score});
    }
  }
  return aggregate(rule, std::move(raw));
}

RelevanceTable score_frontier(const Parameters& params, const BaselineMeans& means,
                              std::span<const PreparedInput> inputs, std::span<const HeadId> candidates,
                              std::span<const HeadId> frontier, ScoringRule rule) {
  if (inputs.empty()) {
    throw InputError("no discovery inputs to score");
  }
  const auto dirs = rule == ScoringRule::directional ? directions_by_label(params) : std::vector<TaskDirection>{};
  std::vector<RawScore> raw;
  for (const auto& in : inputs) {
    for (const auto& s : candidates) {
      std::vector<Target> targets;
      for (const auto& t : frontier) {
        if (t.layer > s.layer) {
          targets.push_back(Target::at(t));
        }
      }
      if (targets.empty()) {
        throw TopologyError("candidate " + to_string(s) + " has no downstream frontier head");
      }
      const auto dec = decompose(params, means, in.trace, s, targets, {.input_id = in.id});
      for (const auto& c : dec.contributions) {
        const double score = rule == ScoringRule::magnitude
                                 ? magnitude_ratio(c.beta, c.gamma)
                                 : projection_score(c.beta, dirs[static_cast<std::size_t>(in.label)]);
        raw.push_back({in.id, s, c.target, score});
      }
    }
  }
  return aggregate(rule, std::move(raw));
}

void write_score_dump(std::ostream& out, const RelevanceTable& table) {
  out << "input_id\tsource_layer\tsource_head\ttarget\trule\traw_score\n";
  const auto old = out.precision(9);
  for (const auto& r : table.raw) {
    out << r.input_id << '\t' << r.source.layer << '\t' << r.source.head << '\t' << to_string(r.target) << '\t'
        << to_string(table.rule) << '\t' << r.score << '\n';
  }
  out.precision(old);
}

}  // namespace ctsft
