#include "ctsft/tuning.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "ctsft/checkpoint.hpp"
#include "ctsft/errors.hpp"

namespace ctsft {

std::string to_string(Scope scope) {
  switch (scope) {
    case Scope::circuit:
      return "circuit";
    case Scope::random:
      return "random";
    case Scope::least_relevant:
      return "least_relevant";
    case Scope::near_zero:
      return "near_zero";
    case Scope::full:
      return "full";
  }
  return "unknown";
}

Scope parse_scope(const std::string& name) {
  if (name == "circuit") return Scope::circuit;
  if (name == "random") return Scope::random;
  if (name == "least_relevant" || name == "least") return Scope::least_relevant;
  if (name == "near_zero") return Scope::near_zero;
  if (name == "full") return Scope::full;
  throw ConfigError("unknown scope '" + name + "'");
}

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::adam ? "adam" : "sgd"; }

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "adam") return OptimizerKind::adam;
  if (name == "sgd") return OptimizerKind::sgd;
  throw ConfigError("unknown optimizer '" + name + "'");
}

HeadMask::HeadMask(const Parameters& params, std::vector<HeadId> heads, Scope scope, bool final_layer_norm)
    : scope_(scope), heads_(std::move(heads)), total_(params.size()) {
  std::sort(heads_.begin(), heads_.end());
  heads_.erase(std::unique(heads_.begin(), heads_.end()), heads_.end());
  std::vector<CoordRange> raw;
  if (scope_ == Scope::full) {
    raw.push_back({0, total_});
  } else {
    for (const auto& h : heads_) {
      const auto slices = head_param_slices(params, h);
      raw.insert(raw.end(), slices.begin(), slices.end());
    }
    for (const auto& t : params.layout().tensors()) {
      if (t.group != ParamGroup::layer_norm) {
        continue;
      }
      if (t.layer < 0 && !final_layer_norm) {
        continue;
      }
      raw.push_back({t.offset, t.offset + t.size()});
    }
  }
  std::sort(raw.begin(), raw.end(), [](const auto& a, const auto& b) { return a.begin < b.begin; });
  for (const auto& r : raw) {
    if (!ranges_.empty() && r.begin <= ranges_.back().end) {
      ranges_.back().end = std::max(ranges_.back().end, r.end);
    } else {
      ranges_.push_back(r);
    }
  }
  for (const auto& r : ranges_) {
    count_ += r.end - r.begin;
  }
}

bool HeadMask::contains(std::size_t coord) const {
  auto it = std::upper_bound(ranges_.begin(), ranges_.end(), coord,
                             [](std::size_t c, const CoordRange& r) { return c < r.begin; });
  if (it == ranges_.begin()) {
    return false;
  }
  --it;
  return coord < it->end;
}

void TrainConfig::validate() const {
  if (epochs < 0 || batch_size <= 0 || !(learning_rate > 0.0)) {
    throw ConfigError("training needs epochs >= 0, batch_size > 0 and learning_rate > 0");
  }
  if (max_steps < 0) {
    throw ConfigError("max_steps must be non-negative");
  }
}

MaskedOptimizer::MaskedOptimizer(const HeadMask& mask, const TrainConfig& config)
    : ranges_(mask.ranges()),
      kind_(config.optimizer),
      lr_(static_cast<float>(config.learning_rate)),
      beta1_(static_cast<float>(config.beta1)),
      beta2_(static_cast<float>(config.beta2)),
      eps_(static_cast<float>(config.epsilon)) {
  if (kind_ == OptimizerKind::adam) {
    m_.assign(mask.count(), 0.0F);
    v_.assign(mask.count(), 0.0F);
  }
}

void MaskedOptimizer::step(std::span<float> params, std::span<const float> gradient) {
  ++t_;
  if (kind_ == OptimizerKind::sgd) {
    for (const auto& r : ranges_) {
      for (std::size_t i = r.begin; i < r.end; ++i) {
        params[i] -= lr_ * gradient[i];
      }
    }
    return;
  }
  const float c1 = 1.0F - std::pow(beta1_, static_cast<float>(t_));
  const float c2 = 1.0F - std::pow(beta2_, static_cast<float>(t_));
  std::size_t k = 0;
  for (const auto& r : ranges_) {
    for (std::size_t i = r.begin; i < r.end; ++i, ++k) {
      const float g = gradient[i];
      m_[k] = beta1_ * m_[k] + (1.0F - beta1_) * g;
      v_[k] = beta2_ * v_[k] + (1.0F - beta2_) * g * g;
      params[i] -= lr_ * (m_[k] / c1) / (std::sqrt(v_[k] / c2) + eps_);
    }
  }
}

TuneResult train(const Parameters& start, std::span<const Example> examples, const HeadMask& mask,
                 const TrainConfig& config) {
  config.validate();
  if (mask.total() != start.size()) {
    throw InputError("mask built for a different parameter layout");
  }
  TuneResult out{start, {}};
  auto& rec = out.record;
  rec.initial_hash = checkpoint_hash(start);
  rec.scope = mask.scope();
  rec.heads = mask.heads();
  rec.data_hash = examples_hash(examples);
  rec.n = static_cast<int>(examples.size());
  rec.seed = config.seed;
  rec.trainable = mask.count();
  rec.total = mask.total();

  const bool run = !examples.empty() && (config.max_steps > 0 || config.epochs > 0);
  if (run) {
    MaskedOptimizer opt(mask, config);
    std::mt19937_64 rng(config.seed);
    std::vector<std::size_t> order(examples.size());
    const auto batches_per_epoch =
        (static_cast<int>(examples.size()) + config.batch_size - 1) / config.batch_size;
    const int total_steps = config.max_steps > 0 ? config.max_steps : config.epochs * batches_per_epoch;
    int step = 0;
    for (int epoch = 0; step < total_steps; ++epoch) {
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      EpochMetrics em{epoch, 0.0, 0};
      for (std::size_t b = 0; b < order.size() && step < total_steps; b += static_cast<std::size_t>(config.batch_size)) {
        const auto end = std::min(order.size(), b + static_cast<std::size_t>(config.batch_size));
        std::vector<LabeledTokens> batch;
        for (std::size_t i = b; i < end; ++i) {
          const auto& ex = examples[order[i]];
          batch.push_back({ex.tokens, ex.label});
        }
        Gradient g;
        try {
          g = backward(out.params, batch);
        } catch (const NumericError& e) {
          throw TrainingError("training diverged at step " + std::to_string(step) + ": " + e.what());
        }
        opt.step(out.params.values(), g.values);
        for (const auto& r : mask.ranges()) {
          for (std::size_t i = r.begin; i < r.end; ++i) {
            if (!std::isfinite(out.params.values()[i])) {
              throw TrainingError("training diverged at step " + std::to_string(step) +
                                  ": non-finite parameter " + std::to_string(i));
            }
          }
        }
        em.mean_loss += g.loss;
        ++em.steps;
        ++step;
      }
      em.mean_loss /= std::max(1, em.steps);
      rec.epochs.push_back(em);
      if (config.on_epoch) {
        config.on_epoch(epoch, out.params);
      }
    }
    rec.steps = step;
  }
  rec.final_hash = checkpoint_hash(out.params);
  return out;
}

TuneResult competence_tune(const Parameters& base, std::span<const Example> pool, int n_src,
                           const TrainConfig& config) {
  if (n_src < 0 || n_src > static_cast<int>(pool.size())) {
    throw ConfigError("n_src = " + std::to_string(n_src) + " exceeds the source pool of " +
                      std::to_string(pool.size()));
  }
  const HeadMask mask(base, {}, Scope::full);
  return train(base, pool.first(static_cast<std::size_t>(n_src)), mask, config);
}

TuneResult ct_sft(const Parameters& theta1, std::span<const HeadId> heads, Scope scope,
                  std::span<const Example> tuning_set, const TrainConfig& config, bool allow_layer_norm_only) {
  if (scope != Scope::full && heads.empty() && !allow_layer_norm_only) {
    throw ConfigError("scope " + to_string(scope) + " needs at least one head");
  }
  const HeadMask mask(theta1, {heads.begin(), heads.end()}, scope, config.final_layer_norm);
  return train(theta1, tuning_set, mask, config);
}

Evaluation evaluate(const Parameters& params, std::span<const Example> examples) {
  if (examples.empty()) {
    throw InputError("cannot evaluate on an empty set");
  }
  const int n_classes = params.config().n_labels();
  Evaluation ev;
  ev.n = static_cast<int>(examples.size());
  ev.class_counts.assign(static_cast<std::size_t>(n_classes), 0);
  std::vector<int> hits(static_cast<std::size_t>(n_classes), 0);
  int correct = 0;
  double margin = 0.0;
  for (const auto& ex : examples) {
    if (ex.label < 0 || ex.label >= n_classes) {
      throw InputError("example " + std::to_string(ex.id) + " has label " + std::to_string(ex.label) +
                       " outside the configured label set");
    }
    const auto z = logits(params, ex.tokens);
    const auto best = static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
    float other = -std::numeric_limits<float>::infinity();
    for (int c = 0; c < n_classes; ++c) {
      if (c != ex.label) {
        other = std::max(other, z[static_cast<std::size_t>(c)]);
      }
    }
    margin += static_cast<double>(z[static_cast<std::size_t>(ex.label)]) - other;
    ++ev.class_counts[static_cast<std::size_t>(ex.label)];
    if (best == ex.label) {
      ++correct;
      ++hits[static_cast<std::size_t>(ex.label)];
    }
  }
  ev.accuracy = static_cast<double>(correct) / ev.n;
  ev.mean_margin = margin / ev.n;
  for (int c = 0; c < n_classes; ++c) {
    const auto cnt = ev.class_counts[static_cast<std::size_t>(c)];
    ev.class_accuracy.push_back(cnt == 0 ? std::numeric_limits<double>::quiet_NaN()
                                         : static_cast<double>(hits[static_cast<std::size_t>(c)]) / cnt);
  }
  return ev;
}

void write_run_record(const std::filesystem::path& path, const RunRecord& r) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw IoError("cannot write " + path.string());
  }
  out.precision(17);
  out << "# ctsft run record v1\n";
  out << "initial_hash " << r.initial_hash << "\n";
  out << "final_hash " << r.final_hash << "\n";
  out << "scope " << to_string(r.scope) << "\n";
  out << "heads";
  for (const auto& h : r.heads) {
    out << " " << h.layer << ":" << h.head;
  }
  out << "\n";
  out << "circuit " << (r.circuit_provenance.empty() ? "-" : r.circuit_provenance) << "\n";
  out << "data_hash " << r.data_hash << "\n";
  out << "n " << r.n << "\n";
  out << "seed " << r.seed << "\n";
  out << "trainable " << r.trainable << "\n";
  out << "total " << r.total << "\n";
  out << "steps " << r.steps << "\n";
  for (const auto& e : r.epochs) {
    out << "epoch " << e.epoch << " " << e.steps << " " << e.mean_loss << "\n";
  }
}

RunRecord read_run_record(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("cannot open " + path.string());
  }
  RunRecord r;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') {
      continue;
    }
    std::istringstream f(line);
    std::string key;
    f >> key;
    if (key == "initial_hash") {
      f >> r.initial_hash;
    } else if (key == "final_hash") {
      f >> r.final_hash;
    } else if (key == "scope") {
      std::string s;
      f >> s;
      r.scope = parse_scope(s);
    } else if (key == "heads") {
      std::string tok;
      while (f >> tok) {
        const auto colon = tok.find(':');
        if (colon == std::string::npos) {
          throw IoError(path.string() + ": malformed head '" + tok + "'");
        }
        r.heads.push_back({std::stoi(tok.substr(0, colon)), std::stoi(tok.substr(colon + 1))});
      }
    } else if (key == "circuit") {
      f >> r.circuit_provenance;
      if (r.circuit_provenance == "-") {
        r.circuit_provenance.clear();
      }
    } else if (key == "data_hash") {
      f >> r.data_hash;
    } else if (key == "n") {
      f >> r.n;
    } else if (key == "seed") {
      f >> r.seed;
    } else if (key == "trainable") {
      f >> r.trainable;
    } else if (key == "total") {
      f >> r.total;
    } else if (key == "steps") {
      f >> r.steps;
    } else if (key == "epoch") {
      EpochMetrics e;
      f >> e.epoch >> e.steps >> e.mean_loss;
      r.epochs.push_back(e);
    } else {
      throw IoError(path.string() + ": unknown run record line '" + line + "'");
    }
  }
  return r;
}

}  // namespace ctsft
