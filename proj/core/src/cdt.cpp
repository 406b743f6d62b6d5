#include "ctsft/cdt.hpp"

#include <algorithm>
#include <cmath>

#include "ctsft/checkpoint.hpp"
#include "ctsft/errors.hpp"
#include "linalg.hpp"

namespace ctsft {

// ---------------------------------------------------------------------------
// Baseline means
// ---------------------------------------------------------------------------

std::span<const float> BaselineMeans::mean(HeadId s) const {
  if (s.layer < 0 || s.layer >= n_layers || s.head < 0 || s.head >= n_heads) {
    throw ConfigError("no baseline mean for head " + to_string(s));
  }
  const auto d = static_cast<std::size_t>(d_model);
  return std::span<const float>(values).subspan(static_cast<std::size_t>(flat_index(s, n_heads)) * d, d);
}

bool BaselineMeans::covers(const ModelConfig& config) const {
  return n_layers == config.n_layers && n_heads == config.n_heads && d_model == config.d_model &&
         values.size() == static_cast<std::size_t>(config.total_heads()) * static_cast<std::size_t>(config.d_model);
}

bool BaselineMeans::balanced() const {
  return std::adjacent_find(class_counts.begin(), class_counts.end(), std::not_equal_to<>()) == class_counts.end();
}

BaselineMeans compute_baseline_means(const ModelConfig& config, std::span<const ActivationTrace> traces) {
  if (traces.empty()) {
    throw InputError("mean-estimation set is empty");
  }
  const auto D = static_cast<std::size_t>(config.d_model);
  std::vector<double> sum(static_cast<std::size_t>(config.total_heads()) * D, 0.0);
  for (const auto& tr : traces) {
    for (const auto& s : all_heads(config)) {
      const auto a = tr.label_head_output(s);
      double* dst = sum.data() + static_cast<std::size_t>(flat_index(s, config.n_heads)) * D;
      for (std::size_t i = 0; i < D; ++i) {
        dst[i] += a[i];
      }
    }
  }
  BaselineMeans means;
  means.n_layers = config.n_layers;
  means.n_heads = config.n_heads;
  means.d_model = config.d_model;
  means.set_size = static_cast<int>(traces.size());
  means.values.resize(sum.size());
  const double inv = 1.0 / static_cast<double>(traces.size());
  for (std::size_t i = 0; i < sum.size(); ++i) {
    means.values[i] = static_cast<float>(sum[i] * inv);
  }
  return means;
}

BaselineMeans compute_baseline_means(const Parameters& params, std::span<const Example> mean_set) {
  if (mean_set.empty()) {
    throw InputError("mean-estimation set is empty");
  }
  std::vector<ActivationTrace> traces;
  traces.reserve(mean_set.size());
  std::vector<int> counts(params.config().label_tokens.size(), 0);
  for (const auto& ex : mean_set) {
    traces.push_back(forward(params, ex.tokens));
    if (ex.label >= 0 && ex.label < static_cast<int>(counts.size())) {
      ++counts[static_cast<std::size_t>(ex.label)];
    }
  }
  auto means = compute_baseline_means(params.config(), traces);
  means.class_counts = std::move(counts);
  means.set_hash = examples_hash(mean_set);
  return means;
}

BaselineMeans zero_means(const ModelConfig& config) {
  BaselineMeans means;
  means.n_layers = config.n_layers;
  means.n_heads = config.n_heads;
  means.d_model = config.d_model;
  means.values.assign(static_cast<std::size_t>(config.total_heads()) * static_cast<std::size_t>(config.d_model),
                      0.0F);
  return means;
}

void save_means(const BaselineMeans& means, const std::string& checkpoint_hash, const std::filesystem::path& path) {
  TensorFile file;
  file.metadata = {{"key.checkpoint", checkpoint_hash},
                   {"key.mean_set", means.set_hash},
                   {"means.n_layers", std::to_string(means.n_layers)},
                   {"means.n_heads", std::to_string(means.n_heads)},
                   {"means.d_model", std::to_string(means.d_model)},
                   {"means.set_size", std::to_string(means.set_size)}};
  std::string counts;
  for (std::size_t i = 0; i < means.class_counts.size(); ++i) {
    counts += (i == 0 ? "" : ",") + std::to_string(means.class_counts[i]);
  }
  file.metadata.emplace_back("means.class_counts", counts.empty() ? "-" : counts);
  file.tensors.push_back({"head_means", means.n_layers * means.n_heads, means.d_model, means.values});
  write_tensor_file(path, file);
}

std::optional<BaselineMeans> load_means(const std::filesystem::path& path, const std::string& checkpoint_hash,
                                        const std::string& set_hash) {
  if (!std::filesystem::exists(path)) {
    return std::nullopt;
  }
  const auto file = read_tensor_file(path);
  if (file.meta("key.checkpoint") != checkpoint_hash || file.meta("key.mean_set") != set_hash) {
    return std::nullopt;
  }
  BaselineMeans means;
  means.n_layers = std::stoi(file.meta("means.n_layers"));
  means.n_heads = std::stoi(file.meta("means.n_heads"));
  means.d_model = std::stoi(file.meta("means.d_model"));
  means.set_size = std::stoi(file.meta("means.set_size"));
  means.set_hash = set_hash;
  const auto& counts = file.meta("means.class_counts");
  if (counts != "-") {
    std::size_t start = 0;
    while (start <= counts.size()) {
      const auto comma = counts.find(',', start);
      means.class_counts.push_back(std::stoi(counts.substr(start, comma - start)));
      if (comma == std::string::npos) {
        break;
      }
      start = comma + 1;
    }
  }
  means.values = file.find("head_means").data;
  return means;
}

// ---------------------------------------------------------------------------
// Decomposition
// ---------------------------------------------------------------------------

std::string to_string(const Target& t) { return t.logits ? std::string("LOGITS") : to_string(t.head); }

double StreamSite::relative_error() const {
  double err = 0.0;
  double scale = 0.0;
  for (std::size_t i = 0; i < full.size(); ++i) {
    err = std::max(err, std::abs(static_cast<double>(gamma[i]) + beta[i] - full[i]));
    scale = std::max(scale, std::abs(static_cast<double>(full[i])));
  }
  return scale > 1e-6 ? err / scale : err;
}

double DualStream::max_relative_error() const {
  double m = 0.0;
  for (const auto& s : sites) {
    m = std::max(m, s.relative_error());
  }
  return m;
}

namespace {

// Streams are carried in double and rounded once on output.
using Vec = std::vector<double>;

std::vector<float> to_float(const Vec& v) { return {v.begin(), v.end()}; }

struct Propagator {
  const Parameters& params;
  const ActivationTrace& trace;
  bool record;
  DualStream streams;

  [[nodiscard]] int last() const { return trace.seq_len - 1; }

  void check(const Vec& v, const std::string& where) const {
    for (double x : v) {
      if (!std::isfinite(x)) {
        throw NumericError("non-finite decomposition stream at " + where);
      }
    }
  }

  void site(const std::string& name, const Vec& gamma, const Vec& beta, const float* full, std::size_t n) {
    if (record) {
      streams.sites.push_back({name, to_float(gamma), to_float(beta), std::vector<float>(full, full + n)});
    }
  }

  // LayerNorm with the full stream's statistics; bias joins gamma.
  void layer_norm(const float* gain, const float* bias, float rstd, const Vec& g_in, const Vec& b_in, Vec& g_out,
                  Vec& b_out) const {
    const auto D = g_in.size();
    g_out.resize(D);
    b_out.resize(D);
    if (params.config().linear_mode) {
      g_out = g_in;
      b_out = b_in;
      return;
    }
    double mg = 0.0;
    double mb = 0.0;
    for (std::size_t i = 0; i < D; ++i) {
      mg += g_in[i];
      mb += b_in[i];
    }
    mg /= static_cast<double>(D);
    mb /= static_cast<double>(D);
    for (std::size_t i = 0; i < D; ++i) {
      g_out[i] = static_cast<double>(gain[i]) * (g_in[i] - mg) * rstd + bias[i];
      b_out[i] = static_cast<double>(gain[i]) * (b_in[i] - mb) * rstd;
    }
  }

  void mlp(int layer, Vec& gamma, Vec& beta) {
    const auto& cfg = params.config();
    const auto& o = params.layout().layers[static_cast<std::size_t>(layer)];
    const auto& lt = trace.layers[static_cast<std::size_t>(layer)];
    const float* w = params.values().data();
    const int D = cfg.d_model;
    const int M = cfg.d_mlp;
    const auto p = static_cast<std::size_t>(last());
    const std::string tag = "layer " + std::to_string(layer);

    Vec gm, bm;
    layer_norm(w + o.ln2_gain, w + o.ln2_bias, lt.ln2_rstd[p], gamma, beta, gm, bm);
    site(tag + " ln2", gm, bm, lt.ln2_out.data() + p * D, static_cast<std::size_t>(D));

    Vec gu(static_cast<std::size_t>(M)), bu(static_cast<std::size_t>(M));
    detail::matvec(w + o.w_in, M, D, gm.data(), gu.data());
    detail::matvec(w + o.w_in, M, D, bm.data(), bu.data());
    for (int i = 0; i < M; ++i) {
      gu[static_cast<std::size_t>(i)] += w[o.b_in + i];
    }
    site(tag + " mlp_pre", gu, bu, lt.mlp_pre.data() + p * M, static_cast<std::size_t>(M));

    Vec ga(gu), ba(bu);
    if (!cfg.linear_mode) {
      for (std::size_t i = 0; i < ga.size(); ++i) {
        ga[i] = detail::gelu(gu[i]);
        ba[i] = detail::gelu(gu[i] + bu[i]) - ga[i];
      }
    }
    site(tag + " mlp_act", ga, ba, lt.mlp_act.data() + p * M, static_cast<std::size_t>(M));

    for (int r = 0; r < D; ++r) {
      const float* row = w + o.w_out + static_cast<std::size_t>(r) * M;
      gamma[static_cast<std::size_t>(r)] += detail::dot(row, ga.data(), M) + w[o.b_out + r];
      beta[static_cast<std::size_t>(r)] += detail::dot(row, ba.data(), M);
    }
    check(gamma, tag + " mlp");
    check(beta, tag + " mlp");
    site(tag + " resid_out", gamma, beta, lt.resid_out.data() + p * D, static_cast<std::size_t>(D));
  }

  // Attention of `layer` at the final position with frozen mixing weights.
  // Returns each head's (gamma, beta) residual write and adds them to the streams.
  void attention(int layer, Vec& gamma, Vec& beta, std::vector<Vec>& head_gamma, std::vector<Vec>& head_beta) {
    const auto& cfg = params.config();
    const auto& o = params.layout().layers[static_cast<std::size_t>(layer)];
    const auto& lt = trace.layers[static_cast<std::size_t>(layer)];
    const float* w = params.values().data();
    const int D = cfg.d_model;
    const int H = cfg.n_heads;
    const int dh = cfg.d_head();
    const int T = trace.seq_len;
    const auto p = static_cast<std::size_t>(last());
    const std::string tag = "layer " + std::to_string(layer);

    Vec gh, bh;
    layer_norm(w + o.ln1_gain, w + o.ln1_bias, lt.ln1_rstd[p], gamma, beta, gh, bh);
    site(tag + " ln1", gh, bh, lt.ln1_out.data() + p * D, static_cast<std::size_t>(D));

    head_gamma.assign(static_cast<std::size_t>(H), Vec(static_cast<std::size_t>(D), 0.0));
    head_beta.assign(static_cast<std::size_t>(H), Vec(static_cast<std::size_t>(D), 0.0));
    Vec gv(static_cast<std::size_t>(dh)), bv(static_cast<std::size_t>(dh));
    Vec gz(static_cast<std::size_t>(dh)), bz(static_cast<std::size_t>(dh));
    for (int hd = 0; hd < H; ++hd) {
      const int c0 = hd * dh;
      detail::matvec(w + o.wv + static_cast<std::size_t>(c0) * D, dh, D, gh.data(), gv.data());
      detail::matvec(w + o.wv + static_cast<std::size_t>(c0) * D, dh, D, bh.data(), bv.data());
      const float* prob = lt.probs.data() + (static_cast<std::size_t>(hd) * T + p) * T;
      std::fill(gz.begin(), gz.end(), 0.0);
      for (std::size_t j = 0; j < p; ++j) {
        const float* vj = lt.v.data() + j * D + c0;
        for (int i = 0; i < dh; ++i) {
          gz[static_cast<std::size_t>(i)] += static_cast<double>(prob[j]) * vj[i];
        }
      }
      for (int i = 0; i < dh; ++i) {
        gz[static_cast<std::size_t>(i)] += static_cast<double>(prob[p]) * gv[static_cast<std::size_t>(i)];
        bz[static_cast<std::size_t>(i)] = static_cast<double>(prob[p]) * bv[static_cast<std::size_t>(i)];
      }
      auto& ga = head_gamma[static_cast<std::size_t>(hd)];
      auto& ba = head_beta[static_cast<std::size_t>(hd)];
      for (int r = 0; r < D; ++r) {
        const float* row = w + o.wo + static_cast<std::size_t>(r) * D + c0;
        ga[static_cast<std::size_t>(r)] = detail::dot(row, gz.data(), dh);
        ba[static_cast<std::size_t>(r)] = detail::dot(row, bz.data(), dh);
      }
      site(tag + " head " + std::to_string(hd), ga, ba, trace.head_output({layer, hd}, last()).data(),
           static_cast<std::size_t>(D));
      for (std::size_t r = 0; r < static_cast<std::size_t>(D); ++r) {
        gamma[r] += ga[r];
        beta[r] += ba[r];
      }
    }
    check(gamma, tag + " attention");
    check(beta, tag + " attention");
    site(tag + " resid_mid", gamma, beta, lt.resid_mid.data() + p * D, static_cast<std::size_t>(D));
  }
};

}  // namespace

Decomposition decompose(const Parameters& params, const BaselineMeans& means, const ActivationTrace& trace,
                        HeadId source, std::span<const Target> targets, const DecomposeOptions& options) {
  const auto& cfg = params.config();
  if (source.layer < 0 || source.layer >= cfg.n_layers || source.head < 0 || source.head >= cfg.n_heads) {
    throw InputError("invalid source head " + to_string(source));
  }
  if (!means.covers(cfg)) {
    throw ConfigError("baseline means do not cover the model's heads");
  }
  int last_layer = -1;
  bool need_logits = false;
  for (const auto& t : targets) {
    if (t.logits) {
      need_logits = true;
      continue;
    }
    if (t.head.layer >= cfg.n_layers || t.head.head < 0 || t.head.head >= cfg.n_heads) {
      throw InputError("invalid target head " + to_string(t.head));
    }
    if (t.head.layer <= source.layer) {
      throw TopologyError("target " + to_string(t.head) + " is not downstream of source " + to_string(source));
    }
    last_layer = std::max(last_layer, t.head.layer);
  }
  if (need_logits) {
    last_layer = cfg.n_layers;
  }

  const int D = cfg.d_model;
  const auto p = static_cast<std::size_t>(trace.seq_len - 1);
  const auto& src_layer = trace.layers[static_cast<std::size_t>(source.layer)];
  const auto mu = means.mean(source);
  const auto a = trace.label_head_output(source);

  Propagator prop{params, trace, options.record_streams, {}};

  // gamma collects the residual input, every other head, and mu(source).
  Vec gamma(src_layer.resid_in.begin() + static_cast<std::ptrdiff_t>(p * D),
            src_layer.resid_in.begin() + static_cast<std::ptrdiff_t>((p + 1) * D));
  Vec beta(static_cast<std::size_t>(D));
  for (int hd = 0; hd < cfg.n_heads; ++hd) {
    if (hd == source.head) {
      continue;
    }
    const auto other = trace.head_output({source.layer, hd}, static_cast<int>(p));
    for (std::size_t i = 0; i < static_cast<std::size_t>(D); ++i) {
      gamma[i] += other[i];
    }
  }
  for (std::size_t i = 0; i < static_cast<std::size_t>(D); ++i) {
    gamma[i] += mu[i];
    beta[i] = static_cast<double>(a[i]) - mu[i];
  }
  prop.check(beta, "layer " + std::to_string(source.layer) + " source");
  prop.site("layer " + std::to_string(source.layer) + " resid_mid", gamma, beta, src_layer.resid_mid.data() + p * D,
            static_cast<std::size_t>(D));

  Decomposition result;
  result.contributions.resize(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    result.contributions[i].source = source;
    result.contributions[i].target = targets[i];
    result.contributions[i].input_id = options.input_id;
  }

  prop.mlp(source.layer, gamma, beta);
  std::vector<Vec> head_gamma;
  std::vector<Vec> head_beta;
  for (int l = source.layer + 1; l < cfg.n_layers && l <= last_layer; ++l) {
    prop.attention(l, gamma, beta, head_gamma, head_beta);
    for (std::size_t i = 0; i < targets.size(); ++i) {
      if (!targets[i].logits && targets[i].head.layer == l) {
        result.contributions[i].beta = to_float(head_beta[static_cast<std::size_t>(targets[i].head.head)]);
        result.contributions[i].gamma = to_float(head_gamma[static_cast<std::size_t>(targets[i].head.head)]);
      }
    }
    if (l == last_layer && !need_logits) {
      break;
    }
    prop.mlp(l, gamma, beta);
  }

  if (need_logits) {
    const auto& lay = params.layout();
    const float* w = params.values().data();
    Vec gf, bf;
    prop.layer_norm(w + lay.final_ln_gain, w + lay.final_ln_bias, trace.final_rstd, gamma, beta, gf, bf);
    prop.site("final ln", gf, bf, trace.final_out.data(), static_cast<std::size_t>(D));
    Vec gl(cfg.label_tokens.size()), bl(cfg.label_tokens.size());
    for (std::size_t c = 0; c < cfg.label_tokens.size(); ++c) {
      const float* row = w + lay.unembedding + static_cast<std::size_t>(cfg.label_tokens[c]) * D;
      gl[c] = detail::dot(row, gf.data(), D);
      bl[c] = detail::dot(row, bf.data(), D);
    }
    prop.check(bl, "readout");
    prop.site("logits", gl, bl, trace.logits.data(), gl.size());
    for (auto& c : result.contributions) {
      if (c.target.logits) {
        c.beta = to_float(bl);
        c.gamma = to_float(gl);
      }
    }
  }
  result.streams = std::move(prop.streams);
  return result;
}

Decomposition decompose(const Parameters& params, const BaselineMeans& means, std::span<const int> tokens,
                        HeadId source, std::span<const Target> targets, const DecomposeOptions& options) {
  return decompose(params, means, forward(params, tokens), source, targets, options);
}

}  // namespace ctsft
