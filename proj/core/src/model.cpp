#include "ctsft/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "ctsft/errors.hpp"
#include "ctsft/tolerances.hpp"
#include "linalg.hpp"

namespace ctsft {

void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_mlp < 1 || vocab_size < 1 || max_seq_len < 1) {
    throw ConfigError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model (" + std::to_string(d_model) + ") is not divisible by n_heads (" +
                      std::to_string(n_heads) + ")");
  }
  if (label_tokens.size() < 2) {
    throw ConfigError("at least two label tokens are required");
  }
  for (int token : label_tokens) {
    if (token < 0 || token >= vocab_size) {
      throw ConfigError("label token " + std::to_string(token) + " outside vocabulary");
    }
  }
}

std::string to_string(HeadId id) {
  return "(" + std::to_string(id.layer) + "," + std::to_string(id.head) + ")";
}

std::vector<HeadId> all_heads(const ModelConfig& config) {
  std::vector<HeadId> heads;
  heads.reserve(static_cast<std::size_t>(config.total_heads()));
  for (int l = 0; l < config.n_layers; ++l) {
    for (int h = 0; h < config.n_heads; ++h) {
      heads.push_back({l, h});
    }
  }
  return heads;
}

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

ParamLayout::ParamLayout(const ModelConfig& config) {
  const int d = config.d_model;
  token_embedding = add("tok_emb", ParamGroup::embedding, -1, config.vocab_size, d);
  position_embedding = add("pos_emb", ParamGroup::embedding, -1, config.max_seq_len, d);
  layers.resize(static_cast<std::size_t>(config.n_layers));
  for (int l = 0; l < config.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    auto& o = layers[static_cast<std::size_t>(l)];
    o.ln1_gain = add(p + "ln1.gain", ParamGroup::layer_norm, l, 1, d);
    o.ln1_bias = add(p + "ln1.bias", ParamGroup::layer_norm, l, 1, d);
    o.wq = add(p + "attn.wq", ParamGroup::attention, l, d, d);
    o.wk = add(p + "attn.wk", ParamGroup::attention, l, d, d);
    o.wv = add(p + "attn.wv", ParamGroup::attention, l, d, d);
    o.wo = add(p + "attn.wo", ParamGroup::attention, l, d, d);
    o.ln2_gain = add(p + "ln2.gain", ParamGroup::layer_norm, l, 1, d);
    o.ln2_bias = add(p + "ln2.bias", ParamGroup::layer_norm, l, 1, d);
    o.w_in = add(p + "mlp.w_in", ParamGroup::mlp, l, config.d_mlp, d);
    o.b_in = add(p + "mlp.b_in", ParamGroup::mlp, l, 1, config.d_mlp);
    o.w_out = add(p + "mlp.w_out", ParamGroup::mlp, l, d, config.d_mlp);
    o.b_out = add(p + "mlp.b_out", ParamGroup::mlp, l, 1, d);
  }
  final_ln_gain = add("ln_final.gain", ParamGroup::layer_norm, -1, 1, d);
  final_ln_bias = add("ln_final.bias", ParamGroup::layer_norm, -1, 1, d);
  unembedding = add("unembed", ParamGroup::unembedding, -1, config.vocab_size, d);
}

std::size_t ParamLayout::add(std::string name, ParamGroup group, int layer, int rows, int cols) {
  TensorInfo info{std::move(name), group, layer, total_, rows, cols};
  total_ += info.size();
  tensors_.push_back(std::move(info));
  return tensors_.back().offset;
}

const TensorInfo& ParamLayout::tensor(std::string_view name) const {
  for (const auto& t : tensors_) {
    if (t.name == name) {
      return t;
    }
  }
  throw InputError("unknown tensor '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

Parameters::Parameters(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  layout_ = std::make_shared<const ParamLayout>(config_);
  values_.assign(layout_->total(), 0.0F);
}

Parameters Parameters::initialize(ModelConfig config, std::uint64_t seed) {
  Parameters params(std::move(config));
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0F, params.config_.init_scale);
  for (const auto& t : params.layout_->tensors()) {
    auto span = params.values().subspan(t.offset, t.size());
    if (t.group == ParamGroup::layer_norm) {
      const bool gain = t.name.ends_with("gain");
      std::fill(span.begin(), span.end(), gain ? 1.0F : 0.0F);
    } else if (t.rows == 1) {
      std::fill(span.begin(), span.end(), 0.0F);  // biases
    } else {
      for (auto& x : span) {
        x = normal(rng);
      }
    }
  }
  return params;
}

std::span<float> Parameters::tensor(std::string_view name) {
  const auto& t = layout_->tensor(name);
  return values().subspan(t.offset, t.size());
}

std::span<const float> Parameters::tensor(std::string_view name) const {
  const auto& t = layout_->tensor(name);
  return values().subspan(t.offset, t.size());
}

std::span<const float> Parameters::unembedding_row(int token) const {
  if (token < 0 || token >= config_.vocab_size) {
    throw InputError("token " + std::to_string(token) + " outside vocabulary");
  }
  const auto d = static_cast<std::size_t>(config_.d_model);
  return values().subspan(layout_->unembedding + static_cast<std::size_t>(token) * d, d);
}

// ---------------------------------------------------------------------------
// Trace helpers
// ---------------------------------------------------------------------------

std::span<const float> ActivationTrace::head_output(HeadId s, int position) const {
  if (s.layer < 0 || s.layer >= static_cast<int>(layers.size()) || position < 0 || position >= seq_len) {
    throw InputError("head output " + to_string(s) + " at position " + std::to_string(position) +
                     " not in trace");
  }
  const auto& out = layers[static_cast<std::size_t>(s.layer)].head_out;
  const auto d = static_cast<std::size_t>(d_model);
  const std::size_t offset = (static_cast<std::size_t>(s.head) * static_cast<std::size_t>(seq_len) +
                              static_cast<std::size_t>(position)) * d;
  if (offset + d > out.size()) {
    throw InputError("head " + to_string(s) + " not in trace");
  }
  return std::span<const float>(out).subspan(offset, d);
}

HeadOverrides::HeadOverrides(const ModelConfig& config)
    : n_heads_(config.n_heads),
      d_model_(config.d_model),
      values_(static_cast<std::size_t>(config.total_heads())) {}

void HeadOverrides::set(HeadId s, std::span<const float> value) {
  if (s.head < 0 || s.head >= n_heads_ || s.layer < 0 ||
      flat_index(s, n_heads_) >= static_cast<int>(values_.size())) {
    throw InputError("override for invalid head " + to_string(s));
  }
  if (static_cast<int>(value.size()) != d_model_) {
    throw InputError("override for head " + to_string(s) + " has wrong width");
  }
  auto& slot = values_[static_cast<std::size_t>(flat_index(s, n_heads_))];
  if (slot.empty()) {
    ++count_;
  }
  slot.assign(value.begin(), value.end());
}

const float* HeadOverrides::find(HeadId s) const {
  const auto& slot = values_[static_cast<std::size_t>(flat_index(s, n_heads_))];
  return slot.empty() ? nullptr : slot.data();
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

namespace {

void check_tokens(const ModelConfig& config, std::span<const int> tokens) {
  if (tokens.empty()) {
    throw InputError("empty token sequence");
  }
  if (static_cast<int>(tokens.size()) > config.max_seq_len) {
    throw InputError("sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                     std::to_string(config.max_seq_len));
  }
  for (int t : tokens) {
    if (t < 0 || t >= config.vocab_size) {
      throw InputError("token " + std::to_string(t) + " outside vocabulary of size " +
                       std::to_string(config.vocab_size));
    }
  }
}

// LayerNorm over each row of `in` (rows x d). In linear mode it is the identity
// and the recorded statistics are (0, 1).
void layer_norm_rows(bool linear, const float* gain, const float* bias, const std::vector<float>& in, int rows,
                     int d, std::vector<float>& out, std::vector<float>& mean, std::vector<float>& rstd) {
  out.resize(in.size());
  mean.assign(static_cast<std::size_t>(rows), 0.0F);
  rstd.assign(static_cast<std::size_t>(rows), 1.0F);
  for (int t = 0; t < rows; ++t) {
    const float* x = in.data() + static_cast<std::size_t>(t) * d;
    float* y = out.data() + static_cast<std::size_t>(t) * d;
    if (linear) {
      std::copy(x, x + d, y);
      continue;
    }
    const auto stats = detail::layer_norm_stats(x, d);
    mean[static_cast<std::size_t>(t)] = stats.mean;
    rstd[static_cast<std::size_t>(t)] = stats.rstd;
    for (int i = 0; i < d; ++i) {
      y[i] = gain[i] * (x[i] - stats.mean) * stats.rstd + bias[i];
    }
  }
}

}  // namespace

ActivationTrace forward(const Parameters& params, std::span<const int> tokens, const HeadOverrides* overrides) {
  const auto& cfg = params.config();
  const auto& lay = params.layout();
  check_tokens(cfg, tokens);

  const int T = static_cast<int>(tokens.size());
  const int D = cfg.d_model;
  const int H = cfg.n_heads;
  const int dh = cfg.d_head();
  const int M = cfg.d_mlp;
  const auto* w = params.values().data();
  const auto TD = static_cast<std::size_t>(T) * static_cast<std::size_t>(D);
  const float scale = 1.0F / std::sqrt(static_cast<float>(dh));

  ActivationTrace trace;
  trace.seq_len = T;
  trace.d_model = D;
  trace.patched = overrides != nullptr && !overrides->empty();
  trace.layers.resize(static_cast<std::size_t>(cfg.n_layers));

  std::vector<float> x(TD);
  for (int t = 0; t < T; ++t) {
    const float* te = w + lay.token_embedding + static_cast<std::size_t>(tokens[static_cast<std::size_t>(t)]) * D;
    const float* pe = w + lay.position_embedding + static_cast<std::size_t>(t) * D;
    for (int i = 0; i < D; ++i) {
      x[static_cast<std::size_t>(t) * D + i] = te[i] + pe[i];
    }
  }

  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& o = lay.layers[static_cast<std::size_t>(l)];
    auto& lt = trace.layers[static_cast<std::size_t>(l)];
    lt.resid_in = x;
    layer_norm_rows(cfg.linear_mode, w + o.ln1_gain, w + o.ln1_bias, lt.resid_in, T, D, lt.ln1_out, lt.ln1_mean,
                    lt.ln1_rstd);

    lt.q.assign(TD, 0.0F);
    lt.k.assign(TD, 0.0F);
    lt.v.assign(TD, 0.0F);
    for (int t = 0; t < T; ++t) {
      const float* h = lt.ln1_out.data() + static_cast<std::size_t>(t) * D;
      detail::matvec(w + o.wq, D, D, h, lt.q.data() + static_cast<std::size_t>(t) * D);
      detail::matvec(w + o.wk, D, D, h, lt.k.data() + static_cast<std::size_t>(t) * D);
      detail::matvec(w + o.wv, D, D, h, lt.v.data() + static_cast<std::size_t>(t) * D);
    }

    lt.probs.assign(static_cast<std::size_t>(H) * T * T, 0.0F);
    lt.mix.assign(TD, 0.0F);
    for (int hd = 0; hd < H; ++hd) {
      const int c0 = hd * dh;
      for (int t = 0; t < T; ++t) {
        float* p = lt.probs.data() + (static_cast<std::size_t>(hd) * T + t) * T;
        if (cfg.linear_mode) {
          const float u = 1.0F / static_cast<float>(t + 1);
          std::fill(p, p + t + 1, u);
        } else {
          const float* qt = lt.q.data() + static_cast<std::size_t>(t) * D + c0;
          float mx = -INFINITY;
          for (int j = 0; j <= t; ++j) {
            const float* kj = lt.k.data() + static_cast<std::size_t>(j) * D + c0;
            p[j] = detail::dot(qt, kj, dh) * scale;
            mx = std::max(mx, p[j]);
          }
          float sum = 0.0F;
          for (int j = 0; j <= t; ++j) {
            p[j] = std::exp(p[j] - mx);
            sum += p[j];
          }
          for (int j = 0; j <= t; ++j) {
            p[j] /= sum;
          }
        }
        float* mt = lt.mix.data() + static_cast<std::size_t>(t) * D + c0;
        for (int j = 0; j <= t; ++j) {
          const float* vj = lt.v.data() + static_cast<std::size_t>(j) * D + c0;
          for (int i = 0; i < dh; ++i) {
            mt[i] += p[j] * vj[i];
          }
        }
      }
    }

    // Each head writes Wo[:, head block] * mix_head into the residual stream.
    lt.head_out.assign(static_cast<std::size_t>(H) * TD, 0.0F);
    for (int hd = 0; hd < H; ++hd) {
      for (int t = 0; t < T; ++t) {
        float* out = lt.head_out.data() + (static_cast<std::size_t>(hd) * T + t) * D;
        const float* patch = (overrides != nullptr && t == T - 1) ? overrides->find({l, hd}) : nullptr;
        if (patch != nullptr) {
          std::copy(patch, patch + D, out);
          continue;
        }
        const float* mt = lt.mix.data() + static_cast<std::size_t>(t) * D + hd * dh;
        for (int r = 0; r < D; ++r) {
          out[r] = detail::dot(w + o.wo + static_cast<std::size_t>(r) * D + hd * dh, mt, dh);
        }
      }
    }
    lt.resid_mid = lt.resid_in;
    for (int hd = 0; hd < H; ++hd) {
      const float* src = lt.head_out.data() + static_cast<std::size_t>(hd) * TD;
      for (std::size_t i = 0; i < TD; ++i) {
        lt.resid_mid[i] += src[i];
      }
    }

    layer_norm_rows(cfg.linear_mode, w + o.ln2_gain, w + o.ln2_bias, lt.resid_mid, T, D, lt.ln2_out, lt.ln2_mean,
                    lt.ln2_rstd);
    const auto TM = static_cast<std::size_t>(T) * static_cast<std::size_t>(M);
    lt.mlp_pre.assign(TM, 0.0F);
    lt.mlp_act.assign(TM, 0.0F);
    lt.resid_out = lt.resid_mid;
    for (int t = 0; t < T; ++t) {
      float* pre = lt.mlp_pre.data() + static_cast<std::size_t>(t) * M;
      float* act = lt.mlp_act.data() + static_cast<std::size_t>(t) * M;
      detail::matvec(w + o.w_in, M, D, lt.ln2_out.data() + static_cast<std::size_t>(t) * D, pre);
      for (int i = 0; i < M; ++i) {
        pre[i] += w[o.b_in + static_cast<std::size_t>(i)];
        act[i] = cfg.linear_mode ? pre[i] : detail::gelu(pre[i]);
      }
      float* out = lt.resid_out.data() + static_cast<std::size_t>(t) * D;
      for (int r = 0; r < D; ++r) {
        out[r] += detail::dot(w + o.w_out + static_cast<std::size_t>(r) * M, act, M) + w[o.b_out + r];
      }
    }
    x = lt.resid_out;
  }

  const float* last = x.data() + static_cast<std::size_t>(T - 1) * D;
  trace.final_in.assign(last, last + D);
  trace.final_out.resize(static_cast<std::size_t>(D));
  if (cfg.linear_mode) {
    trace.final_out = trace.final_in;
  } else {
    const auto stats = detail::layer_norm_stats(last, D);
    trace.final_mean = stats.mean;
    trace.final_rstd = stats.rstd;
    for (int i = 0; i < D; ++i) {
      trace.final_out[static_cast<std::size_t>(i)] =
          w[lay.final_ln_gain + i] * (last[i] - stats.mean) * stats.rstd + w[lay.final_ln_bias + i];
    }
  }
  trace.logits.resize(cfg.label_tokens.size());
  for (std::size_t c = 0; c < cfg.label_tokens.size(); ++c) {
    trace.logits[c] = detail::dot(w + lay.unembedding + static_cast<std::size_t>(cfg.label_tokens[c]) * D,
                                  trace.final_out.data(), D);
  }
  return trace;
}

std::vector<float> logits(const Parameters& params, std::span<const int> tokens, const HeadOverrides* overrides) {
  return forward(params, tokens, overrides).logits;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

namespace {

// Accumulates d(input) of a LayerNorm row given d(output); also gain/bias grads.
void layer_norm_backward(bool linear, const float* gain, const float* x, float mean, float rstd, const float* dy,
                         int d, float* dx, float* dgain, float* dbias) {
  if (linear) {
    for (int i = 0; i < d; ++i) {
      dx[i] += dy[i];
    }
    return;
  }
  float mean_dxhat = 0.0F;
  float mean_dxhat_xhat = 0.0F;
  for (int i = 0; i < d; ++i) {
    const float xhat = (x[i] - mean) * rstd;
    const float dxhat = dy[i] * gain[i];
    dgain[i] += dy[i] * xhat;
    dbias[i] += dy[i];
    mean_dxhat += dxhat;
    mean_dxhat_xhat += dxhat * xhat;
  }
  mean_dxhat /= static_cast<float>(d);
  mean_dxhat_xhat /= static_cast<float>(d);
  for (int i = 0; i < d; ++i) {
    const float xhat = (x[i] - mean) * rstd;
    dx[i] += rstd * (dy[i] * gain[i] - mean_dxhat - xhat * mean_dxhat_xhat);
  }
}

std::vector<double> softmax(std::span<const float> logits) {
  double mx = -INFINITY;
  for (float v : logits) {
    mx = std::max(mx, static_cast<double>(v));
  }
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(static_cast<double>(logits[i]) - mx);
    sum += p[i];
  }
  for (auto& v : p) {
    v /= sum;
  }
  return p;
}

void accumulate_example(const Parameters& params, const ActivationTrace& tr, std::span<const int> tokens,
                        std::span<const float> dlogits, float* g) {
  const auto& cfg = params.config();
  const auto& lay = params.layout();
  const auto* w = params.values().data();
  const int T = tr.seq_len;
  const int D = cfg.d_model;
  const int H = cfg.n_heads;
  const int dh = cfg.d_head();
  const int M = cfg.d_mlp;
  const auto TD = static_cast<std::size_t>(T) * static_cast<std::size_t>(D);
  const float scale = 1.0F / std::sqrt(static_cast<float>(dh));

  // Readout.
  std::vector<float> dfinal(static_cast<std::size_t>(D), 0.0F);
  for (std::size_t c = 0; c < dlogits.size(); ++c) {
    const std::size_t row = lay.unembedding + static_cast<std::size_t>(cfg.label_tokens[c]) * D;
    for (int i = 0; i < D; ++i) {
      g[row + i] += dlogits[c] * tr.final_out[static_cast<std::size_t>(i)];
      dfinal[static_cast<std::size_t>(i)] += dlogits[c] * w[row + i];
    }
  }
  std::vector<float> dx(TD, 0.0F);
  layer_norm_backward(cfg.linear_mode, w + lay.final_ln_gain, tr.final_in.data(), tr.final_mean, tr.final_rstd,
                      dfinal.data(), D, dx.data() + static_cast<std::size_t>(T - 1) * D, g + lay.final_ln_gain,
                      g + lay.final_ln_bias);

  std::vector<float> dln(TD);
  std::vector<float> dact(static_cast<std::size_t>(M));
  std::vector<float> dq(TD);
  std::vector<float> dk(TD);
  std::vector<float> dv(TD);
  std::vector<float> dmix(TD);
  std::vector<float> dp(static_cast<std::size_t>(T));

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const auto& o = lay.layers[static_cast<std::size_t>(l)];
    const auto& lt = tr.layers[static_cast<std::size_t>(l)];

    // MLP branch; dx currently holds d(resid_out) and becomes d(resid_mid).
    std::fill(dln.begin(), dln.end(), 0.0F);
    for (int t = 0; t < T; ++t) {
      const float* dout = dx.data() + static_cast<std::size_t>(t) * D;
      if (std::all_of(dout, dout + D, [](float v) { return v == 0.0F; })) {
        continue;
      }
      const float* act = lt.mlp_act.data() + static_cast<std::size_t>(t) * M;
      const float* pre = lt.mlp_pre.data() + static_cast<std::size_t>(t) * M;
      std::fill(dact.begin(), dact.end(), 0.0F);
      for (int r = 0; r < D; ++r) {
        const float gr = dout[r];
        g[o.b_out + r] += gr;
        float* gw = g + o.w_out + static_cast<std::size_t>(r) * M;
        const float* wr = w + o.w_out + static_cast<std::size_t>(r) * M;
        for (int i = 0; i < M; ++i) {
          gw[i] += gr * act[i];
          dact[static_cast<std::size_t>(i)] += gr * wr[i];
        }
      }
      const float* m = lt.ln2_out.data() + static_cast<std::size_t>(t) * D;
      float* dm = dln.data() + static_cast<std::size_t>(t) * D;
      for (int i = 0; i < M; ++i) {
        const float dpre = cfg.linear_mode ? dact[static_cast<std::size_t>(i)]
                                           : dact[static_cast<std::size_t>(i)] * detail::gelu_grad(pre[i]);
        g[o.b_in + i] += dpre;
        float* gw = g + o.w_in + static_cast<std::size_t>(i) * D;
        const float* wr = w + o.w_in + static_cast<std::size_t>(i) * D;
        for (int j = 0; j < D; ++j) {
          gw[j] += dpre * m[j];
          dm[j] += dpre * wr[j];
        }
      }
      layer_norm_backward(cfg.linear_mode, w + o.ln2_gain, lt.resid_mid.data() + static_cast<std::size_t>(t) * D,
                          lt.ln2_mean[static_cast<std::size_t>(t)], lt.ln2_rstd[static_cast<std::size_t>(t)], dm, D,
                          dx.data() + static_cast<std::size_t>(t) * D, g + o.ln2_gain, g + o.ln2_bias);
    }

    // Attention branch; dx holds d(resid_mid) and becomes d(resid_in).
    std::fill(dmix.begin(), dmix.end(), 0.0F);
    for (int t = 0; t < T; ++t) {
      const float* dres = dx.data() + static_cast<std::size_t>(t) * D;
      const float* mt = lt.mix.data() + static_cast<std::size_t>(t) * D;
      float* dm = dmix.data() + static_cast<std::size_t>(t) * D;
      for (int r = 0; r < D; ++r) {
        const float gr = dres[r];
        if (gr == 0.0F) {
          continue;
        }
        float* gw = g + o.wo + static_cast<std::size_t>(r) * D;
        const float* wr = w + o.wo + static_cast<std::size_t>(r) * D;
        for (int c = 0; c < D; ++c) {
          gw[c] += gr * mt[c];
          dm[c] += gr * wr[c];
        }
      }
    }
    std::fill(dq.begin(), dq.end(), 0.0F);
    std::fill(dk.begin(), dk.end(), 0.0F);
    std::fill(dv.begin(), dv.end(), 0.0F);
    for (int hd = 0; hd < H; ++hd) {
      const int c0 = hd * dh;
      for (int t = 0; t < T; ++t) {
        const float* dmt = dmix.data() + static_cast<std::size_t>(t) * D + c0;
        const float* p = lt.probs.data() + (static_cast<std::size_t>(hd) * T + t) * T;
        float weighted = 0.0F;
        for (int j = 0; j <= t; ++j) {
          const float* vj = lt.v.data() + static_cast<std::size_t>(j) * D + c0;
          float* dvj = dv.data() + static_cast<std::size_t>(j) * D + c0;
          dp[static_cast<std::size_t>(j)] = detail::dot(dmt, vj, dh);
          weighted += p[j] * dp[static_cast<std::size_t>(j)];
          for (int i = 0; i < dh; ++i) {
            dvj[i] += p[j] * dmt[i];
          }
        }
        if (cfg.linear_mode) {
          continue;  // uniform mixing has no query/key dependence
        }
        const float* qt = lt.q.data() + static_cast<std::size_t>(t) * D + c0;
        float* dqt = dq.data() + static_cast<std::size_t>(t) * D + c0;
        for (int j = 0; j <= t; ++j) {
          const float ds = p[j] * (dp[static_cast<std::size_t>(j)] - weighted) * scale;
          const float* kj = lt.k.data() + static_cast<std::size_t>(j) * D + c0;
          float* dkj = dk.data() + static_cast<std::size_t>(j) * D + c0;
          for (int i = 0; i < dh; ++i) {
            dqt[i] += ds * kj[i];
            dkj[i] += ds * qt[i];
          }
        }
      }
    }
    std::fill(dln.begin(), dln.end(), 0.0F);
    for (int t = 0; t < T; ++t) {
      const float* h = lt.ln1_out.data() + static_cast<std::size_t>(t) * D;
      float* dh_row = dln.data() + static_cast<std::size_t>(t) * D;
      const std::pair<std::size_t, const std::vector<float>*> projections[] = {
          {o.wq, &dq}, {o.wk, &dk}, {o.wv, &dv}};
      for (const auto& [offset, grad] : projections) {
        const float* dy = grad->data() + static_cast<std::size_t>(t) * D;
        for (int r = 0; r < D; ++r) {
          const float gr = dy[r];
          if (gr == 0.0F) {
            continue;
          }
          float* gw = g + offset + static_cast<std::size_t>(r) * D;
          const float* wr = w + offset + static_cast<std::size_t>(r) * D;
          for (int c = 0; c < D; ++c) {
            gw[c] += gr * h[c];
            dh_row[c] += gr * wr[c];
          }
        }
      }
      layer_norm_backward(cfg.linear_mode, w + o.ln1_gain, lt.resid_in.data() + static_cast<std::size_t>(t) * D,
                          lt.ln1_mean[static_cast<std::size_t>(t)], lt.ln1_rstd[static_cast<std::size_t>(t)], dh_row,
                          D, dx.data() + static_cast<std::size_t>(t) * D, g + o.ln1_gain, g + o.ln1_bias);
    }
  }

  for (int t = 0; t < T; ++t) {
    const float* d = dx.data() + static_cast<std::size_t>(t) * D;
    float* te = g + lay.token_embedding + static_cast<std::size_t>(tokens[static_cast<std::size_t>(t)]) * D;
    float* pe = g + lay.position_embedding + static_cast<std::size_t>(t) * D;
    for (int i = 0; i < D; ++i) {
      te[i] += d[i];
      pe[i] += d[i];
    }
  }
}

}  // namespace

Gradient backward(const Parameters& params, std::span<const LabeledTokens> batch) {
  const auto& cfg = params.config();
  Gradient grad;
  grad.values.assign(params.size(), 0.0F);
  if (batch.empty()) {
    return grad;
  }
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  std::vector<float> dlogits(cfg.label_tokens.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& ex = batch[b];
    if (ex.label < 0 || ex.label >= cfg.n_labels()) {
      throw InputError("label " + std::to_string(ex.label) + " outside label set at batch index " +
                       std::to_string(b));
    }
    const auto trace = forward(params, ex.tokens);
    const auto p = softmax(trace.logits);
    const double loss = -std::log(p[static_cast<std::size_t>(ex.label)]);
    if (!std::isfinite(loss)) {
      throw NumericError("non-finite loss at batch index " + std::to_string(b));
    }
    grad.loss += loss * inv_n;
    for (std::size_t c = 0; c < dlogits.size(); ++c) {
      const double target = static_cast<int>(c) == ex.label ? 1.0 : 0.0;
      dlogits[c] = static_cast<float>((p[c] - target) * inv_n);
    }
    accumulate_example(params, trace, ex.tokens, dlogits, grad.values.data());
  }
  return grad;
}

double example_loss(const Parameters& params, const LabeledTokens& example) {
  const auto p = softmax(logits(params, example.tokens));
  return -std::log(p.at(static_cast<std::size_t>(example.label)));
}

// ---------------------------------------------------------------------------
// Head slices
// ---------------------------------------------------------------------------

std::vector<CoordRange> head_param_slices(const ParamLayout& layout, const ModelConfig& config, HeadId s) {
  if (s.layer < 0 || s.layer >= config.n_layers || s.head < 0 || s.head >= config.n_heads) {
    throw InputError("invalid head " + to_string(s));
  }
  const auto D = static_cast<std::size_t>(config.d_model);
  const auto dh = static_cast<std::size_t>(config.d_head());
  const auto h = static_cast<std::size_t>(s.head);
  const auto& o = layout.layers[static_cast<std::size_t>(s.layer)];
  std::vector<CoordRange> ranges;
  ranges.reserve(3 + D);
  for (std::size_t base : {o.wq, o.wk, o.wv}) {
    ranges.push_back({base + h * dh * D, base + (h + 1) * dh * D});
  }
  for (std::size_t r = 0; r < D; ++r) {
    ranges.push_back({o.wo + r * D + h * dh, o.wo + r * D + (h + 1) * dh});
  }
  return ranges;
}

std::vector<CoordRange> head_param_slices(const Parameters& params, HeadId s) {
  return head_param_slices(params.layout(), params.config(), s);
}

}  // namespace ctsft
