#include "spd/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace spd {

std::string to_string(KvKind k) { return k == KvKind::K ? "K" : "V"; }

KvKind parse_kv_kind(const std::string& s) {
  if (s == "K" || s == "k") return KvKind::K;
  if (s == "V" || s == "v") return KvKind::V;
  throw Error("unknown K/V kind '" + s + "'");
}

void ModelConfig::validate() const {
  if (n_layers < 1 || d_model < 1 || n_heads < 1 || head_dim < 1 || vocab_size < 2 ||
      max_seq_len < 1 || mlp_hidden < 1)
    throw Error("model config: all sizes must be positive");
  if (d_model != n_heads * head_dim)
    throw Error("model config: d_model must equal n_heads * head_dim");
}

std::vector<int> ModelConfig::last_mid_layers() const {
  std::vector<int> out{n_layers};
  const int mid = n_layers / 2;
  if (mid >= 1 && mid != n_layers) out.push_back(mid);
  return out;
}

// ---- init -------------------------------------------------------------------

namespace {

Tensor randn(std::size_t r, std::size_t c, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t({r, c});
  for (double& v : t.data()) v = dist(rng);
  return t;
}

Tensor filled(std::size_t c, double v) { return Tensor({1, c}, v); }

}  // namespace

ModelState ModelState::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto kv = static_cast<std::size_t>(cfg.kv_dim());
  const auto h = static_cast<std::size_t>(cfg.mlp_hidden);
  const auto vocab = static_cast<std::size_t>(cfg.vocab_size);
  const double wstd = 1.0 / std::sqrt(static_cast<double>(d));
  // residual-branch outputs start smaller so the stack begins near identity
  const double out_std = wstd / std::sqrt(2.0 * cfg.n_layers);

  ModelState m;
  m.config = cfg;
  m.tok_emb = randn(vocab, d, 0.1, rng);
  m.pos_emb = randn(static_cast<std::size_t>(cfg.max_seq_len), d, 0.1, rng);
  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerParams p;
    p.ln1_g = filled(d, 1.0);
    p.ln1_b = filled(d, 0.0);
    p.wq = randn(d, kv, wstd, rng);
    p.wk = randn(d, kv, wstd, rng);
    p.wv = randn(d, kv, wstd, rng);
    p.wo = randn(kv, d, out_std, rng);
    p.ln2_g = filled(d, 1.0);
    p.ln2_b = filled(d, 0.0);
    p.w1 = randn(d, h, wstd, rng);
    p.b1 = filled(h, 0.0);
    p.w2 = randn(h, d, out_std * std::sqrt(static_cast<double>(d) / static_cast<double>(h)), rng);
    p.b2 = filled(d, 0.0);
    m.layers.push_back(std::move(p));
  }
  m.lnf_g = filled(d, 1.0);
  m.lnf_b = filled(d, 0.0);
  m.w_out = randn(d, vocab, wstd, rng);
  return m;
}

LoraAdapters LoraAdapters::attach(const ModelConfig& cfg, int rank, double alpha, double dropout,
                                  std::uint64_t seed) {
  if (rank < 1) throw Error("lora rank must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) throw Error("lora dropout must lie in [0, 1)");
  Rng rng(seed);
  LoraAdapters ad;
  ad.rank = rank;
  ad.alpha = alpha;
  ad.dropout = dropout;
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto kv = static_cast<std::size_t>(cfg.kv_dim());
  const auto r = static_cast<std::size_t>(rank);
  for (int l = 0; l < cfg.n_layers; ++l) {
    std::array<LoraPair, 4> pairs;
    for (LoraTarget t : kLoraTargets) {
      const std::size_t din = t == LoraTarget::O ? kv : d;
      const std::size_t dout = t == LoraTarget::O ? d : kv;
      const double bound = 1.0 / std::sqrt(static_cast<double>(din));
      std::uniform_real_distribution<double> dist(-bound, bound);
      LoraPair p;
      p.a = Tensor({r, din});
      for (double& v : p.a.data()) v = dist(rng);
      p.b = Tensor({dout, r});
      pairs[static_cast<int>(t)] = std::move(p);
    }
    ad.layers.push_back(std::move(pairs));
  }
  return ad;
}

std::uint64_t ModelState::base_checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for_each_base_param([&](const Tensor& t) { h = checksum(t, h); });
  return h;
}

std::uint64_t ModelState::lora_checksum() const {
  if (!lora) return 0;
  std::uint64_t h = 0xcbf29ce484222325ULL;
  lora->for_each_param([&](const Tensor& t) { h = checksum(t, h); });
  return h;
}

std::size_t ModelState::base_param_count() const {
  std::size_t n = 0;
  for_each_base_param([&](const Tensor& t) { n += t.size(); });
  return n;
}

bool ModelState::all_finite() const {
  bool ok = true;
  for_each_base_param([&](const Tensor& t) { ok = ok && t.all_finite(); });
  if (lora) lora->for_each_param([&](const Tensor& t) { ok = ok && t.all_finite(); });
  return ok;
}

// ---- hooks ------------------------------------------------------------------

const Tensor* KvHooks::find(int layer, KvKind kind) const {
  const auto& m = kind == KvKind::K ? k : v;
  auto it = m.find(layer);
  return it == m.end() ? nullptr : &it->second;
}

void KvHooks::validate(const ModelConfig& cfg) const {
  const auto d = static_cast<std::size_t>(cfg.kv_dim());
  for (const auto* m : {&k, &v}) {
    for (const auto& [layer, p] : *m) {
      if (layer < 1 || layer > cfg.n_layers)
        throw BundleError("projector for layer " + std::to_string(layer) +
                          " but model has " + std::to_string(cfg.n_layers) + " layers");
      if (p.rows() != d || p.cols() != d)
        throw BundleError("projector shape " + shape_str(p.shape()) + " does not match d_k=" +
                          std::to_string(d));
    }
  }
}

// ---- tape forward -----------------------------------------------------------

namespace {

struct Linear {
  ad::Var w;
  const LoraPair* lora = nullptr;
};

Tensor dropout_mask(std::size_t r, std::size_t c, double p, Rng& rng) {
  Tensor m({r, c}, 1.0);
  if (p <= 0.0) return m;
  std::bernoulli_distribution keep(1.0 - p);
  const double s = 1.0 / (1.0 - p);
  for (double& v : m.data()) v = keep(rng) ? s : 0.0;
  return m;
}

}  // namespace

ForwardOutput forward(ad::Tape& tape, const ModelState& model, std::span<const TokenId> tokens,
                      const ForwardOptions& opts) {
  const ModelConfig& cfg = model.config;
  if (tokens.empty()) throw LengthError("forward: empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(cfg.max_seq_len))
    throw LengthError("sequence of " + std::to_string(tokens.size()) +
                      " tokens exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  if (opts.hooks) opts.hooks->validate(cfg);
  for (TokenId t : tokens)
    if (t < 0 || t >= cfg.vocab_size) throw DimensionError("token id out of vocabulary");

  const std::size_t T = tokens.size();
  const bool base = opts.train_base;
  const bool use_lora = model.lora.has_value();
  const double lscale = use_lora ? model.lora->scale() : 0.0;
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));

  auto linear = [&](ad::Var x, const Tensor& w, const LoraPair* lp) {
    ad::Var y = ad::matmul(tape, x, tape.param(w, base));
    if (!lp) return y;
    ad::Var xin = x;
    if (opts.train_lora && opts.dropout_rng && model.lora->dropout > 0.0) {
      const Tensor& xv = tape.value(x);
      xin = ad::mul_const(tape, x,
                          dropout_mask(xv.rows(), xv.cols(), model.lora->dropout, *opts.dropout_rng));
    }
    ad::Var a = tape.param(lp->a, opts.train_lora);
    ad::Var b = tape.param(lp->b, opts.train_lora);
    ad::Var low = ad::matmul(tape, ad::matmul(tape, xin, a, false, true), b, false, true);
    return ad::add(tape, y, ad::scale(tape, low, lscale));
  };

  ForwardOutput out;
  ad::Var emb = ad::gather_rows(tape, tape.param(model.tok_emb, base), tokens);
  std::vector<int> pos(T);
  for (std::size_t i = 0; i < T; ++i) pos[i] = static_cast<int>(i);
  ad::Var x = ad::add(tape, emb, ad::gather_rows(tape, tape.param(model.pos_emb, base), pos));

  for (int l = 0; l < cfg.n_layers; ++l) {
    const int layer1 = l + 1;
    const LayerParams& P = model.layers[static_cast<std::size_t>(l)];
    auto lp = [&](LoraTarget t) { return use_lora ? &model.lora->at(l, t) : nullptr; };

    ad::Var h = ad::layer_norm(tape, x, tape.param(P.ln1_g, base), tape.param(P.ln1_b, base));
    ad::Var q = linear(h, P.wq, lp(LoraTarget::Q));

    auto kv_site = [&](ad::Var act, KvKind kind) {
      auto it = opts.kv_delta.find({layer1, kind});
      if (it != opts.kv_delta.end()) act = ad::add(tape, act, tape.constant(it->second));
      for (const TapSpec& ts : opts.taps) {
        if (ts.layer == layer1 && ts.kind == kind) {
          out.taps.emplace_back(ts, tape.tap(act, "L" + std::to_string(layer1) + to_string(kind)));
        }
      }
      if (opts.hooks) {
        if (const Tensor* proj = opts.hooks->find(layer1, kind))
          act = ad::matmul(tape, act, tape.constant(*proj));
      }
      return act;
    };
    ad::Var k = kv_site(linear(h, P.wk, lp(LoraTarget::K)), KvKind::K);
    ad::Var v = kv_site(linear(h, P.wv, lp(LoraTarget::V)), KvKind::V);

    std::vector<ad::Var> heads;
    const auto hd = static_cast<std::size_t>(cfg.head_dim);
    for (int hh = 0; hh < cfg.n_heads; ++hh) {
      const std::size_t off = static_cast<std::size_t>(hh) * hd;
      ad::Var qh = ad::slice_cols(tape, q, off, hd);
      ad::Var kh = ad::slice_cols(tape, k, off, hd);
      ad::Var vh = ad::slice_cols(tape, v, off, hd);
      ad::Var scores = ad::scale(tape, ad::matmul(tape, qh, kh, false, true), attn_scale);
      ad::Var probs = ad::causal_softmax_rows(tape, scores);
      heads.push_back(ad::matmul(tape, probs, vh));
    }
    ad::Var att = ad::concat_cols(tape, heads);
    x = ad::add(tape, x, linear(att, P.wo, lp(LoraTarget::O)));

    ad::Var h2 = ad::layer_norm(tape, x, tape.param(P.ln2_g, base), tape.param(P.ln2_b, base));
    ad::Var mid = ad::gelu(tape, ad::add_row(tape, ad::matmul(tape, h2, tape.param(P.w1, base)),
                                             tape.param(P.b1, base)));
    ad::Var mlp = ad::add_row(tape, ad::matmul(tape, mid, tape.param(P.w2, base)),
                              tape.param(P.b2, base));
    x = ad::add(tape, x, mlp);
  }
  ad::Var hf = ad::layer_norm(tape, x, tape.param(model.lnf_g, base), tape.param(model.lnf_b, base));
  out.logits = ad::matmul(tape, hf, tape.param(model.w_out, base));
  return out;
}

Tensor forward_logits(const ModelState& model, std::span<const TokenId> tokens,
                      const KvHooks* hooks) {
  ad::Tape tape;
  ForwardOptions opts;
  opts.hooks = hooks;
  auto out = forward(tape, model, tokens, opts);
  return tape.value(out.logits);
}

// ---- KV-cache decoding -------------------------------------------------------

KvCache KvCache::make(const ModelConfig& cfg) {
  KvCache c;
  c.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  c.kv_dim = cfg.kv_dim();
  return c;
}

Tensor KvCache::keys(int layer1) const {
  const auto& l = layers.at(static_cast<std::size_t>(layer1 - 1));
  return Tensor({length, static_cast<std::size_t>(kv_dim)}, l.keys);
}

Tensor KvCache::values(int layer1) const {
  const auto& l = layers.at(static_cast<std::size_t>(layer1 - 1));
  return Tensor({length, static_cast<std::size_t>(kv_dim)}, l.values);
}

namespace {

Tensor row_linear(const Tensor& x, const Tensor& w, const LoraPair* lp, double lscale) {
  Tensor y = kernels::matmul(x, w);
  if (lp) {
    Tensor low = kernels::matmul(kernels::matmul(x, lp->a, false, true), lp->b, false, true);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += low[i] * lscale;
  }
  return y;
}

}  // namespace

std::vector<double> step_logits(const ModelState& model, KvCache& cache, TokenId token,
                                const KvHooks* hooks) {
  const ModelConfig& cfg = model.config;
  if (cache.layers.size() != static_cast<std::size_t>(cfg.n_layers) ||
      cache.kv_dim != cfg.kv_dim())
    throw DimensionError("kv cache does not match model");
  if (cache.length >= static_cast<std::size_t>(cfg.max_seq_len))
    throw LengthError("decode position exceeds max_seq_len");
  if (token < 0 || token >= cfg.vocab_size) throw DimensionError("token id out of vocabulary");
  if (hooks) hooks->validate(cfg);

  const std::size_t pos = cache.length;
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto kvd = static_cast<std::size_t>(cfg.kv_dim());
  const auto hd = static_cast<std::size_t>(cfg.head_dim);
  const bool use_lora = model.lora.has_value();
  const double lscale = use_lora ? model.lora->scale() : 0.0;
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));

  Tensor x({1, d});
  for (std::size_t j = 0; j < d; ++j)
    x[j] = model.tok_emb(static_cast<std::size_t>(token), j) + model.pos_emb(pos, j);

  for (int l = 0; l < cfg.n_layers; ++l) {
    const int layer1 = l + 1;
    const LayerParams& P = model.layers[static_cast<std::size_t>(l)];
    auto lp = [&](LoraTarget t) { return use_lora ? &model.lora->at(l, t) : nullptr; };
    Tensor h = kernels::layer_norm(x, P.ln1_g, P.ln1_b, 1e-5);
    Tensor q = row_linear(h, P.wq, lp(LoraTarget::Q), lscale);
    Tensor k = row_linear(h, P.wk, lp(LoraTarget::K), lscale);
    Tensor v = row_linear(h, P.wv, lp(LoraTarget::V), lscale);
    if (hooks) {
      if (const Tensor* pk = hooks->find(layer1, KvKind::K)) {
        k = kernels::matmul(k, *pk);
        cache.projected = true;
      }
      if (const Tensor* pv = hooks->find(layer1, KvKind::V)) {
        v = kernels::matmul(v, *pv);
        cache.projected = true;
      }
    }
    auto& cl = cache.layers[static_cast<std::size_t>(l)];
    cl.keys.insert(cl.keys.end(), k.data().begin(), k.data().end());
    cl.values.insert(cl.values.end(), v.data().begin(), v.data().end());

    const std::size_t n = pos + 1;
    Tensor att({1, kvd});
    std::vector<double> scores(n), probs(n);
    for (int hh = 0; hh < cfg.n_heads; ++hh) {
      const std::size_t off = static_cast<std::size_t>(hh) * hd;
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < hd; ++c) s += q[off + c] * cl.keys[j * kvd + off + c];
        scores[j] = s * attn_scale;
      }
      kernels::softmax_row(scores, probs, n);
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t c = 0; c < hd; ++c) att[off + c] += probs[j] * cl.values[j * kvd + off + c];
    }
    Tensor o = row_linear(att, P.wo, lp(LoraTarget::O), lscale);
    for (std::size_t j = 0; j < d; ++j) x[j] += o[j];

    Tensor h2 = kernels::layer_norm(x, P.ln2_g, P.ln2_b, 1e-5);
    Tensor mid = kernels::matmul(h2, P.w1);
    for (std::size_t j = 0; j < mid.size(); ++j) mid[j] = kernels::gelu(mid[j] + P.b1[j]);
    Tensor mlp = kernels::matmul(mid, P.w2);
    for (std::size_t j = 0; j < d; ++j) x[j] += mlp[j] + P.b2[j];
  }
  cache.length = pos + 1;
  Tensor hf = kernels::layer_norm(x, model.lnf_g, model.lnf_b, 1e-5);
  return kernels::matmul(hf, model.w_out).data();
}

TokenId decode_step(const ModelState& model, KvCache& cache, TokenId token, const KvHooks* hooks,
                    Rng& rng, const SamplingConfig& sampling) {
  auto logits = step_logits(model, cache, token, hooks);
  return sample_token(logits, sampling, rng);
}

namespace {

bool is_stop(const SamplingConfig& s, TokenId t) {
  return std::find(s.stop_tokens.begin(), s.stop_tokens.end(), t) != s.stop_tokens.end();
}

}  // namespace

TokenSeq decode(const ModelState& model, std::span<const TokenId> prompt, const KvHooks* hooks,
                Rng& rng, const SamplingConfig& sampling) {
  sampling.validate();
  if (prompt.empty()) throw LengthError("decode: empty prompt");
  const auto max_len = static_cast<std::size_t>(model.config.max_seq_len);
  if (prompt.size() > max_len) throw LengthError("decode: prompt exceeds max_seq_len");
  KvCache cache = KvCache::make(model.config);
  std::vector<double> logits;
  for (TokenId t : prompt) logits = step_logits(model, cache, t, hooks);
  TokenSeq outp;
  for (int i = 0; i < sampling.max_new_tokens && cache.length < max_len; ++i) {
    const TokenId next = sample_token(logits, sampling, rng);
    outp.push_back(next);
    if (is_stop(sampling, next) || i + 1 == sampling.max_new_tokens || cache.length + 1 >= max_len)
      break;
    logits = step_logits(model, cache, next, hooks);
  }
  return outp;
}

TokenSeq decode_recompute(const ModelState& model, std::span<const TokenId> prompt,
                          const KvHooks* hooks, Rng& rng, const SamplingConfig& sampling) {
  sampling.validate();
  const auto max_len = static_cast<std::size_t>(model.config.max_seq_len);
  TokenSeq seq(prompt.begin(), prompt.end());
  TokenSeq outp;
  for (int i = 0; i < sampling.max_new_tokens && seq.size() < max_len; ++i) {
    Tensor logits = forward_logits(model, seq, hooks);
    const TokenId next = sample_token(logits.row(logits.rows() - 1), sampling, rng);
    outp.push_back(next);
    if (is_stop(sampling, next)) break;
    seq.push_back(next);
  }
  return outp;
}

double lora_parity(const ModelState& model, std::span<const TokenId> probe) {
  ModelState base = model;
  base.lora.reset();
  return kernels::max_abs_diff(forward_logits(base, probe), forward_logits(model, probe));
}

// ---- sampling ---------------------------------------------------------------

SamplingConfig SamplingConfig::greedy(int max_new_tokens, std::vector<int> stop_tokens) {
  SamplingConfig s;
  s.strategy = SamplingStrategy::Greedy;
  s.max_new_tokens = max_new_tokens;
  s.stop_tokens = std::move(stop_tokens);
  return s;
}

void SamplingConfig::validate() const {
  if (max_new_tokens < 1) throw Error("sampling: max_new_tokens must be >= 1");
  if (strategy == SamplingStrategy::Ancestral && !(temperature > 0.0))
    throw Error("sampling: ancestral sampling needs temperature > 0");
}

std::string SamplingConfig::describe() const {
  std::ostringstream os;
  os << to_string(strategy);
  if (strategy == SamplingStrategy::Ancestral) os << " T=" << temperature;
  os << " max_new_tokens=" << max_new_tokens;
  return os.str();
}

std::string to_string(SamplingStrategy s) {
  return s == SamplingStrategy::Greedy ? "greedy" : "ancestral";
}

SamplingStrategy parse_sampling_strategy(const std::string& s) {
  if (s == "greedy") return SamplingStrategy::Greedy;
  if (s == "ancestral") return SamplingStrategy::Ancestral;
  throw Error("unknown sampling strategy '" + s + "'");
}

int sample_token(std::span<const double> logits, const SamplingConfig& cfg, Rng& rng) {
  if (logits.empty()) throw DimensionError("sample_token: empty logits");
  if (cfg.strategy == SamplingStrategy::Greedy) {
    return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  std::vector<double> scaled(logits.size()), probs(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) scaled[i] = logits[i] / cfg.temperature;
  kernels::softmax_row(scaled, probs, probs.size());
  // 53-bit uniform in [0, 1) built directly from the engine so the draw does not
  // depend on the standard library's distribution implementation.
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return static_cast<int>(i);
  }
  for (std::size_t i = probs.size(); i-- > 0;)
    if (probs[i] > 0.0) return static_cast<int>(i);
  return 0;
}

}  // namespace spd
