#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "spd/calibration.hpp"
#include "spd/checkpoint.hpp"
#include "spd/binio.hpp"
#include "spd/svd.hpp"
#include "support.hpp"

using namespace spd;

namespace {

TokenSeq random_tokens(std::size_t n, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(0, Tokenizer::vocab_size() - 1);
  TokenSeq t(n);
  for (auto& x : t) x = d(rng);
  return t;
}

std::vector<TokenSeq> random_prompts(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> len(3, 20);
  std::vector<TokenSeq> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_tokens(len(rng), rng));
  return out;
}

// Orthogonal projector onto a random r-dimensional subspace of R^d.
Tensor random_projector(std::size_t d, std::size_t r, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto s = linalg::svd(ts::rand_tensor({r, d}, rng));
  const Tensor v = linalg::top_right_vectors(s, r);
  return kernels::matmul(v, v, false, true);
}

KvHooks hooks_with(const ModelConfig& cfg, std::vector<int> layers, const Tensor& p) {
  KvHooks h;
  for (int l : layers) {
    h.k[l] = p;
    h.v[l] = p;
  }
  h.validate(cfg);
  return h;
}

}  // namespace

TEST_CASE("single-token forward gives one logits row") {
  const auto m = ModelState::init(ts::default_config(), 1);
  const TokenSeq one = {5};
  const Tensor l = forward_logits(m, one);
  CHECK(l.rows() == 1);
  CHECK(l.cols() == static_cast<std::size_t>(Tokenizer::vocab_size()));
}

TEST_CASE("over-long input is a length error") {
  auto cfg = ts::tiny_config();
  cfg.max_seq_len = 8;
  const auto m = ModelState::init(cfg, 1);
  const TokenSeq t(9, 1);
  CHECK_THROWS_AS(forward_logits(m, t), LengthError);
}

TEST_CASE("causality: prefix logits ignore any suffix") {
  auto m = ModelState::init(ts::default_config(), 2);
  ts::jitter(m, 3);
  std::mt19937_64 rng(4);
  const TokenSeq base = random_tokens(30, rng);
  const Tensor full = forward_logits(m, base);
  for (std::size_t cut : {1u, 7u, 29u}) {
    TokenSeq prefix(base.begin(), base.begin() + cut);
    const Tensor lp = forward_logits(m, prefix);
    TokenSeq other = prefix;
    for (int k = 0; k < 5; ++k) other.push_back((k * 7 + 3) % Tokenizer::vocab_size());
    const Tensor lo = forward_logits(m, other);
    for (std::size_t r = 0; r < cut; ++r)
      for (std::size_t c = 0; c < lp.cols(); ++c) {
        CHECK(std::abs(lp(r, c) - full(r, c)) <= 1e-12);
        CHECK(std::abs(lp(r, c) - lo(r, c)) <= 1e-12);
      }
  }
}

TEST_CASE("tapped K/V gradients match perturbation finite differences") {
  auto m = ModelState::init(ts::tiny_config(2), 5);
  ts::jitter(m, 6);
  const auto ex = gen_math(7, 1)[0];
  const TokenSeq toks = ex.tokens();
  AlignedLossSpec spec{LossMode::Aligned, extract_spans(ex)};
  for (int layer : {1, 2})
    for (KvKind kind : {KvKind::K, KvKind::V}) {
      ad::Tape t;
      ForwardOptions fo;
      fo.taps = {{layer, kind}};
      auto fwd = forward(t, m, toks, fo);
      auto res = t.backward(aligned_loss(t, fwd.logits, toks, spec));
      const Tensor& g = res.taps[fwd.taps[0].second].grad;
      auto f = [&](const Tensor& delta) {
        ad::Tape tt;
        ForwardOptions o;
        o.kv_delta[{layer, kind}] = delta;
        auto out = forward(tt, m, toks, o);
        return tt.value(aligned_loss(tt, out.logits, toks, spec))[0];
      };
      const Tensor num = ts::numeric_grad(f, Tensor(g.shape()));
      INFO("layer " << layer << " " << to_string(kind));
      CHECK(ts::max_rel_err(g, num) < 1e-4);
    }
}

TEST_CASE("full-rank hooks leave greedy decoding unchanged") {
  auto m = ModelState::init(ts::default_config(), 8);
  ts::jitter(m, 9, 0.1);
  const auto d = static_cast<std::size_t>(m.config.kv_dim());
  const KvHooks h = hooks_with(m.config, m.config.last_mid_layers(), random_projector(d, d, 10));
  const auto sc = SamplingConfig::greedy(24, {Tokenizer::eos()});
  for (const auto& p : random_prompts(20, 11)) {
    Rng r1(0), r2(0);
    CHECK(decode(m, p, &h, r1, sc) == decode(m, p, nullptr, r2, sc));
  }
}

TEST_CASE("zero projector still decodes to the token budget") {
  const auto m = ModelState::init(ts::tiny_config(), 12);
  const auto d = static_cast<std::size_t>(m.config.kv_dim());
  const KvHooks h = hooks_with(m.config, {1, 2}, Tensor({d, d}));
  const auto sc = SamplingConfig::greedy(15, {});
  Rng rng(0);
  const TokenSeq p = {1, 2, 3};
  const auto out = decode(m, p, &h, rng, sc);
  CHECK(out.size() == 15);
}

TEST_CASE("cached decoding equals full recompute") {
  auto m = ModelState::init(ts::default_config(), 13);
  ts::jitter(m, 14, 0.1);
  const auto d = static_cast<std::size_t>(m.config.kv_dim());
  const KvHooks h = hooks_with(m.config, {4, 2}, random_projector(d, d / 2, 15));
  for (const auto& p : random_prompts(10, 16)) {
    const auto g = SamplingConfig::greedy(20, {Tokenizer::eos()});
    Rng a(1), b(1);
    CHECK(decode(m, p, nullptr, a, g) == decode_recompute(m, p, nullptr, b, g));
    CHECK(decode(m, p, &h, a, g) == decode_recompute(m, p, &h, b, g));
    SamplingConfig anc;
    anc.max_new_tokens = 20;
    Rng c(7), e(7);
    CHECK(decode(m, p, &h, c, anc) == decode_recompute(m, p, &h, e, anc));
  }
}

TEST_CASE("decoding never exceeds the context window") {
  auto cfg = ts::tiny_config();
  cfg.max_seq_len = 12;
  const auto m = ModelState::init(cfg, 17);
  const TokenSeq p(9, 4);
  Rng a(0), b(0);
  const auto sc = SamplingConfig::greedy(50, {});
  const auto out = decode(m, p, nullptr, a, sc);
  CHECK(p.size() + out.size() == 12);
  CHECK(out == decode_recompute(m, p, nullptr, b, sc));
}

TEST_CASE("projected cache rows are fixed points of the projector") {
  auto m = ModelState::init(ts::default_config(), 18);
  const auto d = static_cast<std::size_t>(m.config.kv_dim());
  const Tensor p = random_projector(d, 20, 19);
  const KvHooks h = hooks_with(m.config, {2}, p);
  KvCache cache = KvCache::make(m.config);
  KvCache plain = KvCache::make(m.config);
  for (TokenId t : {3, 9, 27, 1, 40}) {
    step_logits(m, cache, t, &h);
    step_logits(m, plain, t, nullptr);
  }
  CHECK(cache.length == 5);
  CHECK(cache.projected);
  for (const Tensor& rows : {cache.keys(2), cache.values(2)}) {
    const Tensor rp = kernels::matmul(rows, p, false, false);
    CHECK(kernels::max_abs_diff(rp, rows) < 1e-9);
  }
  // layers before the first hooked layer are untouched
  CHECK(cache.keys(1) == plain.keys(1));
  CHECK(cache.values(1) == plain.values(1));
  CHECK_FALSE(cache.keys(2) == plain.keys(2));
}

TEST_CASE("mismatched hooks are a bundle error") {
  const auto m = ModelState::init(ts::tiny_config(), 20);
  KvHooks bad;
  bad.k[1] = Tensor::identity(5);
  Rng rng(0);
  const TokenSeq p = {1, 2};
  CHECK_THROWS_AS(decode(m, p, &bad, rng, SamplingConfig::greedy(3, {})), BundleError);
  KvHooks far;
  far.v[9] = Tensor::identity(16);
  CHECK_THROWS_AS(far.validate(m.config), BundleError);
}

TEST_CASE("LoRA parity: zero-B is exact, nonzero B is not") {
  auto m = ModelState::init(ts::default_config(), 21);
  m.lora = LoraAdapters::attach(m.config, 8, 8.0, 0.05, 22);
  const TokenSeq probe = Tokenizer::encode("sam has 3 keys, gets 4. how many?\n");
  CHECK(lora_parity(m, probe) == 0.0);
  m.lora->at(1, LoraTarget::V).b(3, 2) = 0.5;
  CHECK(lora_parity(m, probe) > 0.0);
}

TEST_CASE("LoRA A and B gradients match finite differences") {
  auto m = ModelState::init(ts::tiny_config(1), 23);
  ts::jitter(m, 24);
  m.lora = LoraAdapters::attach(m.config, 4, 8.0, 0.0, 25);
  std::mt19937_64 rng(26);
  m.lora->for_each_param([&](Tensor& t) {
    for (double& v : t.data()) v += 0.1 * std::uniform_real_distribution<double>(-1, 1)(rng);
  });
  const auto toks = Tokenizer::encode("do rev on [1,2]\nf=rev(x)$");
  std::vector<double> w(toks.size(), 1.0 / static_cast<double>(toks.size() - 1));
  w.back() = 0.0;
  std::vector<int> tg(toks.size(), 0);
  for (std::size_t i = 0; i + 1 < toks.size(); ++i) tg[i] = toks[i + 1];
  auto loss = [&](ad::Tape& t) {
    ForwardOptions fo;
    fo.train_lora = true;
    return ad::weighted_nll(t, forward(t, m, toks, fo).logits, tg, w);
  };
  ad::Tape t;
  auto res = t.backward(loss(t));
  for (LoraTarget tgt : kLoraTargets) {
    for (Tensor* p : {&m.lora->at(0, tgt).a, &m.lora->at(0, tgt).b}) {
      auto f = [&](const Tensor& v) {
        const Tensor saved = *p;
        *p = v;
        ad::Tape tt;
        const double r = tt.value(loss(tt))[0];
        *p = saved;
        return r;
      };
      CHECK(ts::max_rel_err(res.params.at(*p), ts::numeric_grad(f, *p)) < 1e-4);
    }
  }
}

TEST_CASE("checkpoints round-trip bit-exactly and detect corruption") {
  const auto dir = ts::temp_dir("ckpt");
  auto m = ModelState::init(ts::tiny_config(), 27);
  m.lora = LoraAdapters::attach(m.config, 4, 8.0, 0.05, 28);
  m.lora->at(1, LoraTarget::O).b(0, 0) = 0.25;
  const std::string path = (dir / "m.ckpt").string();
  save_checkpoint(path, m);
  const ModelState back = load_checkpoint(path);
  CHECK(back.config == m.config);
  CHECK(back.base_checksum() == m.base_checksum());
  CHECK(back.lora_checksum() == m.lora_checksum());
  auto bytes = read_file_bytes(path);
  bytes[bytes.size() / 2] ^= 0x01;
  write_file_bytes(path, bytes);
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);

  const std::string apath = (dir / "a.bin").string();
  save_adapters(apath, m);
  ModelState fresh = ModelState::init(ts::tiny_config(), 27);
  load_adapters(apath, fresh);
  CHECK(fresh.lora_checksum() == m.lora_checksum());
  ModelState other = ModelState::init(ts::tiny_config(), 99);
  CHECK_THROWS(load_adapters(apath, other));
}

TEST_CASE("sampling: greedy takes the first maximum, ancestral is seeded") {
  const std::vector<double> logits = {0.1, 2.0, 2.0, -1.0};
  SamplingConfig g = SamplingConfig::greedy(1, {});
  Rng rng(0);
  CHECK(sample_token(logits, g, rng) == 1);
  SamplingConfig a;
  Rng r1(5), r2(5);
  for (int i = 0; i < 20; ++i) CHECK(sample_token(logits, a, r1) == sample_token(logits, a, r2));
  SamplingConfig bad;
  bad.temperature = 0.0;
  CHECK_THROWS(bad.validate());
  bad.temperature = 1.0;
  bad.max_new_tokens = 0;
  CHECK_THROWS(bad.validate());
}
