#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "spd/generation.hpp"
#include "support.hpp"

using namespace spd;

namespace {

ModelState small_model(std::uint64_t seed) {
  auto m = ModelState::init(ts::tiny_config(2), seed);
  ts::jitter(m, seed + 1, 0.2);
  return m;
}

ProjectionBundle uniform_bundle(const ModelState& m, const Tensor& p) {
  ProjectionBundle b;
  b.meta.model_checksum = m.base_checksum();
  b.meta.config = m.config;
  for (int layer : m.config.last_mid_layers())
    for (KvKind kind : {KvKind::K, KvKind::V}) {
      Projector pr;
      pr.layer = layer;
      pr.kind = kind;
      pr.p = p;
      b.projectors.push_back(pr);
    }
  return b;
}

Tensor eye(std::size_t d) {
  Tensor t({d, d});
  for (std::size_t i = 0; i < d; ++i) t(i, i) = 1.0;
  return t;
}

std::vector<std::string> prompts(std::size_t n) {
  std::vector<std::string> out;
  for (const auto& ex : gen_math(31, n)) out.push_back(ex.prompt);
  return out;
}

SamplingConfig short_sampling(std::uint64_t seed) {
  auto s = default_generation_sampling(seed);
  s.max_new_tokens = 12;
  return s;
}

}  // namespace

TEST_CASE("default generation sampling") {
  const auto s = default_generation_sampling(9);
  CHECK(s.strategy == SamplingStrategy::Ancestral);
  CHECK(s.temperature == 1.0);
  CHECK(s.seed == 9);
  CHECK(s.stop_tokens == std::vector<int>{Tokenizer::eos()});
}

TEST_CASE("one record per prompt, in order, with per-record seeds") {
  const auto m = small_model(1);
  const auto ps = prompts(25);
  const auto recs = generate_corpus(m, ps, {}, short_sampling(100));
  REQUIRE(recs.size() == ps.size());
  for (std::size_t i = 0; i < ps.size(); ++i) {
    CHECK(recs[i].prompt == ps[i]);
    CHECK(recs[i].seed == 100 + i);
    CHECK(recs[i].generator == GeneratorTag::Base);
    CHECK_FALSE(recs[i].bundle_checksum.has_value());
    CHECK(Tokenizer::encode(recs[i].completion).size() <= 12);
  }
  // a record depends only on its own prompt and seed
  const auto tail = generate_corpus(m, std::vector<std::string>(ps.begin() + 10, ps.end()), {},
                                    short_sampling(110));
  for (std::size_t i = 0; i < tail.size(); ++i) CHECK(tail[i] == recs[10 + i]);
}

TEST_CASE("seeded determinism and seed sensitivity") {
  const auto m = small_model(2);
  const auto ps = prompts(50);
  const auto a = generate_corpus(m, ps, {}, short_sampling(7));
  const auto b = generate_corpus(m, ps, {}, short_sampling(7));
  CHECK(a == b);
  const auto c = generate_corpus(m, ps, {}, short_sampling(8));
  std::size_t differ = 0;
  for (std::size_t i = 0; i < ps.size(); ++i) differ += a[i].completion != c[i].completion;
  CHECK(differ > 0);
}

TEST_CASE("full-rank bundle reproduces the base corpus") {
  const auto m = small_model(3);
  const auto b = uniform_bundle(m, eye(static_cast<std::size_t>(m.config.kv_dim())));
  const auto ps = prompts(20);
  const auto base = generate_corpus(m, ps, {}, short_sampling(5));
  const auto hooked = generate_corpus(m, ps, {&b, ProjectMode::Both}, short_sampling(5));
  for (std::size_t i = 0; i < ps.size(); ++i) {
    CHECK(hooked[i].completion == base[i].completion);
    CHECK(hooked[i].generator == GeneratorTag::Hooked);
    CHECK(hooked[i].bundle_checksum == b.checksum());
  }
}

TEST_CASE("a low-rank bundle changes the corpus and leaves no trace") {
  const auto m = small_model(4);
  const std::size_t d = static_cast<std::size_t>(m.config.kv_dim());
  Tensor p({d, d});
  p(0, 0) = 1.0;
  const auto b = uniform_bundle(m, p);
  const auto ps = prompts(20);
  const auto before = generate_corpus(m, ps, {}, short_sampling(6));
  const auto hooked = generate_corpus(m, ps, {&b, ProjectMode::Both}, short_sampling(6));
  const auto after = generate_corpus(m, ps, {}, short_sampling(6));
  CHECK(before == after);
  std::size_t differ = 0;
  for (std::size_t i = 0; i < ps.size(); ++i) differ += hooked[i].completion != before[i].completion;
  CHECK(differ > 0);
  const auto greedy = SamplingConfig::greedy(12, {Tokenizer::eos()});
  for (const auto& pr : ps) {
    const auto toks = Tokenizer::encode(pr);
    Rng r1(0), r2(0);
    const auto ref = decode_recompute(m, toks, nullptr, r1, greedy);
    CHECK(decode(m, toks, nullptr, r2, greedy) == ref);
  }
}

TEST_CASE("a bundle from another model is refused before decoding") {
  const auto m = small_model(5);
  const auto b = uniform_bundle(small_model(55), eye(static_cast<std::size_t>(m.config.kv_dim())));
  CHECK_THROWS_AS(generate_corpus(m, prompts(3), {&b, ProjectMode::Both}, short_sampling(1)),
                  BundleError);
}

TEST_CASE("example prompts route through the string overload") {
  const auto m = small_model(6);
  const auto exs = gen_choice(8, 5);
  std::vector<std::string> ps;
  for (const auto& e : exs) ps.push_back(e.prompt);
  CHECK(generate_corpus(m, exs, {}, short_sampling(2)) == generate_corpus(m, ps, {}, short_sampling(2)));
}

TEST_CASE("truncation approximation") {
  const TruncationPolicy pol;  // 0.5 of 64 -> 32 tokens
  auto rec = [](std::string c) {
    CorpusRecord r;
    r.prompt = "p\n";
    r.completion = std::move(c);
    r.seed = 3;
    return r;
  };
  const std::string forty(40, 'a');
  const auto out = truncate_ssd({rec("12$rest"), rec(forty), rec("short"), rec("")}, pol);
  CHECK(out[0].completion == "12$");
  CHECK(out[1].completion == std::string(32, 'a'));
  CHECK(out[2].completion == "short");
  CHECK(out[3].completion.empty());
  for (const auto& r : out) {
    CHECK(r.generator == GeneratorTag::Truncated);
    CHECK(r.prompt == "p\n");
    CHECK(r.seed == 3);
  }
  TruncationPolicy forty_tokens;
  forty_tokens.max_new_tokens = 40;
  CHECK(truncate_ssd({rec(forty)}, forty_tokens)[0].completion == std::string(20, 'a'));

  const auto m = small_model(7);
  const auto corpus = generate_corpus(m, prompts(100), {}, short_sampling(4));
  const auto once = truncate_ssd(corpus, pol);
  CHECK(truncate_ssd(once, pol) == once);
  for (std::size_t i = 0; i < once.size(); ++i)
    CHECK(corpus[i].completion.rfind(once[i].completion, 0) == 0);
}

TEST_CASE("generator tags") {
  for (auto g : {GeneratorTag::Base, GeneratorTag::Hooked, GeneratorTag::Truncated})
    CHECK(parse_generator_tag(to_string(g)) == g);
  CHECK_THROWS(parse_generator_tag("teacher"));
}

TEST_CASE("corpus files round-trip") {
  const auto dir = ts::temp_dir("corpus");
  const auto m = small_model(8);
  const auto b = uniform_bundle(m, eye(static_cast<std::size_t>(m.config.kv_dim())));
  auto recs = generate_corpus(m, prompts(10), {&b, ProjectMode::K}, short_sampling(11));
  const auto base = generate_corpus(m, prompts(3), {}, short_sampling(11));
  recs.insert(recs.end(), base.begin(), base.end());
  recs.push_back(CorpusRecord{"q\"\\\n", "", GeneratorTag::Truncated, 1, std::nullopt});
  const std::string path = (dir / "c.jsonl").string();
  write_corpus(path, recs, short_sampling(11));
  CHECK(read_corpus(path) == recs);
  std::ifstream in(path);
  std::string first;
  std::getline(in, first);
  CHECK(first.find("\"sampling\"") != std::string::npos);
  CHECK(first.find("\"generator\":\"hooked\"") != std::string::npos);
}
