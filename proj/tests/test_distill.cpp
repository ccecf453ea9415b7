#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "spd/distill.hpp"
#include "support.hpp"

using namespace spd;

namespace {

ModelState small_model(std::uint64_t seed) {
  auto m = ModelState::init(ts::tiny_config(2), seed);
  ts::jitter(m, seed + 1);
  return m;
}

std::vector<CorpusRecord> gold_corpus(std::size_t n, std::uint64_t seed) {
  std::vector<CorpusRecord> out;
  for (const auto& ex : gen_math(seed, n))
    out.push_back(CorpusRecord{ex.prompt, ex.answer, GeneratorTag::Base, 0, std::nullopt});
  return out;
}

}  // namespace

TEST_CASE("training defaults") {
  const TrainConfig c;
  CHECK(c.lr == 1e-5);
  CHECK(c.weight_decay == 0.01);
  CHECK(c.schedule == "cosine");
  CHECK(c.epochs == 5);
  CHECK(c.batch_size == 1);
  CHECK(c.lora_r == 8);
  CHECK(c.lora_alpha == 8.0);
  CHECK(c.lora_dropout == 0.05);
  CHECK(c.region == LossRegion::FullConcat);
  CHECK_NOTHROW(c.validate());
  TrainConfig bad = c;
  bad.schedule = "linear";
  CHECK_THROWS(bad.validate());
  bad = c;
  bad.lora_dropout = 1.0;
  CHECK_THROWS(bad.validate());
  bad = c;
  bad.epochs = 0;
  CHECK_THROWS(bad.validate());
  for (auto r : {LossRegion::FullConcat, LossRegion::CompletionOnly})
    CHECK(parse_loss_region(to_string(r)) == r);
}

TEST_CASE("cosine schedule") {
  CHECK(cosine_lr(2.0, 0, 10) == 2.0);
  CHECK(cosine_lr(2.0, 5, 10) == doctest::Approx(1.0).epsilon(1e-14));
  for (std::size_t s = 1; s < 10; ++s) CHECK(cosine_lr(1.0, s, 10) < cosine_lr(1.0, s - 1, 10));
  CHECK(cosine_lr(1.0, 9, 10) > 0.0);
}

TEST_CASE("AdamW first step matches the closed form") {
  Tensor p = Tensor::matrix({{1.0, -2.0, 0.5}});
  const Tensor g = Tensor::matrix({{0.3, -4.0, 0.0}});
  AdamW opt({0.9, 0.999, 1e-8, 0.1});
  opt.step({&p}, {&g}, 0.01);
  // m_hat = g, v_hat = g^2 on the first step
  const std::vector<double> p0 = {1.0, -2.0, 0.5};
  const std::vector<double> g0 = {0.3, -4.0, 0.0};
  for (std::size_t i = 0; i < 3; ++i) {
    const double want = p0[i] - 0.01 * (g0[i] / (std::abs(g0[i]) + 1e-8) + 0.1 * p0[i]);
    CHECK(p[i] == doctest::Approx(want).epsilon(1e-14));
  }
  CHECK(opt.steps() == 1);
  Tensor q({2, 2});
  CHECK_THROWS_AS(opt.step({&p, &q}, {&g}, 0.01), DimensionError);
}

TEST_CASE("row weights of the next-token loss") {
  CHECK(sft_row_weights(2, 5, LossRegion::FullConcat) == std::vector<double>{0.25, 0.25, 0.25, 0.25, 0.0});
  CHECK(sft_row_weights(2, 5, LossRegion::CompletionOnly) ==
        std::vector<double>{0.0, 1.0 / 3, 1.0 / 3, 1.0 / 3, 0.0});
}

TEST_CASE("vanishing learning rate leaves the model's predictions unchanged") {
  const auto m = small_model(1);
  TrainConfig c;
  c.lr = 1e-300;
  c.epochs = 1;
  const auto res = sft(m, gold_corpus(4, 2), c);
  REQUIRE(res.model.lora.has_value());
  CHECK(res.steps.size() == 4);
  const auto toks = Tokenizer::encode(gen_math(3, 1)[0].text());
  CHECK(kernels::max_abs_diff(forward_logits(m, toks), forward_logits(res.model, toks)) < 1e-12);
}

TEST_CASE("sft trains adapters only, deterministically") {
  const auto m = small_model(4);
  const auto before = m.base_checksum();
  TrainConfig c;
  c.lr = 1e-3;
  c.epochs = 1;
  const auto corpus = gold_corpus(6, 5);
  const auto a = sft(m, corpus, c);
  const auto b = sft(m, corpus, c);
  CHECK(a.model.base_checksum() == before);
  CHECK(a.model.lora_checksum() != 0);
  CHECK(a.model.lora_checksum() == b.model.lora_checksum());
  c.seed = 43;
  CHECK(sft(m, corpus, c).model.lora_checksum() != a.model.lora_checksum());
}

TEST_CASE("a single record is memorised") {
  auto m = ModelState::init(ts::default_config(), 6);
  const auto corpus = gold_corpus(1, 7);
  TrainConfig c;
  c.lr = 1e-2;
  c.epochs = 200;
  c.lora_dropout = 0.0;
  c.weight_decay = 0.0;
  c.lora_r = 16;
  c.lora_alpha = 16;
  c.region = LossRegion::CompletionOnly;
  const double start = record_loss(m, corpus[0], c.region);
  const auto res = sft(m, corpus, c);
  const double end = record_loss(res.model, corpus[0], c.region);
  INFO("start " << start << " end " << end);
  CHECK(end < 0.1);
}

TEST_CASE("loss decreases over epochs on a small corpus") {
  const auto m = small_model(8);
  TrainConfig c;
  c.lr = 1e-3;
  c.epochs = 3;
  const auto res = sft(m, gold_corpus(50, 9), c);
  REQUIRE(res.epoch_loss.size() == 3);
  CHECK(res.epoch_loss[2] < res.epoch_loss[0]);
  CHECK(res.steps.front().lr == c.lr);
  CHECK(res.steps.back().lr < c.lr);

  const auto dir = ts::temp_dir("loss");
  const auto path = (dir / "loss.csv").string();
  write_loss_curve(path, res.steps);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "step,epoch,lr,loss");
  std::size_t lines = 0;
  for (std::string l; std::getline(in, l);) ++lines;
  CHECK(lines == res.steps.size());
}

TEST_CASE("a non-finite loss aborts training") {
  auto m = small_model(10);
  m.w_out(3, 3) = std::numeric_limits<double>::infinity();
  TrainConfig c;
  c.epochs = 1;
  CHECK_THROWS_AS(sft(m, gold_corpus(3, 11), c), TrainError);
}

TEST_CASE("nll of a uniform model is log V") {
  auto m = small_model(12);
  m.w_out.fill(0.0);
  CHECK(eval_nll(m, gen_choice(13, 5)) == doctest::Approx(std::log(Tokenizer::vocab_size())).epsilon(1e-13));
}

TEST_CASE("pretraining memorises a single example and nll is deterministic") {
  const auto ex = gen_math(14, 1);
  PretrainConfig pc;
  pc.max_steps = 150;
  pc.lr = 1e-2;
  pc.warmup = 10;
  pc.batch_size = 1;
  pc.eval_every = 1000;
  pc.band_lo = 2.0;
  pc.band_hi = 3.0;
  const auto res = pretrain(ts::tiny_config(2), pc, ex, ex);
  CHECK(res.steps == 150);
  CHECK_FALSE(res.in_band);
  const double nll = eval_nll(res.model, ex);
  CHECK(nll < 0.1);
  CHECK(eval_nll(res.model, ex) == nll);
  const auto rep = eval_accuracy(res.model, ex);
  CHECK(rep.accuracy == 1.0);
}

TEST_CASE("pretraining stops inside the accuracy band") {
  const auto ex = gen_math(15, 1);
  PretrainConfig pc;
  pc.max_steps = 400;
  pc.lr = 1e-2;
  pc.warmup = 10;
  pc.batch_size = 1;
  pc.eval_every = 20;
  pc.band_lo = 0.5;
  pc.band_hi = 1.0;
  const auto res = pretrain(ts::tiny_config(2), pc, ex, ex);
  CHECK(res.in_band);
  CHECK(res.accuracy == 1.0);
  CHECK(res.steps < 400);
  CHECK(res.steps % 20 == 0);
}

TEST_CASE("scoring and verdict files") {
  const auto exs = gen_program(16, 12);
  std::vector<std::string> gold, junk;
  for (const auto& e : exs) {
    gold.push_back(e.answer);
    junk.push_back("nothing$");
  }
  const auto good = score_completions(exs, gold);
  CHECK(good.accuracy == 1.0);
  CHECK(good.correct == 12);
  CHECK(score_completions(exs, junk).accuracy == 0.0);

  std::vector<std::string> mixed = gold;
  for (std::size_t i = 0; i < mixed.size(); i += 3) mixed[i] = "x$";
  const auto rep = score_completions(exs, mixed);
  CHECK(rep.correct == 8);
  const auto dir = ts::temp_dir("verdicts");
  const auto path = (dir / "v.jsonl").string();
  write_verdicts(path, rep);
  const auto back = read_verdicts(path);
  CHECK(back.total == 12);
  CHECK(back.correct == rep.correct);
  CHECK(back.accuracy == rep.accuracy);
  std::size_t recount = 0;
  for (const auto& v : back.verdicts) {
    recount += v.correct;
    CHECK(v.correct == eval_correct(v.kind, exs[v.index].prompt, v.completion));
  }
  CHECK(recount == rep.correct);
}
