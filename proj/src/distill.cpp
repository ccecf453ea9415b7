#include "spd/distill.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "json.hpp"
#include "spd/calibration.hpp"

namespace spd {

std::string to_string(LossRegion r) {
  return r == LossRegion::FullConcat ? "full_concat" : "completion_only";
}

LossRegion parse_loss_region(const std::string& s) {
  if (s == "full_concat") return LossRegion::FullConcat;
  if (s == "completion_only") return LossRegion::CompletionOnly;
  throw Error("unknown loss region '" + s + "'");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw Error("train config: epochs must be >= 1");
  if (!(lr > 0.0)) throw Error("train config: lr must be > 0");
  if (lora_r < 1) throw Error("train config: lora_r must be >= 1");
  if (batch_size < 1) throw Error("train config: batch_size must be >= 1");
  if (!(lora_dropout >= 0.0 && lora_dropout < 1.0))
    throw Error("train config: lora_dropout must lie in [0, 1)");
  if (schedule != "cosine") throw Error("train config: unsupported schedule '" + schedule + "'");
}

void AdamW::step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
                 double lr) {
  if (params.size() != grads.size()) throw DimensionError("AdamW: params/grads size mismatch");
  if (m_.empty()) {
    for (const Tensor* p : params) {
      m_.emplace_back(p->shape());
      v_.emplace_back(p->shape());
    }
  }
  if (m_.size() != params.size()) throw DimensionError("AdamW: parameter set changed");
  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->data().data();
    auto m = m_[i].data().data();
    auto v = v_[i].data().data();
    const std::size_t n = params[i]->size();
    const double* g = grads[i] ? grads[i]->data().data() : nullptr;
    for (std::size_t k = 0; k < n; ++k) {
      const double gk = g ? g[k] : 0.0;
      m[k] = opt_.beta1 * m[k] + (1.0 - opt_.beta1) * gk;
      v[k] = opt_.beta2 * v[k] + (1.0 - opt_.beta2) * gk * gk;
      const double mh = m[k] / bc1;
      const double vh = v[k] / bc2;
      p[k] -= lr * (mh / (std::sqrt(vh) + opt_.eps) + opt_.weight_decay * p[k]);
    }
  }
}

double cosine_lr(double base, std::size_t step, std::size_t total) {
  if (total == 0) return base;
  const double x = static_cast<double>(step) / static_cast<double>(total);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * x));
}

std::vector<double> sft_row_weights(std::size_t prompt_len, std::size_t seq_len, LossRegion region) {
  if (seq_len < 2) throw TrainError("record shorter than two tokens");
  const std::size_t first = region == LossRegion::FullConcat ? 0 : std::max<std::size_t>(prompt_len, 1) - 1;
  std::vector<double> w(seq_len, 0.0);
  if (first + 1 >= seq_len) return w;
  const double inv = 1.0 / static_cast<double>(seq_len - 1 - first);
  for (std::size_t i = first; i + 1 < seq_len; ++i) w[i] = inv;
  return w;
}

namespace {

std::vector<int> shifted_targets(const TokenSeq& toks) {
  std::vector<int> tg(toks.size(), 0);
  for (std::size_t i = 0; i + 1 < toks.size(); ++i) tg[i] = toks[i + 1];
  return tg;
}

void collect_lora(ModelState& m, std::vector<Tensor*>& out) {
  m.lora->for_each_param([&](Tensor& t) { out.push_back(&t); });
}

}  // namespace

double record_loss(const ModelState& model, const CorpusRecord& rec, LossRegion region) {
  const TokenSeq toks = Tokenizer::encode(rec.text());
  const auto w = sft_row_weights(rec.prompt.size(), toks.size(), region);
  ad::Tape tape;
  auto fwd = forward(tape, model, toks);
  return tape.value(ad::weighted_nll(tape, fwd.logits, shifted_targets(toks), w))[0];
}

SftResult sft(ModelState model, const std::vector<CorpusRecord>& corpus, const TrainConfig& cfg) {
  cfg.validate();
  if (corpus.empty()) throw TrainError("sft: empty corpus");
  if (!model.lora)
    model.lora = LoraAdapters::attach(model.config, cfg.lora_r, cfg.lora_alpha, cfg.lora_dropout,
                                      cfg.seed);
  std::vector<Tensor*> params;
  collect_lora(model, params);

  std::vector<TokenSeq> toks(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    toks[i] = Tokenizer::encode(corpus[i].text());
    if (toks[i].size() > static_cast<std::size_t>(model.config.max_seq_len))
      throw TrainError("sft: record " + std::to_string(i) + " exceeds max_seq_len");
  }

  const std::size_t b = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t per_epoch = (corpus.size() + b - 1) / b;
  const std::size_t total = per_epoch * static_cast<std::size_t>(cfg.epochs);
  AdamW opt({0.9, 0.999, 1e-8, cfg.weight_decay});
  Rng order_rng(cfg.seed);
  Rng dropout_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

  SftResult res;
  std::vector<std::size_t> order(corpus.size());
  std::size_t step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), order_rng);
    double epoch_sum = 0.0;
    for (std::size_t s = 0; s < per_epoch; ++s, ++step) {
      const std::size_t lo = s * b, hi = std::min(corpus.size(), lo + b);
      std::vector<Tensor> acc;
      for (Tensor* p : params) acc.emplace_back(p->shape());
      double batch_loss = 0.0;
      for (std::size_t k = lo; k < hi; ++k) {
        const std::size_t idx = order[k];
        auto w = sft_row_weights(corpus[idx].prompt.size(), toks[idx].size(), cfg.region);
        const double inv_b = 1.0 / static_cast<double>(hi - lo);
        for (double& x : w) x *= inv_b;
        ad::Tape tape;
        ForwardOptions fo;
        fo.train_lora = true;
        fo.dropout_rng = &dropout_rng;
        auto fwd = forward(tape, model, toks[idx], fo);
        ad::Var loss = ad::weighted_nll(tape, fwd.logits, shifted_targets(toks[idx]), w);
        const double lv = tape.value(loss)[0];
        if (!std::isfinite(lv))
          throw TrainError("sft: non-finite loss on corpus record " + std::to_string(idx));
        batch_loss += lv;
        auto g = tape.backward(loss);
        for (std::size_t i = 0; i < params.size(); ++i)
          if (const Tensor* gi = g.params.find(*params[i]))
            for (std::size_t e = 0; e < gi->size(); ++e) acc[i][e] += (*gi)[e];
      }
      std::vector<const Tensor*> gp;
      for (const auto& t : acc) gp.push_back(&t);
      const double lr = cosine_lr(cfg.lr, step, total);
      opt.step(params, gp, lr);
      res.steps.push_back({step, epoch, lr, batch_loss});
      epoch_sum += batch_loss;
    }
    res.epoch_loss.push_back(epoch_sum / static_cast<double>(per_epoch));
  }
  res.model = std::move(model);
  return res;
}

void write_loss_curve(const std::string& path, const std::vector<TrainStep>& steps) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write loss curve " + path);
  os << "step,epoch,lr,loss\n";
  os.precision(17);
  for (const auto& s : steps) os << s.step << ',' << s.epoch << ',' << s.lr << ',' << s.loss << '\n';
}

// ---- pretraining ---------------------------------------------------------------

PretrainResult pretrain(const ModelConfig& mcfg, const PretrainConfig& cfg,
                        const std::vector<Example>& pool, const std::vector<Example>& band_eval) {
  if (pool.empty()) throw TrainError("pretrain: empty example pool");
  if (cfg.eval_every < 1 || cfg.batch_size < 1 || !(cfg.lr > 0.0))
    throw TrainError("pretrain: invalid configuration");
  PretrainResult res;
  res.model = ModelState::init(mcfg, cfg.init_seed);
  ModelState& model = res.model;
  std::vector<Tensor*> params;
  model.for_each_base_param([&](Tensor& t) { params.push_back(&t); });

  std::vector<TokenSeq> toks(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) toks[i] = pool[i].tokens();

  AdamW opt({0.9, 0.999, 1e-8, 0.0});
  Rng rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  double lr_scale = 1.0;
  ModelState snapshot = model;
  AdamW snapshot_opt = opt;
  double window = 0.0;
  int window_n = 0;

  for (int step = 1; step <= cfg.max_steps; ++step) {
    std::vector<Tensor> acc;
    for (Tensor* p : params) acc.emplace_back(p->shape());
    double loss_sum = 0.0;
    for (int k = 0; k < cfg.batch_size; ++k) {
      const std::size_t idx = pick(rng);
      auto w = sft_row_weights(pool[idx].prompt.size(), toks[idx].size(), cfg.region);
      for (double& x : w) x /= cfg.batch_size;
      ad::Tape tape;
      ForwardOptions fo;
      fo.train_base = true;
      auto fwd = forward(tape, model, toks[idx], fo);
      ad::Var loss = ad::weighted_nll(tape, fwd.logits, shifted_targets(toks[idx]), w);
      const double lv = tape.value(loss)[0];
      if (!std::isfinite(lv)) throw TrainError("pretrain: non-finite loss at step " + std::to_string(step));
      loss_sum += lv;
      auto g = tape.backward(loss);
      for (std::size_t i = 0; i < params.size(); ++i)
        if (const Tensor* gi = g.params.find(*params[i]))
          for (std::size_t e = 0; e < gi->size(); ++e) acc[i][e] += (*gi)[e];
    }
    std::vector<const Tensor*> gp;
    for (const auto& t : acc) gp.push_back(&t);
    const double warm = std::min(1.0, static_cast<double>(step) / std::max(1, cfg.warmup));
    opt.step(params, gp, cfg.lr * lr_scale * warm);
    window += loss_sum;
    ++window_n;
    res.steps = step;

    if (step % cfg.eval_every == 0 || step == cfg.max_steps) {
      const double acc_now = band_eval.empty() ? 0.0 : eval_accuracy(model, band_eval).accuracy;
      res.log.push_back({step, window / window_n, acc_now});
      window = 0.0;
      window_n = 0;
      res.accuracy = acc_now;
      if (acc_now >= cfg.band_lo && acc_now <= cfg.band_hi) {
        res.in_band = true;
        break;
      }
      if (acc_now > cfg.band_hi) {
        model = snapshot;
        opt = snapshot_opt;
        lr_scale *= 0.5;
      } else {
        snapshot = model;
        snapshot_opt = opt;
      }
    }
  }
  return res;
}

// ---- evaluation ------------------------------------------------------------------

double eval_nll(const ModelState& model, const std::vector<Example>& examples, const KvHooks* hooks) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& ex : examples) {
    const TokenSeq toks = ex.tokens();
    const Tensor logits = forward_logits(model, toks, hooks);
    const std::size_t v = logits.cols();
    for (std::size_t t = std::max<std::size_t>(ex.prompt.size(), 1); t < toks.size(); ++t) {
      auto row = logits.row(t - 1);
      double mx = row[0];
      for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
      double z = 0.0;
      for (std::size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
      total += std::log(z) + mx - row[static_cast<std::size_t>(toks[t])];
      ++count;
    }
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

AccuracyReport score_completions(const std::vector<Example>& examples,
                                 const std::vector<std::string>& completions) {
  if (examples.size() != completions.size())
    throw DimensionError("score_completions: size mismatch");
  AccuracyReport r;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    Verdict v;
    v.index = i;
    v.kind = examples[i].kind;
    v.prompt = examples[i].prompt;
    v.completion = completions[i];
    v.gold = examples[i].answer;
    v.correct = eval_correct(v.kind, v.prompt, v.completion);
    r.correct += v.correct ? 1 : 0;
    r.verdicts.push_back(std::move(v));
  }
  r.total = examples.size();
  r.accuracy = r.total ? static_cast<double>(r.correct) / static_cast<double>(r.total) : 0.0;
  return r;
}

AccuracyReport eval_accuracy(const ModelState& model, const std::vector<Example>& examples,
                             int max_new_tokens) {
  const SamplingConfig sc = SamplingConfig::greedy(max_new_tokens, {Tokenizer::eos()});
  std::vector<std::string> comps;
  comps.reserve(examples.size());
  Rng rng(0);
  for (const auto& ex : examples)
    comps.push_back(Tokenizer::decode(decode(model, Tokenizer::encode(ex.prompt), nullptr, rng, sc)));
  return score_completions(examples, comps);
}

void write_verdicts(const std::string& path, const AccuracyReport& r) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write verdicts " + path);
  for (const auto& v : r.verdicts) {
    nlohmann::ordered_json j;
    j["index"] = v.index;
    j["kind"] = to_string(v.kind);
    j["prompt"] = v.prompt;
    j["completion"] = v.completion;
    j["gold"] = v.gold;
    j["correct"] = v.correct;
    os << j.dump() << '\n';
  }
}

AccuracyReport read_verdicts(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read verdicts " + path);
  AccuracyReport r;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    Verdict v;
    v.index = j.at("index").get<std::size_t>();
    v.kind = parse_task_kind(j.at("kind").get<std::string>());
    v.prompt = j.at("prompt").get<std::string>();
    v.completion = j.at("completion").get<std::string>();
    v.gold = j.at("gold").get<std::string>();
    v.correct = j.at("correct").get<bool>();
    r.correct += v.correct ? 1 : 0;
    r.verdicts.push_back(std::move(v));
  }
  r.total = r.verdicts.size();
  r.accuracy = r.total ? static_cast<double>(r.correct) / static_cast<double>(r.total) : 0.0;
  return r;
}

}  // namespace spd
