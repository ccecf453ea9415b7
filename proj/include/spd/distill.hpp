#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "spd/generation.hpp"
#include "spd/model.hpp"
#include "spd/taskgen.hpp"

namespace spd {

class TrainError : public Error {
 public:
  using Error::Error;
};

enum class LossRegion { FullConcat, CompletionOnly };
std::string to_string(LossRegion r);
LossRegion parse_loss_region(const std::string& s);

struct TrainConfig {
  double lr = 1e-5;
  double weight_decay = 0.01;
  std::string schedule = "cosine";
  int epochs = 5;
  int batch_size = 1;
  int lora_r = 8;
  double lora_alpha = 8.0;
  double lora_dropout = 0.05;
  std::uint64_t seed = 42;
  LossRegion region = LossRegion::FullConcat;

  void validate() const;
};

// Decoupled weight decay Adam.
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
  };
  explicit AdamW(Options o) : opt_(o) {}

  // params[i] -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * params[i])
  void step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads, double lr);
  long steps() const { return t_; }

 private:
  Options opt_;
  long t_ = 0;
  std::vector<Tensor> m_, v_;
};

// lr * (1 + cos(pi * step / total)) / 2 for step in [0, total).
double cosine_lr(double base, std::size_t step, std::size_t total);

// Row weights of the next-token loss on one record; row i predicts token i+1.
// full_concat covers every token after the first; completion_only starts at
// the first completion token. Weights sum to 1 (per-token mean).
std::vector<double> sft_row_weights(std::size_t prompt_len, std::size_t seq_len, LossRegion region);

struct TrainStep {
  std::size_t step = 0;
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;  // mean per-token loss over the batch
};

struct SftResult {
  ModelState model;
  std::vector<TrainStep> steps;
  std::vector<double> epoch_loss;  // per-epoch mean of step losses
};

// LoRA-only fine-tuning with the next-token loss. Attaches fresh adapters
// (B = 0) when the model has none; base weights are never written.
SftResult sft(ModelState model, const std::vector<CorpusRecord>& corpus, const TrainConfig& cfg);

// Per-token loss of one record under the model (no dropout).
double record_loss(const ModelState& model, const CorpusRecord& rec, LossRegion region);

// CSV: step,epoch,lr,loss
void write_loss_curve(const std::string& path, const std::vector<TrainStep>& steps);

// ---- toy base pretraining --------------------------------------------------

struct PretrainConfig {
  int max_steps = 6000;
  double lr = 3e-3;
  int warmup = 100;
  int batch_size = 8;
  int eval_every = 100;
  double band_lo = 0.30;
  double band_hi = 0.70;
  std::uint64_t seed = 42;
  std::uint64_t init_seed = 7;
  LossRegion region = LossRegion::FullConcat;
};

struct PretrainLogEntry {
  int step = 0;
  double loss = 0.0;
  double accuracy = -1.0;  // -1 when not evaluated at this step
};

struct PretrainResult {
  ModelState model;
  bool in_band = false;
  double accuracy = 0.0;
  int steps = 0;
  std::vector<PretrainLogEntry> log;
};

// Full-parameter Adam on the pool. Every eval_every steps the band set is
// decoded greedily; training stops once accuracy lands in [band_lo, band_hi].
// An overshoot restores the last snapshot and halves the learning rate.
PretrainResult pretrain(const ModelConfig& mcfg, const PretrainConfig& cfg,
                        const std::vector<Example>& pool, const std::vector<Example>& band_eval);

// ---- evaluation --------------------------------------------------------------

// Mean over answer tokens of -log p(z_t | z_<t), pooled across examples.
double eval_nll(const ModelState& model, const std::vector<Example>& examples,
                const KvHooks* hooks = nullptr);

struct Verdict {
  std::size_t index = 0;
  TaskKind kind = TaskKind::Math;
  std::string prompt;
  std::string completion;
  std::string gold;
  bool correct = false;
};

struct AccuracyReport {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy = 0.0;
  std::vector<Verdict> verdicts;
};

// Greedy decode per prompt, scored with eval_correct.
AccuracyReport eval_accuracy(const ModelState& model, const std::vector<Example>& examples,
                             int max_new_tokens = 64);
AccuracyReport score_completions(const std::vector<Example>& examples,
                                 const std::vector<std::string>& completions);

// Line-delimited JSON: {"index","kind","prompt","completion","gold","correct"}
void write_verdicts(const std::string& path, const AccuracyReport& r);
AccuracyReport read_verdicts(const std::string& path);

}  // namespace spd
