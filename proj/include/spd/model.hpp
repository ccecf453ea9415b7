#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "spd/autodiff.hpp"
#include "spd/sampling.hpp"
#include "spd/tensor.hpp"

namespace spd {

using TokenId = int;
using TokenSeq = std::vector<TokenId>;

class LengthError : public Error {
 public:
  using Error::Error;
};

// Projection bundle does not fit the model it is applied to.
class BundleError : public Error {
 public:
  using Error::Error;
};

enum class KvKind { K, V };
std::string to_string(KvKind k);
KvKind parse_kv_kind(const std::string& s);

struct ModelConfig {
  int n_layers = 4;
  int d_model = 64;
  int n_heads = 4;
  int head_dim = 16;
  int vocab_size = 58;
  int max_seq_len = 128;
  int mlp_hidden = 256;

  // d_k = d_v = n_heads * head_dim (all heads concatenated)
  int kv_dim() const { return n_heads * head_dim; }
  void validate() const;
  // {L, floor(L/2)}, 1-based, deduplicated, descending.
  std::vector<int> last_mid_layers() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerParams {
  Tensor ln1_g, ln1_b;
  Tensor wq, wk, wv, wo;  // [d_in, d_out], applied as x * W
  Tensor ln2_g, ln2_b;
  Tensor w1, b1, w2, b2;
};

enum class LoraTarget { Q = 0, K = 1, V = 2, O = 3 };
inline constexpr std::array<LoraTarget, 4> kLoraTargets = {LoraTarget::Q, LoraTarget::K,
                                                          LoraTarget::V, LoraTarget::O};

// Adapted weight (out x in) = W^T + scale * B * A. In the row-vector convention
// used here that is y = x * W + scale * (x * A^T) * B^T.
struct LoraPair {
  Tensor a;  // [r, d_in], small random
  Tensor b;  // [d_out, r], zero at attach time
};

struct LoraAdapters {
  int rank = 8;
  double alpha = 8.0;
  double dropout = 0.05;
  std::vector<std::array<LoraPair, 4>> layers;

  double scale() const { return alpha / static_cast<double>(rank); }
  LoraPair& at(int layer0, LoraTarget t) { return layers.at(layer0)[static_cast<int>(t)]; }
  const LoraPair& at(int layer0, LoraTarget t) const {
    return layers.at(layer0)[static_cast<int>(t)];
  }

  static LoraAdapters attach(const ModelConfig& cfg, int rank, double alpha, double dropout,
                             std::uint64_t seed);

  template <class F>
  void for_each_param(F&& f) {
    for (auto& l : layers)
      for (auto& p : l) {
        f(p.a);
        f(p.b);
      }
  }
  template <class F>
  void for_each_param(F&& f) const {
    for (const auto& l : layers)
      for (const auto& p : l) {
        f(p.a);
        f(p.b);
      }
  }
};

struct ModelState {
  ModelConfig config;
  Tensor tok_emb;  // [vocab, d_model]
  Tensor pos_emb;  // [max_seq_len, d_model], learned absolute
  std::vector<LayerParams> layers;
  Tensor lnf_g, lnf_b;
  Tensor w_out;  // [d_model, vocab]
  std::optional<LoraAdapters> lora;

  static ModelState init(const ModelConfig& cfg, std::uint64_t seed);

  // Base parameters in declaration order (the checkpoint order).
  template <class F>
  void for_each_base_param(F&& f) {
    f(tok_emb);
    f(pos_emb);
    for (auto& l : layers) {
      for (Tensor* t : {&l.ln1_g, &l.ln1_b, &l.wq, &l.wk, &l.wv, &l.wo, &l.ln2_g, &l.ln2_b, &l.w1,
                        &l.b1, &l.w2, &l.b2})
        f(*t);
    }
    f(lnf_g);
    f(lnf_b);
    f(w_out);
  }
  template <class F>
  void for_each_base_param(F&& f) const {
    const_cast<ModelState*>(this)->for_each_base_param(
        [&](Tensor& t) { f(static_cast<const Tensor&>(t)); });
  }

  std::uint64_t base_checksum() const;
  std::uint64_t lora_checksum() const;  // 0 when no adapters
  std::size_t base_param_count() const;
  bool all_finite() const;
};

// Per-layer K/V projectors applied at decode time. Layers are 1-based.
struct KvHooks {
  std::map<int, Tensor> k;
  std::map<int, Tensor> v;

  bool empty() const { return k.empty() && v.empty(); }
  const Tensor* find(int layer, KvKind kind) const;
  void validate(const ModelConfig& cfg) const;
};

struct TapSpec {
  int layer;  // 1-based
  KvKind kind;
  friend bool operator==(const TapSpec&, const TapSpec&) = default;
};

struct ForwardOptions {
  bool train_base = false;
  bool train_lora = false;
  const KvHooks* hooks = nullptr;
  // Register gradient taps on the pre-attention K/V activation (after Wk/Wv,
  // before any hook), all heads concatenated.
  std::vector<TapSpec> taps;
  // Additive perturbation of K/V activations, keyed by (layer, kind). Used by
  // the finite-difference oracles.
  std::map<std::pair<int, KvKind>, Tensor> kv_delta;
  // LoRA dropout during training; ignored when rng is null.
  Rng* dropout_rng = nullptr;
};

struct ForwardOutput {
  ad::Var logits;                                       // [T, vocab]
  std::vector<std::pair<TapSpec, std::size_t>> taps;    // spec -> tape tap index
};

// Full-sequence forward on a tape. Causal: logits row t only sees tokens <= t.
ForwardOutput forward(ad::Tape& tape, const ModelState& model, std::span<const TokenId> tokens,
                      const ForwardOptions& opts = {});

// Gradient-free convenience wrapper.
Tensor forward_logits(const ModelState& model, std::span<const TokenId> tokens,
                      const KvHooks* hooks = nullptr);

// Stored (possibly projected) key/value rows per layer.
struct KvCache {
  struct Layer {
    std::vector<double> keys;    // row-major [t, d_k]
    std::vector<double> values;  // row-major [t, d_v]
  };
  std::vector<Layer> layers;
  std::size_t length = 0;
  int kv_dim = 0;
  bool projected = false;

  static KvCache make(const ModelConfig& cfg);
  Tensor keys(int layer1) const;
  Tensor values(int layer1) const;
};

// Consume one token and return the next-token logits.
std::vector<double> step_logits(const ModelState& model, KvCache& cache, TokenId token,
                                const KvHooks* hooks);

TokenId decode_step(const ModelState& model, KvCache& cache, TokenId token, const KvHooks* hooks,
                    Rng& rng, const SamplingConfig& sampling);

// Decode one completion: prefill the prompt (hooked if hooks are given), then
// sample until a stop token or max_new_tokens. Returned tokens include the stop
// token when one was emitted.
TokenSeq decode(const ModelState& model, std::span<const TokenId> prompt, const KvHooks* hooks,
                Rng& rng, const SamplingConfig& sampling);

// Reference decoder that recomputes the whole sequence every step.
TokenSeq decode_recompute(const ModelState& model, std::span<const TokenId> prompt,
                          const KvHooks* hooks, Rng& rng, const SamplingConfig& sampling);

// max |logits(model without adapters) - logits(model)| over the probe.
double lora_parity(const ModelState& model, std::span<const TokenId> probe);

}  // namespace spd
