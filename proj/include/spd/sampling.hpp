#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace spd {

using Rng = std::mt19937_64;

enum class SamplingStrategy { Greedy, Ancestral };

struct SamplingConfig {
  SamplingStrategy strategy = SamplingStrategy::Ancestral;
  double temperature = 1.0;
  int max_new_tokens = 64;
  std::vector<int> stop_tokens;  // decoding stops after emitting one of these
  std::uint64_t seed = 42;

  static SamplingConfig greedy(int max_new_tokens, std::vector<int> stop_tokens);
  void validate() const;
  std::string describe() const;
};

std::string to_string(SamplingStrategy s);
SamplingStrategy parse_sampling_strategy(const std::string& s);

// Greedy takes the first maximal logit; ancestral draws from softmax(logits / T).
int sample_token(std::span<const double> logits, const SamplingConfig& cfg, Rng& rng);

}  // namespace spd
