#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "spd/sampling.hpp"
#include "spd/subspace.hpp"
#include "spd/taskgen.hpp"

namespace spd {

enum class GeneratorTag { Base, Hooked, Truncated };
std::string to_string(GeneratorTag g);
GeneratorTag parse_generator_tag(const std::string& s);

struct CorpusRecord {
  std::string prompt;
  std::string completion;  // may be empty on an immediate stop
  GeneratorTag generator = GeneratorTag::Base;
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> bundle_checksum;  // set for hooked records

  std::string text() const { return prompt + completion; }
  friend bool operator==(const CorpusRecord&, const CorpusRecord&) = default;
};

// Stop markers for generation: the end-of-answer sentinel of every task.
SamplingConfig default_generation_sampling(std::uint64_t seed);

struct Projection {
  const ProjectionBundle* bundle = nullptr;
  ProjectMode mode = ProjectMode::Both;
};

// One completion per prompt, in order. Record i decodes with its own generator
// seeded with cfg.seed + i. The bundle is checked against the model before any
// decoding; hooks live only for the duration of this call.
std::vector<CorpusRecord> generate_corpus(const ModelState& model,
                                          const std::vector<std::string>& prompts,
                                          const Projection& projection, const SamplingConfig& cfg);
std::vector<CorpusRecord> generate_corpus(const ModelState& model,
                                          const std::vector<Example>& prompts,
                                          const Projection& projection, const SamplingConfig& cfg);

struct TruncationPolicy {
  double fraction = 0.5;
  int max_new_tokens = 64;
  char stop_marker = Tokenizer::kEos;
};

// Approximation of truncation-based self-distillation decoding: cut each
// completion just after its first stop marker, or, when it has none, keep
// floor(fraction * max_new_tokens) tokens. Idempotent.
std::vector<CorpusRecord> truncate_ssd(const std::vector<CorpusRecord>& records,
                                       const TruncationPolicy& policy);

// Line-delimited JSON, one record per line:
//   {"prompt","completion","generator","seed","bundle_checksum","sampling"}
// bundle_checksum is a 16-digit hex string or null.
void write_corpus(const std::string& path, const std::vector<CorpusRecord>& records,
                  const SamplingConfig& sampling);
std::vector<CorpusRecord> read_corpus(const std::string& path);

}  // namespace spd
