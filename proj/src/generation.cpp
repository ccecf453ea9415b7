#include "spd/generation.hpp"

#include <cstdio>
#include <fstream>

#include "json.hpp"

namespace spd {

std::string to_string(GeneratorTag g) {
  switch (g) {
    case GeneratorTag::Base: return "base";
    case GeneratorTag::Hooked: return "hooked";
    case GeneratorTag::Truncated: return "truncated";
  }
  return "?";
}

GeneratorTag parse_generator_tag(const std::string& s) {
  if (s == "base") return GeneratorTag::Base;
  if (s == "hooked") return GeneratorTag::Hooked;
  if (s == "truncated") return GeneratorTag::Truncated;
  throw Error("unknown generator tag '" + s + "'");
}

SamplingConfig default_generation_sampling(std::uint64_t seed) {
  SamplingConfig cfg;
  cfg.stop_tokens = {Tokenizer::eos()};
  cfg.seed = seed;
  return cfg;
}

std::vector<CorpusRecord> generate_corpus(const ModelState& model,
                                          const std::vector<std::string>& prompts,
                                          const Projection& projection, const SamplingConfig& cfg) {
  cfg.validate();
  KvHooks hooks;
  std::optional<std::uint64_t> bundle_sum;
  if (projection.bundle) {
    projection.bundle->check_model(model);
    hooks = projection.bundle->hooks(projection.mode);
    bundle_sum = projection.bundle->checksum();
  }
  const KvHooks* hp = projection.bundle ? &hooks : nullptr;

  std::vector<CorpusRecord> out;
  out.reserve(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    CorpusRecord rec;
    rec.prompt = prompts[i];
    rec.seed = cfg.seed + i;
    rec.generator = hp ? GeneratorTag::Hooked : GeneratorTag::Base;
    rec.bundle_checksum = bundle_sum;
    Rng rng(rec.seed);
    const TokenSeq prompt = Tokenizer::encode(prompts[i]);
    rec.completion = Tokenizer::decode(decode(model, prompt, hp, rng, cfg));
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<CorpusRecord> generate_corpus(const ModelState& model,
                                          const std::vector<Example>& prompts,
                                          const Projection& projection, const SamplingConfig& cfg) {
  std::vector<std::string> p;
  p.reserve(prompts.size());
  for (const auto& e : prompts) p.push_back(e.prompt);
  return generate_corpus(model, p, projection, cfg);
}

std::vector<CorpusRecord> truncate_ssd(const std::vector<CorpusRecord>& records,
                                       const TruncationPolicy& policy) {
  if (!(policy.fraction > 0.0 && policy.fraction <= 1.0))
    throw Error("truncation fraction must lie in (0, 1]");
  const auto keep = static_cast<std::size_t>(policy.fraction * policy.max_new_tokens);
  std::vector<CorpusRecord> out = records;
  for (auto& r : out) {
    const auto stop = r.completion.find(policy.stop_marker);
    if (stop != std::string::npos)
      r.completion.resize(stop + 1);
    else if (r.completion.size() > keep)
      r.completion.resize(keep);
    r.generator = GeneratorTag::Truncated;
  }
  return out;
}

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

void write_corpus(const std::string& path, const std::vector<CorpusRecord>& records,
                  const SamplingConfig& sampling) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write corpus " + path);
  const std::string desc = sampling.describe();
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["prompt"] = r.prompt;
    j["completion"] = r.completion;
    j["generator"] = to_string(r.generator);
    j["seed"] = r.seed;
    j["bundle_checksum"] = r.bundle_checksum ? nlohmann::ordered_json(hex64(*r.bundle_checksum))
                                             : nlohmann::ordered_json(nullptr);
    j["sampling"] = desc;
    os << j.dump() << '\n';
  }
  if (!os) throw Error("write failed for corpus " + path);
}

std::vector<CorpusRecord> read_corpus(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read corpus " + path);
  std::vector<CorpusRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      CorpusRecord r;
      r.prompt = j.at("prompt").get<std::string>();
      r.completion = j.at("completion").get<std::string>();
      r.generator = parse_generator_tag(j.at("generator").get<std::string>());
      r.seed = j.at("seed").get<std::uint64_t>();
      if (j.contains("bundle_checksum") && !j["bundle_checksum"].is_null())
        r.bundle_checksum = std::stoull(j["bundle_checksum"].get<std::string>(), nullptr, 16);
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw Error("corpus " + path + " line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace spd
