#include "spd/checkpoint.hpp"

#include <fstream>
#include <iterator>

#include "spd/binio.hpp"

namespace spd {

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write to '" + path + "' failed");
}

namespace {

std::uint64_t fnv_bytes(const std::uint8_t* p, std::size_t n) {
  return fnv1a(std::as_bytes(std::span(p, n)));
}

}  // namespace

void write_sealed(const std::string& path, ByteWriter& w) {
  const auto& b = w.buffer();
  w.u64(fnv_bytes(b.data(), b.size()));
  write_file_bytes(path, w.buffer());
}

std::vector<std::uint8_t> read_sealed(const std::string& path, const std::string& what) {
  auto bytes = read_file_bytes(path);
  if (bytes.size() < 8) throw FormatError(what + ": file too short");
  const std::size_t body = bytes.size() - 8;
  std::uint64_t stored = 0;
  for (std::size_t i = 0; i < 8; ++i) stored |= static_cast<std::uint64_t>(bytes[body + i]) << (8 * i);
  if (stored != fnv_bytes(bytes.data(), body)) throw FormatError(what + ": checksum mismatch");
  bytes.resize(body);
  return bytes;
}

std::uint64_t file_checksum(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  return fnv_bytes(bytes.data(), bytes.size());
}

namespace {

constexpr char kCkptTag[9] = "SPDCKPT";
constexpr char kLoraTag[9] = "SPDLORA";
constexpr char kAdptTag[9] = "SPDADPT";

void write_lora(ByteWriter& w, const LoraAdapters& ad) {
  w.tag(kLoraTag);
  w.u32(static_cast<std::uint32_t>(ad.rank));
  w.f64(ad.alpha);
  w.f64(ad.dropout);
  ad.for_each_param([&](const Tensor& t) { w.f64s(t.data()); });
}

LoraAdapters read_lora(ByteReader& r, const ModelConfig& cfg) {
  r.expect_tag(kLoraTag, "adapters");
  const int rank = static_cast<int>(r.u32());
  const double alpha = r.f64();
  const double dropout = r.f64();
  LoraAdapters ad = LoraAdapters::attach(cfg, rank, alpha, dropout, 0);
  ad.for_each_param([&](Tensor& t) { r.f64s(t.data()); });
  return ad;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelState& model) {
  ByteWriter w;
  w.tag(kCkptTag);
  w.u32(kCheckpointVersion);
  const ModelConfig& c = model.config;
  for (int v : {c.n_layers, c.d_model, c.n_heads, c.head_dim, c.vocab_size, c.max_seq_len,
                c.mlp_hidden})
    w.u32(static_cast<std::uint32_t>(v));
  w.u32(0);  // learned absolute positions
  w.u64(model.base_param_count());
  model.for_each_base_param([&](const Tensor& t) { w.f64s(t.data()); });
  w.u8(model.lora ? 1 : 0);
  if (model.lora) write_lora(w, *model.lora);
  write_sealed(path, w);
}

ModelState load_checkpoint(const std::string& path) {
  const auto bytes = read_sealed(path, "checkpoint");
  ByteReader r(bytes);
  r.expect_tag(kCkptTag, "checkpoint");
  if (r.u32() != kCheckpointVersion) throw FormatError("checkpoint: unsupported version");
  ModelConfig c;
  c.n_layers = static_cast<int>(r.u32());
  c.d_model = static_cast<int>(r.u32());
  c.n_heads = static_cast<int>(r.u32());
  c.head_dim = static_cast<int>(r.u32());
  c.vocab_size = static_cast<int>(r.u32());
  c.max_seq_len = static_cast<int>(r.u32());
  c.mlp_hidden = static_cast<int>(r.u32());
  if (r.u32() != 0) throw FormatError("checkpoint: unsupported positional encoding");
  ModelState m = ModelState::init(c, 0);
  if (r.u64() != m.base_param_count()) throw FormatError("checkpoint: parameter count mismatch");
  m.for_each_base_param([&](Tensor& t) { r.f64s(t.data()); });
  if (r.u8()) m.lora = read_lora(r, c);
  if (!r.at_end()) throw FormatError("checkpoint: trailing bytes");
  if (!m.all_finite()) throw FormatError("checkpoint: non-finite parameters");
  return m;
}

void save_adapters(const std::string& path, const ModelState& model) {
  if (!model.lora) throw Error("save_adapters: model has no adapters");
  ByteWriter w;
  w.tag(kAdptTag);
  w.u32(kCheckpointVersion);
  w.u64(model.base_checksum());
  write_lora(w, *model.lora);
  write_sealed(path, w);
}

void load_adapters(const std::string& path, ModelState& model) {
  const auto bytes = read_sealed(path, "adapters");
  ByteReader r(bytes);
  r.expect_tag(kAdptTag, "adapters");
  if (r.u32() != kCheckpointVersion) throw FormatError("adapters: unsupported version");
  if (r.u64() != model.base_checksum())
    throw FormatError("adapters were trained against a different base model");
  model.lora = read_lora(r, model.config);
  if (!r.at_end()) throw FormatError("adapters: trailing bytes");
}

}  // namespace spd
