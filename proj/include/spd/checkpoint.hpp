#pragma once

#include <string>

#include "spd/model.hpp"

namespace spd {

// Checkpoint container, little-endian:
//   "SPDCKPT\0" | u32 version
//   u32 n_layers, d_model, n_heads, head_dim, vocab_size, max_seq_len, mlp_hidden
//   u32 positional kind (0 = learned absolute)
//   u64 base double count, then base tensors in declaration order as f64
//   u8 has_adapters; if set: "SPDLORA\0" u32 rank, f64 alpha, f64 dropout,
//     then per layer, per Q/K/V/O: A then B as f64
//   u64 FNV-1a of all preceding bytes
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const ModelState& model);
ModelState load_checkpoint(const std::string& path);

// Adapters alone, same section layout preceded by "SPDADPT\0", version and the
// base checksum they were trained against.
void save_adapters(const std::string& path, const ModelState& model);
void load_adapters(const std::string& path, ModelState& model);

}  // namespace spd
