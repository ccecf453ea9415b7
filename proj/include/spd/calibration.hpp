#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "spd/model.hpp"
#include "spd/taskgen.hpp"

namespace spd {

class CalibrationError : public Error {
 public:
  using Error::Error;
};

enum class LossMode { Aligned, FullSequence };
std::string to_string(LossMode m);
LossMode parse_loss_mode(const std::string& s);

struct AlignedLossSpec {
  LossMode mode = LossMode::Aligned;
  SpanSet spans;
};

// Weight on each logits row (row i predicts token i+1).
//   aligned:       1/|S| on rows t-1 for t in S, 0 elsewhere
//   full_sequence: 1/(T-1) on every row that predicts a token
std::vector<double> loss_row_weights(std::size_t seq_len, const AlignedLossSpec& spec);

// -(1/|S|) sum_{t in S} log p(z_t | z_<t), or the full-sequence mean. Rows
// outside the mask are never read.
ad::Var aligned_loss(ad::Tape& tape, ad::Var logits, std::span<const TokenId> tokens,
                     const AlignedLossSpec& spec);
double aligned_loss(const Tensor& logits, std::span<const TokenId> tokens,
                    const AlignedLossSpec& spec);
double aligned_loss(const ModelState& model, const Example& ex, const AlignedLossSpec& spec);

// Row-stacked token-level gradients for one (layer, kind).
struct GradientMatrix {
  int layer = 0;  // 1-based
  KvKind kind = KvKind::K;
  Tensor rows;    // [M', d]
  std::size_t total_rows = 0;    // M before dropping
  std::size_t dropped_rows = 0;  // rows with norm below the threshold
  std::vector<std::pair<std::size_t, std::size_t>> origin;  // (example, token) per kept row
};

using GradKey = std::pair<int, KvKind>;
using HarvestResult = std::map<GradKey, GradientMatrix>;

struct HarvestOptions {
  std::vector<int> layers;  // 1-based target layers
  LossMode mode = LossMode::Aligned;
  double drop_threshold = 1e-12;
  bool drop_small_rows = true;
};

struct HarvestLog {
  std::vector<std::string> lines;
  std::size_t examples_used = 0;
  std::size_t examples_rejected = 0;
};

// One forward/backward per example on the frozen model with taps on K and V at
// every target layer. Rows are appended in (example, token) order.
HarvestResult harvest(const ModelState& model, const std::vector<Example>& calibration,
                      const HarvestOptions& opts, HarvestLog* log = nullptr);

// Debug dump: "SPDGRAD\0" u32 version, u32 layer, u8 kind, u64 M, u64 d, then
// M*d f64 row-major, then the FNV-1a trailer.
void write_gradient_dump(const std::string& path, const GradientMatrix& g);
GradientMatrix read_gradient_dump(const std::string& path);

}  // namespace spd
