#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "spd/calibration.hpp"
#include "spd/model.hpp"

namespace spd {

class RankError : public Error {
 public:
  using Error::Error;
};

// Rule resolving the truncation rank r from the activation width d.
struct RankMode {
  enum class Kind { HalfFull, Fixed, Energy };
  Kind kind = Kind::HalfFull;
  int fixed = 0;
  double energy = 0.0;

  static RankMode half_full() { return {}; }
  static RankMode fixed_rank(int k) { return {Kind::Fixed, k, 0.0}; }
  static RankMode energy_fraction(double tau) { return {Kind::Energy, 0, tau}; }
  // "half_full", "fixed:<k>", "energy:<tau>"
  static RankMode parse(const std::string& s);
  std::string str() const;

  // Throws RankError when the resolved r is <= 0 or > min(M, d).
  int resolve(std::size_t d, std::span<const double> singular_values, std::size_t rows) const;
};

enum class ProjectMode { K, V, Both };
std::string to_string(ProjectMode m);
ProjectMode parse_project_mode(const std::string& s);

struct ProjectorDiagnostics {
  std::vector<double> singular_values;  // full spectrum, non-increasing
  int rank = 0;
  double energy = 0.0;  // sum_{i<=r} s_i^2 / sum s_i^2
  double gap = 0.0;     // s_r - s_{r+1} (s_r when r is the full spectrum)
  std::size_t rows = 0;
};

struct Projector {
  int layer = 0;  // 1-based
  KvKind kind = KvKind::K;
  int rank = 0;
  Tensor p;                        // [d, d] = V_r V_r^T
  std::vector<double> top_sigma;   // s_1..s_r
  double energy = 0.0;
  double gap = 0.0;
  std::vector<double> spectrum;    // in-memory only

  std::size_t dim() const { return p.rows(); }
};

// SVD of the stacked gradients, top-r right-singular vectors, P = V_r V_r^T.
Projector build_projector(const Tensor& rows, const RankMode& mode, ProjectorDiagnostics* diag = nullptr);
Projector build_projector(const GradientMatrix& g, const RankMode& mode,
                          ProjectorDiagnostics* diag = nullptr);

struct BundleMeta {
  std::uint64_t model_checksum = 0;
  ModelConfig config;
  std::uint64_t calibration_seed = 0;
  LossMode loss_mode = LossMode::Aligned;
  std::string rank_mode = "half_full";
  std::int64_t created_unix = 0;
};

struct ProjectionBundle {
  BundleMeta meta;
  std::vector<Projector> projectors;

  const Projector* find(int layer, KvKind kind) const;
  std::vector<int> layers() const;
  KvHooks hooks(ProjectMode mode) const;
  // Rejects a model whose parameters or shape differ from the harvest's.
  void check_model(const ModelState& model) const;
  // Content checksum: every byte of the serialized form except the timestamp.
  std::uint64_t checksum() const;
};

// One projector per (layer, kind) for the requested layers; throws
// CalibrationError when the harvest lacks an entry.
ProjectionBundle extract_all(const HarvestResult& grads, const std::vector<int>& layers,
                             const RankMode& mode, BundleMeta meta);

// Bundle container, little-endian:
//   "SPDBNDL\0" u32 version | u64 model checksum
//   u32 n_layers, d_model, n_heads, head_dim, vocab_size, max_seq_len, mlp_hidden
//   u64 calibration seed | u8 loss mode | str rank mode | i64 created (unix s)
//   u32 count, then per projector:
//     u32 layer | u8 kind (0=K,1=V) | u32 d | u32 r | f64 energy | f64 gap
//     f64 x r singular values | f64 x d*d projector, row-major
//   u64 FNV-1a of all preceding bytes
inline constexpr std::uint32_t kBundleVersion = 1;
void save_bundle(const std::string& path, const ProjectionBundle& b);
// When expect is given, a model checksum mismatch raises BundleError.
ProjectionBundle load_bundle(const std::string& path, const ModelState* expect = nullptr);
// Plain-text summary with per-projector rank, energy fraction and gap.
std::string diagnostics_text(const ProjectionBundle& b);

}  // namespace spd
