#include "spd/subspace.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include "spd/binio.hpp"
#include "spd/svd.hpp"

namespace spd {

RankMode RankMode::parse(const std::string& s) {
  if (s == "half_full") return half_full();
  try {
    if (s.rfind("fixed:", 0) == 0) return fixed_rank(std::stoi(s.substr(6)));
    if (s.rfind("energy:", 0) == 0) {
      const double tau = std::stod(s.substr(7));
      if (!(tau > 0.0 && tau <= 1.0)) throw RankError("energy fraction must lie in (0, 1]");
      return energy_fraction(tau);
    }
  } catch (const std::invalid_argument&) {
  } catch (const std::out_of_range&) {
  }
  throw RankError("unknown rank mode '" + s + "' (expected half_full, fixed:<k>, energy:<tau>)");
}

std::string RankMode::str() const {
  switch (kind) {
    case Kind::HalfFull: return "half_full";
    case Kind::Fixed: return "fixed:" + std::to_string(fixed);
    case Kind::Energy: {
      std::ostringstream os;
      os << "energy:" << energy;
      return os.str();
    }
  }
  return "?";
}

int RankMode::resolve(std::size_t d, std::span<const double> sv, std::size_t rows) const {
  int r = 0;
  switch (kind) {
    case Kind::HalfFull: r = static_cast<int>(d / 2); break;
    case Kind::Fixed: r = fixed; break;
    case Kind::Energy: {
      double total = 0.0;
      for (double s : sv) total += s * s;
      if (total == 0.0) throw RankError("energy rank on an all-zero gradient matrix");
      double acc = 0.0;
      for (std::size_t i = 0; i < sv.size(); ++i) {
        acc += sv[i] * sv[i];
        if (acc / total >= energy * (1.0 - 1e-12)) {
          r = static_cast<int>(i + 1);
          break;
        }
      }
      if (r == 0) r = static_cast<int>(sv.size());
      break;
    }
  }
  const std::size_t cap = std::min(rows, d);
  if (r <= 0 || static_cast<std::size_t>(r) > cap)
    throw RankError("rank " + std::to_string(r) + " outside [1, min(M, d)] = [1, " +
                    std::to_string(cap) + "]");
  return r;
}

std::string to_string(ProjectMode m) {
  switch (m) {
    case ProjectMode::K: return "K";
    case ProjectMode::V: return "V";
    case ProjectMode::Both: return "both";
  }
  return "?";
}

ProjectMode parse_project_mode(const std::string& s) {
  if (s == "K" || s == "k") return ProjectMode::K;
  if (s == "V" || s == "v") return ProjectMode::V;
  if (s == "both") return ProjectMode::Both;
  throw Error("unknown project mode '" + s + "'");
}

Projector build_projector(const Tensor& rows, const RankMode& mode, ProjectorDiagnostics* diag) {
  if (rows.rows() < 1) throw RankError("build_projector: gradient matrix has no rows");
  const std::size_t d = rows.cols();
  const linalg::Svd s = linalg::svd(rows);
  const int r = mode.resolve(d, s.s, rows.rows());

  Projector p;
  p.rank = r;
  p.spectrum = s.s;
  p.top_sigma.assign(s.s.begin(), s.s.begin() + r);
  const Tensor vr = linalg::top_right_vectors(s, static_cast<std::size_t>(r));
  p.p = kernels::matmul(vr, vr, false, true);
  // exact symmetry; the two triangles differ only by summation rounding
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i + 1; j < d; ++j) {
      const double avg = 0.5 * (p.p(i, j) + p.p(j, i));
      p.p(i, j) = avg;
      p.p(j, i) = avg;
    }
  double total = 0.0, kept = 0.0;
  for (std::size_t i = 0; i < s.s.size(); ++i) {
    total += s.s[i] * s.s[i];
    if (i < static_cast<std::size_t>(r)) kept += s.s[i] * s.s[i];
  }
  p.energy = total > 0.0 ? kept / total : 0.0;
  const auto ru = static_cast<std::size_t>(r);
  p.gap = ru < s.s.size() ? s.s[ru - 1] - s.s[ru] : s.s[ru - 1];
  if (diag) {
    diag->singular_values = s.s;
    diag->rank = r;
    diag->energy = p.energy;
    diag->gap = p.gap;
    diag->rows = rows.rows();
  }
  return p;
}

Projector build_projector(const GradientMatrix& g, const RankMode& mode, ProjectorDiagnostics* diag) {
  Projector p = build_projector(g.rows, mode, diag);
  p.layer = g.layer;
  p.kind = g.kind;
  return p;
}

const Projector* ProjectionBundle::find(int layer, KvKind kind) const {
  for (const auto& p : projectors)
    if (p.layer == layer && p.kind == kind) return &p;
  return nullptr;
}

std::vector<int> ProjectionBundle::layers() const {
  std::vector<int> out;
  for (const auto& p : projectors)
    if (std::find(out.begin(), out.end(), p.layer) == out.end()) out.push_back(p.layer);
  return out;
}

KvHooks ProjectionBundle::hooks(ProjectMode mode) const {
  KvHooks h;
  for (const auto& p : projectors) {
    if (p.kind == KvKind::K && mode != ProjectMode::V) h.k[p.layer] = p.p;
    if (p.kind == KvKind::V && mode != ProjectMode::K) h.v[p.layer] = p.p;
  }
  return h;
}

void ProjectionBundle::check_model(const ModelState& model) const {
  if (!(meta.config == model.config))
    throw BundleError("bundle was extracted for a different model configuration");
  if (meta.model_checksum != model.base_checksum())
    throw BundleError("bundle provenance checksum does not match the model");
  hooks(ProjectMode::Both).validate(model.config);
}

ProjectionBundle extract_all(const HarvestResult& grads, const std::vector<int>& layers,
                             const RankMode& mode, BundleMeta meta) {
  ProjectionBundle b;
  b.meta = std::move(meta);
  b.meta.rank_mode = mode.str();
  for (int layer : layers) {
    for (KvKind kind : {KvKind::K, KvKind::V}) {
      auto it = grads.find({layer, kind});
      if (it == grads.end())
        throw CalibrationError("incomplete harvest: no gradients for layer " +
                               std::to_string(layer) + " " + to_string(kind));
      b.projectors.push_back(build_projector(it->second, mode));
    }
  }
  return b;
}

namespace {

constexpr char kBundleTag[9] = "SPDBNDL";

void write_bundle(ByteWriter& w, const ProjectionBundle& b, bool with_timestamp) {
  w.tag(kBundleTag);
  w.u32(kBundleVersion);
  w.u64(b.meta.model_checksum);
  const ModelConfig& c = b.meta.config;
  for (int v : {c.n_layers, c.d_model, c.n_heads, c.head_dim, c.vocab_size, c.max_seq_len,
                c.mlp_hidden})
    w.u32(static_cast<std::uint32_t>(v));
  w.u64(b.meta.calibration_seed);
  w.u8(b.meta.loss_mode == LossMode::Aligned ? 0 : 1);
  w.str(b.meta.rank_mode);
  w.i64(with_timestamp ? b.meta.created_unix : 0);
  w.u32(static_cast<std::uint32_t>(b.projectors.size()));
  for (const auto& p : b.projectors) {
    w.u32(static_cast<std::uint32_t>(p.layer));
    w.u8(p.kind == KvKind::K ? 0 : 1);
    w.u32(static_cast<std::uint32_t>(p.dim()));
    w.u32(static_cast<std::uint32_t>(p.rank));
    w.f64(p.energy);
    w.f64(p.gap);
    w.f64s(p.top_sigma);
    w.f64s(p.p.data());
  }
}

}  // namespace

std::uint64_t ProjectionBundle::checksum() const {
  ByteWriter w;
  write_bundle(w, *this, false);
  return fnv1a(std::as_bytes(std::span(w.buffer())));
}

void save_bundle(const std::string& path, const ProjectionBundle& b) {
  ByteWriter w;
  write_bundle(w, b, true);
  write_sealed(path, w);
}

ProjectionBundle load_bundle(const std::string& path, const ModelState* expect) {
  const auto bytes = read_sealed(path, "bundle");
  ByteReader r(bytes);
  r.expect_tag(kBundleTag, "bundle");
  if (r.u32() != kBundleVersion) throw FormatError("bundle: unsupported version");
  ProjectionBundle b;
  b.meta.model_checksum = r.u64();
  ModelConfig& c = b.meta.config;
  for (int* v : {&c.n_layers, &c.d_model, &c.n_heads, &c.head_dim, &c.vocab_size, &c.max_seq_len,
                 &c.mlp_hidden})
    *v = static_cast<int>(r.u32());
  b.meta.calibration_seed = r.u64();
  b.meta.loss_mode = r.u8() == 0 ? LossMode::Aligned : LossMode::FullSequence;
  b.meta.rank_mode = r.str();
  b.meta.created_unix = r.i64();
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    Projector p;
    p.layer = static_cast<int>(r.u32());
    p.kind = r.u8() == 0 ? KvKind::K : KvKind::V;
    const std::size_t d = r.u32();
    p.rank = static_cast<int>(r.u32());
    p.energy = r.f64();
    p.gap = r.f64();
    p.top_sigma.resize(static_cast<std::size_t>(p.rank));
    r.f64s(p.top_sigma);
    p.p = Tensor({d, d});
    r.f64s(p.p.data());
    b.projectors.push_back(std::move(p));
  }
  if (!r.at_end()) throw FormatError("bundle: trailing bytes");
  if (expect) b.check_model(*expect);
  return b;
}

std::string diagnostics_text(const ProjectionBundle& b) {
  std::ostringstream os;
  os << "projection bundle  model=" << std::hex << b.meta.model_checksum << std::dec
     << "  rank_mode=" << b.meta.rank_mode << "  loss=" << to_string(b.meta.loss_mode)
     << "  calibration_seed=" << b.meta.calibration_seed << "\n";
  os << "layer kind     d     r    energy        gap     sigma_1     sigma_r\n";
  for (const auto& p : b.projectors) {
    os << std::setw(5) << p.layer << std::setw(5) << to_string(p.kind) << std::setw(6) << p.dim()
       << std::setw(6) << p.rank << std::setw(10) << std::fixed << std::setprecision(4) << p.energy
       << std::setw(11) << std::scientific << std::setprecision(3) << p.gap << std::setw(12)
       << (p.top_sigma.empty() ? 0.0 : p.top_sigma.front()) << std::setw(12)
       << (p.top_sigma.empty() ? 0.0 : p.top_sigma.back()) << std::defaultfloat << "\n";
  }
  return os.str();
}

}  // namespace spd
