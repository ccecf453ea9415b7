#include "spd/calibration.hpp"

#include <cmath>

#include "spd/binio.hpp"

namespace spd {

std::string to_string(LossMode m) { return m == LossMode::Aligned ? "aligned" : "full_sequence"; }

LossMode parse_loss_mode(const std::string& s) {
  if (s == "aligned") return LossMode::Aligned;
  if (s == "full_sequence" || s == "full") return LossMode::FullSequence;
  throw Error("unknown loss mode '" + s + "'");
}

std::vector<double> loss_row_weights(std::size_t seq_len, const AlignedLossSpec& spec) {
  std::vector<double> w(seq_len, 0.0);
  if (spec.mode == LossMode::Aligned) {
    if (spec.spans.empty()) throw CalibrationError("aligned loss needs a nonempty span set");
    const double inv = 1.0 / static_cast<double>(spec.spans.size());
    for (std::size_t t : spec.spans.positions) {
      if (t == 0 || t >= seq_len)
        throw CalibrationError("span position " + std::to_string(t) + " outside (0, " +
                               std::to_string(seq_len) + ")");
      w[t - 1] = inv;
    }
  } else {
    if (seq_len < 2) throw CalibrationError("full-sequence loss needs at least two tokens");
    const double inv = 1.0 / static_cast<double>(seq_len - 1);
    for (std::size_t i = 0; i + 1 < seq_len; ++i) w[i] = inv;
  }
  return w;
}

namespace {

std::vector<int> next_token_targets(std::span<const TokenId> tokens) {
  std::vector<int> tg(tokens.size(), 0);
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) tg[i] = tokens[i + 1];
  return tg;
}

}  // namespace

ad::Var aligned_loss(ad::Tape& tape, ad::Var logits, std::span<const TokenId> tokens,
                     const AlignedLossSpec& spec) {
  const auto w = loss_row_weights(tokens.size(), spec);
  const auto tg = next_token_targets(tokens);
  return ad::weighted_nll(tape, logits, tg, w);
}

double aligned_loss(const Tensor& logits, std::span<const TokenId> tokens,
                    const AlignedLossSpec& spec) {
  ad::Tape tape;
  ad::Var l = tape.constant(logits);
  return tape.value(aligned_loss(tape, l, tokens, spec))[0];
}

double aligned_loss(const ModelState& model, const Example& ex, const AlignedLossSpec& spec) {
  const TokenSeq toks = ex.tokens();
  return aligned_loss(forward_logits(model, toks), toks, spec);
}

HarvestResult harvest(const ModelState& model, const std::vector<Example>& calibration,
                      const HarvestOptions& opts, HarvestLog* log) {
  if (opts.layers.empty()) throw CalibrationError("harvest: no target layers");
  const auto d = static_cast<std::size_t>(model.config.kv_dim());
  HarvestResult out;
  std::vector<TapSpec> taps;
  for (int layer : opts.layers) {
    if (layer < 1 || layer > model.config.n_layers)
      throw CalibrationError("harvest: layer " + std::to_string(layer) + " out of range");
    for (KvKind kind : {KvKind::K, KvKind::V}) {
      taps.push_back({layer, kind});
      GradientMatrix g;
      g.layer = layer;
      g.kind = kind;
      out[{layer, kind}] = std::move(g);
    }
  }
  std::map<GradKey, std::vector<double>> buffers;
  auto note = [&](std::string s) {
    if (log) log->lines.push_back(std::move(s));
  };

  for (std::size_t i = 0; i < calibration.size(); ++i) {
    const Example& ex = calibration[i];
    AlignedLossSpec spec;
    spec.mode = opts.mode;
    try {
      spec.spans = extract_spans(ex);
    } catch (const SpanError& e) {
      note("example " + std::to_string(i) + " rejected: " + e.what());
      if (log) log->examples_rejected++;
      continue;
    }
    const TokenSeq toks = ex.tokens();
    ad::Tape tape;
    ForwardOptions fo;
    fo.taps = taps;
    auto fwd = forward(tape, model, toks, fo);
    ad::Var loss = aligned_loss(tape, fwd.logits, toks, spec);
    if (!std::isfinite(tape.value(loss)[0]))
      throw CalibrationError("harvest: non-finite loss on calibration example " + std::to_string(i));
    auto res = tape.backward(loss);
    for (const auto& [ts, idx] : fwd.taps) {
      const Tensor& g = res.taps[idx].grad;
      if (!g.all_finite())
        throw CalibrationError("harvest: non-finite gradient on calibration example " +
                               std::to_string(i));
      GradientMatrix& gm = out[{ts.layer, ts.kind}];
      auto& buf = buffers[{ts.layer, ts.kind}];
      std::size_t dropped_here = 0;
      for (std::size_t t = 0; t < g.rows(); ++t) {
        auto row = g.row(t);
        double n2 = 0.0;
        for (double v : row) n2 += v * v;
        gm.total_rows++;
        if (opts.drop_small_rows && std::sqrt(n2) < opts.drop_threshold) {
          gm.dropped_rows++;
          dropped_here++;
          continue;
        }
        buf.insert(buf.end(), row.begin(), row.end());
        gm.origin.emplace_back(i, t);
      }
      if (dropped_here)
        note("example " + std::to_string(i) + " L" + std::to_string(ts.layer) + to_string(ts.kind) +
             ": dropped " + std::to_string(dropped_here) + " near-zero rows");
    }
    if (log) log->examples_used++;
  }
  for (auto& [key, gm] : out) {
    auto& buf = buffers[key];
    const std::size_t m = buf.size() / d;
    gm.rows = Tensor({m, d}, std::move(buf));
  }
  return out;
}

namespace {
constexpr char kGradTag[9] = "SPDGRAD";
}

void write_gradient_dump(const std::string& path, const GradientMatrix& g) {
  ByteWriter w;
  w.tag(kGradTag);
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(g.layer));
  w.u8(g.kind == KvKind::K ? 0 : 1);
  w.u64(g.rows.rows());
  w.u64(g.rows.cols());
  w.f64s(g.rows.data());
  write_sealed(path, w);
}

GradientMatrix read_gradient_dump(const std::string& path) {
  const auto bytes = read_sealed(path, "gradient dump");
  ByteReader r(bytes);
  r.expect_tag(kGradTag, "gradient dump");
  if (r.u32() != 1) throw FormatError("gradient dump: unsupported version");
  GradientMatrix g;
  g.layer = static_cast<int>(r.u32());
  g.kind = r.u8() == 0 ? KvKind::K : KvKind::V;
  const auto m = r.u64();
  const auto d = r.u64();
  g.rows = Tensor({m, d});
  r.f64s(g.rows.data());
  g.total_rows = m;
  return g;
}

}  // namespace spd
