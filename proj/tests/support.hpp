#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "spd/autodiff.hpp"
#include "spd/model.hpp"
#include "spd/taskgen.hpp"

namespace ts {

using spd::Tensor;
namespace ad = spd::ad;

inline Tensor rand_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng, double lo = -1.0,
                          double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = u(rng);
  return t;
}

// Central differences, h = 1e-5.
inline Tensor numeric_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                           double h = 1e-5) {
  Tensor g(x.shape());
  Tensor xp = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = xp[i];
    xp[i] = orig + h;
    const double fp = f(xp);
    xp[i] = orig - h;
    const double fm = f(xp);
    xp[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)
inline double max_rel_err(const Tensor& a, const Tensor& n, double floor = 1e-4) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double den = std::max({std::abs(a[i]), std::abs(n[i]), floor});
    worst = std::max(worst, std::abs(a[i] - n[i]) / den);
  }
  return worst;
}

inline spd::ModelConfig tiny_config(int layers = 2) {
  spd::ModelConfig c;
  c.n_layers = layers;
  c.d_model = 16;
  c.n_heads = 2;
  c.head_dim = 8;
  c.vocab_size = spd::Tokenizer::vocab_size();
  c.max_seq_len = 128;
  c.mlp_hidden = 32;
  return c;
}

inline spd::ModelConfig default_config() {
  spd::ModelConfig c;
  c.vocab_size = spd::Tokenizer::vocab_size();
  return c;
}

// Adds N(0, scale) noise to every base parameter.
inline void jitter(spd::ModelState& m, std::uint64_t seed, double scale = 0.05) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  m.for_each_base_param([&](Tensor& t) {
    for (double& v : t.data()) v += n(rng);
  });
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("spd_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// One differentiable op under test: builds a scalar from its inputs through
// a fixed random readout so every output element carries weight.
struct OpCase {
  std::string name;
  std::vector<std::vector<std::size_t>> shapes;
  std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)> build;
  // inputs that must stay positive/valid are drawn from this range
  double lo = -1.0, hi = 1.0;
};

inline std::vector<OpCase> op_cases() {
  using V = std::vector<ad::Var>;
  static const std::vector<int> ids = {2, 0, 3, 2, 1};
  static const std::vector<int> targets = {1, 0, 4, 2};
  static const std::vector<double> weights = {0.5, 0.0, 0.25, 1.0};
  return {
      {"matmul", {{5, 4}, {4, 3}}, [](ad::Tape& t, const V& v) { return ad::matmul(t, v[0], v[1]); }},
      {"matmul_ta", {{4, 5}, {4, 3}},
       [](ad::Tape& t, const V& v) { return ad::matmul(t, v[0], v[1], true, false); }},
      {"matmul_tb", {{5, 4}, {3, 4}},
       [](ad::Tape& t, const V& v) { return ad::matmul(t, v[0], v[1], false, true); }},
      {"matmul_tab", {{4, 5}, {3, 4}},
       [](ad::Tape& t, const V& v) { return ad::matmul(t, v[0], v[1], true, true); }},
      {"add", {{3, 4}, {3, 4}}, [](ad::Tape& t, const V& v) { return ad::add(t, v[0], v[1]); }},
      {"add_row", {{3, 4}, {1, 4}}, [](ad::Tape& t, const V& v) { return ad::add_row(t, v[0], v[1]); }},
      {"scale", {{3, 4}}, [](ad::Tape& t, const V& v) { return ad::scale(t, v[0], -1.7); }},
      {"mul", {{3, 4}, {3, 4}}, [](ad::Tape& t, const V& v) { return ad::mul(t, v[0], v[1]); }},
      {"mul_const", {{3, 4}},
       [](ad::Tape& t, const V& v) {
         Tensor mask({3, 4}, 2.0);
         mask(0, 1) = 0.0;
         mask(2, 3) = 0.0;
         return ad::mul_const(t, v[0], mask);
       }},
      {"gelu", {{3, 5}}, [](ad::Tape& t, const V& v) { return ad::gelu(t, v[0]); }, -3.0, 3.0},
      {"layer_norm", {{3, 6}, {1, 6}, {1, 6}},
       [](ad::Tape& t, const V& v) { return ad::layer_norm(t, v[0], v[1], v[2]); }},
      {"softmax_rows", {{3, 4}}, [](ad::Tape& t, const V& v) { return ad::softmax_rows(t, v[0]); }},
      {"causal_softmax_rows", {{4, 4}},
       [](ad::Tape& t, const V& v) { return ad::causal_softmax_rows(t, v[0]); }},
      {"causal_softmax_offset", {{2, 5}},
       [](ad::Tape& t, const V& v) { return ad::causal_softmax_rows(t, v[0], 3); }},
      {"slice_cols", {{3, 6}}, [](ad::Tape& t, const V& v) { return ad::slice_cols(t, v[0], 2, 3); }},
      {"concat_cols", {{3, 2}, {3, 3}},
       [](ad::Tape& t, const V& v) {
         const std::vector<ad::Var> parts{v[0], v[1]};
         return ad::concat_cols(t, parts);
       }},
      {"gather_rows", {{4, 3}},
       [](ad::Tape& t, const V& v) { return ad::gather_rows(t, v[0], ids); }},
      {"sum", {{3, 4}}, [](ad::Tape& t, const V& v) { return ad::sum(t, v[0]); }},
      {"weighted_nll", {{4, 5}},
       [](ad::Tape& t, const V& v) { return ad::weighted_nll(t, v[0], targets, weights); }},
  };
}

struct OpCheck {
  double max_rel = 0.0;
  bool finite = true;
};

// Analytic gradient of sum(op(x) * W) against central differences for every input.
inline OpCheck check_op(const OpCase& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Tensor> xs;
  for (const auto& s : c.shapes) xs.push_back(rand_tensor(s, rng, c.lo, c.hi));
  Tensor readout;
  auto scalar = [&](ad::Tape& t, const std::vector<ad::Var>& vs) {
    ad::Var y = c.build(t, vs);
    if (readout.empty()) readout = rand_tensor(t.value(y).shape(), rng);
    return ad::sum(t, ad::mul_const(t, y, readout));
  };
  {
    ad::Tape probe;
    std::vector<ad::Var> vs;
    for (const auto& x : xs) vs.push_back(probe.constant(x));
    scalar(probe, vs);
  }
  OpCheck out;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    ad::Tape t;
    std::vector<ad::Var> vs;
    std::vector<std::size_t> taps;
    for (const auto& x : xs) {
      vs.push_back(t.input(x));
      taps.push_back(t.tap(vs.back(), "x"));
    }
    auto res = t.backward(scalar(t, vs));
    const Tensor& analytic = res.taps[taps[k]].grad;
    auto f = [&](const Tensor& xk) {
      ad::Tape tt;
      std::vector<ad::Var> ws;
      for (std::size_t j = 0; j < xs.size(); ++j) ws.push_back(tt.constant(j == k ? xk : xs[j]));
      return tt.value(scalar(tt, ws))[0];
    };
    const Tensor numeric = numeric_grad(f, xs[k]);
    out.finite = out.finite && analytic.all_finite();
    out.max_rel = std::max(out.max_rel, max_rel_err(analytic, numeric));
  }
  return out;
}

}  // namespace ts
