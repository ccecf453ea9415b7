#include "spd/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace spd::ad {

const Tensor* GradientMap::find(const Tensor& param) const {
  auto it = grads_.find(&param);
  return it == grads_.end() ? nullptr : &it->second;
}

const Tensor& GradientMap::at(const Tensor& param) const {
  const Tensor* g = find(param);
  if (!g) throw Error("no gradient recorded for parameter");
  return *g;
}

// ---- Tape -------------------------------------------------------------------

void Tape::check_live() const {
  if (consumed_) throw StaleTapeError("tape already consumed by backward()");
}

void Tape::check_unconsumed(Var v, const char* what) const {
  check_live();
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
    throw StaleTapeError(std::string(what) + ": variable is not on this tape");
  if (nodes_[v.id].consumers > 0)
    throw StaleTapeError(std::string(what) +
                         ": value already consumed by the forward pass; register before use");
}

Var Tape::push(Tensor value, std::vector<int> inputs, BackwardFn fn) {
  check_live();
  bool needs = false;
  for (int in : inputs) {
    nodes_.at(in).consumers++;
    needs = needs || nodes_[in].needs_grad;
  }
  Node n;
  n.value = std::move(value);
  n.inputs = std::move(inputs);
  n.needs_grad = needs;
  if (needs) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  grads_.emplace_back();
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(Tensor value) { return push(std::move(value), {}, nullptr); }

Var Tape::param(const Tensor& p, bool trainable) {
  Var v = push(p, {}, nullptr);
  if (trainable) {
    nodes_[v.id].needs_grad = true;
    nodes_[v.id].param = &p;
  }
  return v;
}

Var Tape::input(Tensor value) {
  Var v = push(std::move(value), {}, nullptr);
  nodes_[v.id].needs_grad = true;
  return v;
}

std::size_t Tape::tap(Var v, std::string label) {
  check_unconsumed(v, "tap");
  nodes_[v.id].needs_grad = true;
  taps_.push_back(GradTap{std::move(label), v, {}});
  return taps_.size() - 1;
}

void Tape::require_grad(Var v) {
  check_unconsumed(v, "require_grad");
  nodes_[v.id].needs_grad = true;
}

const Tensor& Tape::value(Var v) const { return nodes_.at(v.id).value; }

Tensor& Tape::grad(int id) {
  Tensor& g = grads_[id];
  if (g.empty() && !nodes_[id].value.empty()) g = Tensor(nodes_[id].value.shape());
  return g;
}

BackwardResult Tape::backward(Var loss) {
  check_live();
  if (loss.id < 0 || static_cast<std::size_t>(loss.id) >= nodes_.size())
    throw StaleTapeError("backward: loss is not on this tape");
  if (nodes_[loss.id].value.size() != 1) throw DimensionError("backward: loss must be a scalar");

  grad(loss.id)[0] = 1.0;
  for (int i = loss.id; i >= 0; --i) {
    if (grads_[i].empty() || !nodes_[i].backward) continue;
    nodes_[i].backward(*this, i);
  }

  BackwardResult out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!nodes_[i].param) continue;
    out.params.set(nodes_[i].param,
                   grads_[i].empty() ? Tensor(nodes_[i].value.shape()) : grads_[i]);
  }
  out.taps = std::move(taps_);
  for (auto& tp : out.taps) {
    const auto& g = grads_[tp.var.id];
    tp.grad = g.empty() ? Tensor(nodes_[tp.var.id].value.shape()) : g;
  }
  consumed_ = true;
  nodes_.clear();
  grads_.clear();
  return out;
}

// ---- ops --------------------------------------------------------------------

Var matmul(Tape& t, Var a, Var b, bool trans_a, bool trans_b) {
  Tensor out = kernels::matmul(t.value(a), t.value(b), trans_a, trans_b);
  const int ia = a.id, ib = b.id;
  return t.push(std::move(out), {ia, ib}, [ia, ib, trans_a, trans_b](Tape& tp, int self) {
    const Tensor& dc = tp.grad(self);
    const Tensor& av = tp.node_value(ia);
    const Tensor& bv = tp.node_value(ib);
    if (tp.input_needs_grad(ia)) {
      Tensor& ga = tp.grad(ia);
      if (!trans_a && !trans_b) kernels::matmul_acc(ga, dc, bv, false, true);
      else if (!trans_a && trans_b) kernels::matmul_acc(ga, dc, bv, false, false);
      else if (trans_a && !trans_b) kernels::matmul_acc(ga, bv, dc, false, true);
      else kernels::matmul_acc(ga, bv, dc, true, true);
    }
    if (tp.input_needs_grad(ib)) {
      Tensor& gb = tp.grad(ib);
      if (!trans_a && !trans_b) kernels::matmul_acc(gb, av, dc, true, false);
      else if (!trans_a && trans_b) kernels::matmul_acc(gb, dc, av, true, false);
      else if (trans_a && !trans_b) kernels::matmul_acc(gb, av, dc, false, false);
      else kernels::matmul_acc(gb, dc, av, true, true);
    }
  });
}

Var add(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (av.size() != bv.size())
    throw DimensionError("add shape mismatch " + shape_str(av.shape()) + " vs " +
                         shape_str(bv.shape()));
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const int ia = a.id, ib = b.id;
  return t.push(std::move(out), {ia, ib}, [ia, ib](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    for (int in : {ia, ib}) {
      if (!tp.input_needs_grad(in)) continue;
      Tensor& gi = tp.grad(in);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

Var add_row(Tape& t, Var a, Var row) {
  const Tensor& av = t.value(a);
  const Tensor& rv = t.value(row);
  if (rv.size() != av.cols()) throw DimensionError("add_row width mismatch");
  Tensor out = av;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += rv[j];
  const int ia = a.id, ir = row.id;
  return t.push(std::move(out), {ia, ir}, [ia, ir](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    if (tp.input_needs_grad(ia)) {
      Tensor& ga = tp.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.input_needs_grad(ir)) {
      Tensor& gr = tp.grad(ir);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gr[j] += g(i, j);
    }
  });
}

Var scale(Tape& t, Var a, double c) {
  Tensor out = t.value(a);
  for (double& v : out.data()) v *= c;
  const int ia = a.id;
  return t.push(std::move(out), {ia}, [ia, c](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    Tensor& ga = tp.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
  });
}

Var mul(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (av.size() != bv.size()) throw DimensionError("mul shape mismatch");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const int ia = a.id, ib = b.id;
  return t.push(std::move(out), {ia, ib}, [ia, ib](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    if (tp.input_needs_grad(ia)) {
      Tensor& ga = tp.grad(ia);
      const Tensor& bv = tp.node_value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.input_needs_grad(ib)) {
      Tensor& gb = tp.grad(ib);
      const Tensor& av = tp.node_value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var mul_const(Tape& t, Var a, const Tensor& mask) {
  const Tensor& av = t.value(a);
  if (av.size() != mask.size()) throw DimensionError("mul_const shape mismatch");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  const int ia = a.id;
  auto m = std::make_shared<Tensor>(mask);
  return t.push(std::move(out), {ia}, [ia, m](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    Tensor& ga = tp.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*m)[i];
  });
}

Var gelu(Tape& t, Var a) {
  Tensor out = t.value(a);
  for (double& v : out.data()) v = kernels::gelu(v);
  const int ia = a.id;
  return t.push(std::move(out), {ia}, [ia](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    const Tensor& x = tp.node_value(ia);
    Tensor& ga = tp.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * kernels::gelu_grad(x[i]);
  });
}

Var layer_norm(Tape& t, Var x, Var gamma, Var beta, double eps) {
  auto xhat = std::make_shared<Tensor>();
  auto inv_std = std::make_shared<std::vector<double>>();
  Tensor out = kernels::layer_norm(t.value(x), t.value(gamma), t.value(beta), eps, xhat.get(),
                                   inv_std.get());
  const int ix = x.id, ig = gamma.id, ib = beta.id;
  return t.push(std::move(out), {ix, ig, ib}, [=](Tape& tp, int self) {
    const Tensor& dy = tp.grad(self);
    const Tensor& gam = tp.node_value(ig);
    const std::size_t n = dy.rows(), d = dy.cols();
    if (tp.input_needs_grad(ig)) {
      Tensor& gg = tp.grad(ig);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) gg[j] += dy(i, j) * (*xhat)(i, j);
    }
    if (tp.input_needs_grad(ib)) {
      Tensor& gb = tp.grad(ib);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) gb[j] += dy(i, j);
    }
    if (tp.input_needs_grad(ix)) {
      Tensor& gx = tp.grad(ix);
      std::vector<double> g(d);
      for (std::size_t i = 0; i < n; ++i) {
        double mean_g = 0.0, mean_gx = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          g[j] = dy(i, j) * gam[j];
          mean_g += g[j];
          mean_gx += g[j] * (*xhat)(i, j);
        }
        mean_g /= static_cast<double>(d);
        mean_gx /= static_cast<double>(d);
        const double is = (*inv_std)[i];
        for (std::size_t j = 0; j < d; ++j)
          gx(i, j) += is * (g[j] - mean_g - (*xhat)(i, j) * mean_gx);
      }
    }
  });
}

namespace {

Var softmax_impl(Tape& t, Var x, bool causal, std::size_t offset) {
  const Tensor& xv = t.value(x);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    const std::size_t valid = causal ? std::min(xv.cols(), i + offset + 1) : xv.cols();
    kernels::softmax_row(xv.row(i), out.row(i), valid);
  }
  const int ix = x.id;
  return t.push(std::move(out), {ix}, [ix](Tape& tp, int self) {
    const Tensor& dy = tp.grad(self);
    const Tensor& y = tp.node_value(self);
    Tensor& gx = tp.grad(ix);
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) dot += y(i, j) * dy(i, j);
      for (std::size_t j = 0; j < y.cols(); ++j) gx(i, j) += y(i, j) * (dy(i, j) - dot);
    }
  });
}

}  // namespace

Var softmax_rows(Tape& t, Var x) { return softmax_impl(t, x, false, 0); }

Var causal_softmax_rows(Tape& t, Var x, std::size_t offset) {
  return softmax_impl(t, x, true, offset);
}

Var slice_cols(Tape& t, Var x, std::size_t start, std::size_t width) {
  const Tensor& xv = t.value(x);
  if (start + width > xv.cols()) throw DimensionError("slice_cols out of range");
  Tensor out({xv.rows(), width});
  for (std::size_t i = 0; i < xv.rows(); ++i)
    for (std::size_t j = 0; j < width; ++j) out(i, j) = xv(i, start + j);
  const int ix = x.id;
  return t.push(std::move(out), {ix}, [ix, start, width](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    Tensor& gx = tp.grad(ix);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < width; ++j) gx(i, start + j) += g(i, j);
  });
}

Var concat_cols(Tape& t, std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols of nothing");
  const std::size_t rows = t.value(parts[0]).rows();
  std::size_t total = 0;
  std::vector<int> ids;
  std::vector<std::size_t> widths;
  for (Var p : parts) {
    const Tensor& v = t.value(p);
    if (v.rows() != rows) throw DimensionError("concat_cols row mismatch");
    total += v.cols();
    ids.push_back(p.id);
    widths.push_back(v.cols());
  }
  Tensor out({rows, total});
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor& v = t.value(p);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < v.cols(); ++j) out(i, off + j) = v(i, j);
    off += v.cols();
  }
  return t.push(std::move(out), ids, [ids, widths](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (tp.input_needs_grad(ids[k])) {
        Tensor& gk = tp.grad(ids[k]);
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) gk(i, j) += g(i, off + j);
      }
      off += widths[k];
    }
  });
}

Var gather_rows(Tape& t, Var table, std::span<const int> ids) {
  const Tensor& tv = t.value(table);
  const std::size_t d = tv.cols();
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows())
      throw DimensionError("gather_rows index out of range");
    auto src = tv.row(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  const int it = table.id;
  std::vector<int> idv(ids.begin(), ids.end());
  return t.push(std::move(out), {it}, [it, idv](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    Tensor& gt = tp.grad(it);
    for (std::size_t i = 0; i < idv.size(); ++i) {
      auto dst = gt.row(static_cast<std::size_t>(idv[i]));
      auto src = g.row(i);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
  });
}

Var sum(Tape& t, Var x) {
  double s = 0.0;
  for (double v : t.value(x).data()) s += v;
  const int ix = x.id;
  return t.push(Tensor({1}, std::vector<double>{s}), {ix}, [ix](Tape& tp, int self) {
    const double g = tp.grad(self)[0];
    Tensor& gx = tp.grad(ix);
    for (double& v : gx.data()) v += g;
  });
}

Var weighted_nll(Tape& t, Var logits, std::span<const int> targets,
                 std::span<const double> weights) {
  const Tensor& lv = t.value(logits);
  if (targets.size() != lv.rows() || weights.size() != lv.rows())
    throw DimensionError("weighted_nll: targets/weights must have one entry per row");
  const std::size_t vocab = lv.cols();
  double total = 0.0;
  for (std::size_t i = 0; i < lv.rows(); ++i) {
    if (weights[i] == 0.0) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= vocab)
      throw DimensionError("weighted_nll: target out of range");
    auto r = lv.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double s = 0.0;
    for (double v : r) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    total += weights[i] * (lse - r[static_cast<std::size_t>(targets[i])]);
  }
  const int il = logits.id;
  std::vector<int> tg(targets.begin(), targets.end());
  std::vector<double> w(weights.begin(), weights.end());
  return t.push(Tensor({1}, std::vector<double>{total}), {il},
                [il, tg, w](Tape& tp, int self) {
                  const double g = tp.grad(self)[0];
                  const Tensor& lv = tp.node_value(il);
                  Tensor& gl = tp.grad(il);
                  std::vector<double> p(lv.cols());
                  for (std::size_t i = 0; i < lv.rows(); ++i) {
                    if (w[i] == 0.0) continue;
                    kernels::softmax_row(lv.row(i), p, p.size());
                    const double c = g * w[i];
                    for (std::size_t j = 0; j < p.size(); ++j) gl(i, j) += c * p[j];
                    gl(i, static_cast<std::size_t>(tg[i])) -= c;
                  }
                });
}

}  // namespace spd::ad
