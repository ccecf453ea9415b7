#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "spd/tensor.hpp"

namespace spd::ad {

// Thrown when the tape is used out of order: a tap registered on a value that
// already has consumers, or any use of a tape after backward() consumed it.
class StaleTapeError : public Error {
 public:
  using Error::Error;
};

// Handle to a node on a Tape. Only meaningful for the tape that issued it.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Gradient capture point on an intermediate value (e.g. a layer's K rows).
struct GradTap {
  std::string label;
  Var var;
  Tensor grad;  // filled by Tape::backward; same shape as the tapped value
};

// Parameter gradients keyed by the address of the parameter tensor that was
// passed to Tape::param().
class GradientMap {
 public:
  const Tensor* find(const Tensor& param) const;
  const Tensor& at(const Tensor& param) const;
  bool contains(const Tensor& param) const { return find(param) != nullptr; }
  std::size_t size() const { return grads_.size(); }

  void set(const Tensor* param, Tensor grad) { grads_[param] = std::move(grad); }

 private:
  std::unordered_map<const Tensor*, Tensor> grads_;
};

struct BackwardResult {
  GradientMap params;
  std::vector<GradTap> taps;
};

// Define-by-run reverse-mode tape. Nodes are appended in evaluation order, so
// reverse creation order is a valid reverse topological order and backward()
// visits each node once.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf that never receives a gradient.
  Var constant(Tensor value);
  // Leaf whose gradient is reported in BackwardResult::params when trainable.
  // The tensor must outlive the tape.
  Var param(const Tensor& p, bool trainable = true);
  // Leaf that receives gradient but is not a parameter (useful in tests).
  Var input(Tensor value);

  // Capture d(loss)/d(v) during backward. Must be called before v is consumed
  // by any other node.
  std::size_t tap(Var v, std::string label);

  // Mark an intermediate as gradient-carrying even if its inputs are not.
  // Same ordering rule as tap().
  void require_grad(Var v);

  const Tensor& value(Var v) const;
  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  BackwardResult backward(Var loss);

  // Used by op implementations.
  Var push(Tensor value, std::vector<int> inputs, BackwardFn fn);
  Tensor& grad(int id);          // allocates zeros on first access
  bool has_grad(int id) const { return !grads_[id].empty(); }
  bool input_needs_grad(int id) const { return nodes_[id].needs_grad; }
  const Tensor& node_value(int id) const { return nodes_[id].value; }
  const std::vector<int>& node_inputs(int id) const { return nodes_[id].inputs; }

 private:
  struct Node {
    Tensor value;
    std::vector<int> inputs;
    BackwardFn backward;
    bool needs_grad = false;
    int consumers = 0;
    const Tensor* param = nullptr;
  };

  void check_live() const;
  void check_unconsumed(Var v, const char* what) const;

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::vector<GradTap> taps_;
  bool consumed_ = false;
};

// ---- differentiable ops ---------------------------------------------------

Var matmul(Tape& t, Var a, Var b, bool trans_a = false, bool trans_b = false);
Var add(Tape& t, Var a, Var b);
// Adds a [1, n] row vector to every row of a [m, n] matrix.
Var add_row(Tape& t, Var a, Var row);
Var scale(Tape& t, Var a, double c);
Var mul(Tape& t, Var a, Var b);
// Elementwise product with a constant mask (dropout).
Var mul_const(Tape& t, Var a, const Tensor& mask);
Var gelu(Tape& t, Var a);
Var layer_norm(Tape& t, Var x, Var gamma, Var beta, double eps = 1e-5);
Var softmax_rows(Tape& t, Var x);
// Row i keeps columns j <= i + offset; the rest get probability exactly 0.
Var causal_softmax_rows(Tape& t, Var x, std::size_t offset = 0);
Var slice_cols(Tape& t, Var x, std::size_t start, std::size_t width);
Var concat_cols(Tape& t, std::span<const Var> parts);
// out[i] = table[ids[i]]
Var gather_rows(Tape& t, Var table, std::span<const int> ids);
Var sum(Tape& t, Var x);
// Sum over rows i of weights[i] * -log softmax(logits[i])[targets[i]].
// Rows with zero weight are skipped outright: they contribute exactly 0 to the
// value and to every gradient.
Var weighted_nll(Tape& t, Var logits, std::span<const int> targets,
                 std::span<const double> weights);

}  // namespace spd::ad
