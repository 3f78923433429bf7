#pragma once

// Tape-based reverse-mode automatic differentiation.
//
// A Tape is an append-only list of nodes; every op appends one node whose
// inputs already exist, so the list order is a topological order and the
// backward pass is a single reverse sweep. Ops never mutate recorded values.
//
// Gradient semantics: backward() accumulates into Parameter::grad. Callers
// (normally the optimizer) zero grads before each step; calling backward twice
// without zeroing adds the gradients twice.

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "tttflow/tensor.hpp"

namespace tttflow {

// A named trainable tensor that outlives tapes.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string name_, Tensor value_);

  void zero_grad();
};

using GradMap = std::map<std::string, Tensor>;

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  Tape& tape() const { return *tape_; }
  std::uint32_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

class Tape {
 public:
  // Vector-Jacobian product of one node: reads grad(node), accumulates into
  // the grads of its inputs.
  using Backward = std::function<void(Tape&, std::uint32_t node)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Differentiable leaf not bound to a Parameter; read its gradient with grad().
  Var input(Tensor value);
  // Leaf referencing p.value (must stay alive and unchanged while the tape is
  // used). backward() accumulates into p.grad.
  Var param(Parameter& p);
  // Leaf referencing p.value that never receives gradient.
  Var frozen(const Parameter& p);

  // Reverse sweep from a scalar loss. Returns the accumulated grad of every
  // Parameter bound on this tape (zero when unreachable from the loss).
  GradMap backward(Var loss);

  // Gradient of a node from the last backward(); zeros if never reached.
  Tensor grad(Var v) const;

  std::size_t size() const noexcept { return nodes_.size(); }

  // --- op-building interface -------------------------------------------------
  // Appends a node. Throws NumericError if `value` has a non-finite entry.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward, const char* op);
  const Tensor& value_of(std::uint32_t id) const;
  const Tensor& grad_of(std::uint32_t id) const;
  // Lazily zero-initialized gradient buffer of an input node; nullptr when the
  // node does not require grad.
  Tensor* grad_buffer(std::uint32_t id);
  std::uint32_t input_id(std::uint32_t node, std::size_t k) const;
  bool node_requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }

 private:
  struct Node {
    Tensor owned;
    const Tensor* ref = nullptr;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    bool persistent_grad = false;  // input() leaves keep grads across passes
    Parameter* param = nullptr;
    std::uint32_t inputs[3] = {0, 0, 0};
    std::uint8_t n_inputs = 0;
    Backward backward;
  };

  Var push(Node node);
  void check_owned(Var v, const char* op) const;

  std::vector<Node> nodes_;
};

// ---- primitive ops ----------------------------------------------------------
// Binary elementwise ops accept equal shapes, [n,d] with [d] (row broadcast
// over the leading batch axis) in either order, or a rank-0 scalar on either
// side.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var matmul(Var a, Var b);  // [m,k] x [k,n]

Var neg(Var x);
Var exp(Var x);
Var log(Var x);
Var tanh(Var x);
Var relu(Var x);
Var sqrt(Var x);
Var square(Var x);
Var scale(Var x, double c);
Var add_scalar(Var x, double c);

// Reduce one axis: rank-2 axis 0 -> [d], axis 1 -> [n]; rank-1 axis 0 -> scalar.
Var sum(Var x, std::size_t axis);
Var mean(Var x, std::size_t axis);
Var sum_all(Var x);
Var mean_all(Var x);

Var broadcast_rows(Var x, std::size_t rows);  // [d] -> [rows, d]
// Columns of a rank-2 tensor where mask != 0, in order.
Var mask_select(Var x, std::span<const double> mask);
Var concat_cols(Var a, Var b);

Var log_softmax(Var logits);                             // row-wise, [n,K]
Var pick(Var x, std::span<const std::size_t> columns);  // out[i] = x[i, columns[i]]

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator*(double c, Var x) { return scale(x, c); }

// Mean softmax cross-entropy of [n,K] logits against integer labels.
Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels);

}  // namespace tttflow
