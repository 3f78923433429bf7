#include "tttflow/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "tttflow/simd/kernels.hpp"

namespace tttflow {

Parameter::Parameter(std::string name_, Tensor value_)
    : name(std::move(name_)), value(std::move(value_)), grad(value.shape()) {}

void Parameter::zero_grad() {
  if (grad.shape() != value.shape()) {
    grad = Tensor(value.shape());
  } else {
    grad.fill(0.0);
  }
}

const Tensor& Var::value() const { return tape_->value_of(id_); }

bool Var::requires_grad() const { return tape_->node_requires_grad(id_); }

// ---------------------------------------------------------------------------
// Tape

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::constant(Tensor value) {
  Node n;
  n.owned = std::move(value);
  return push(std::move(n));
}

Var Tape::input(Tensor value) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = true;
  n.persistent_grad = true;
  return push(std::move(n));
}

Var Tape::param(Parameter& p) {
  Node n;
  n.ref = &p.value;
  n.requires_grad = true;
  n.param = &p;
  return push(std::move(n));
}

Var Tape::frozen(const Parameter& p) {
  Node n;
  n.ref = &p.value;
  return push(std::move(n));
}

void Tape::check_owned(Var v, const char* op) const {
  if (v.tape_ != this) throw GraphError(std::string(op) + ": variable belongs to another tape");
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, Backward backward,
                 const char* op) {
  const std::size_t bad = value.first_non_finite();
  if (bad != value.size()) {
    std::optional<std::size_t> row;
    if (value.rank() == 1) row = bad;
    if (value.rank() == 2) row = bad / value.shape()[1];
    throw NumericError(op, bad, row);
  }
  Node n;
  n.owned = std::move(value);
  for (const Var& in : inputs) {
    check_owned(in, op);
    n.inputs[n.n_inputs++] = in.id_;
    n.requires_grad = n.requires_grad || nodes_[in.id_].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

const Tensor& Tape::value_of(std::uint32_t id) const {
  const Node& n = nodes_[id];
  return n.ref ? *n.ref : n.owned;
}

const Tensor& Tape::grad_of(std::uint32_t id) const { return nodes_[id].grad; }

Tensor* Tape::grad_buffer(std::uint32_t id) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return nullptr;
  if (!n.has_grad) {
    const Tensor& v = n.ref ? *n.ref : n.owned;
    if (n.grad.shape() != v.shape()) {
      n.grad = Tensor(v.shape());
    } else {
      n.grad.fill(0.0);
    }
    n.has_grad = true;
  }
  return &n.grad;
}

std::uint32_t Tape::input_id(std::uint32_t node, std::size_t k) const {
  return nodes_[node].inputs[k];
}

GradMap Tape::backward(Var loss) {
  check_owned(loss, "backward");
  const Tensor& lv = loss.value();
  if (lv.size() != 1) {
    throw GraphError("backward: loss must be a scalar, got shape " + shape_to_string(lv.shape()));
  }
  if (!nodes_[loss.id_].requires_grad) {
    throw GraphError("backward: loss is detached from every trainable tensor");
  }
  for (Node& n : nodes_) {
    if (!n.persistent_grad) n.has_grad = false;
  }
  Tensor* seed = grad_buffer(loss.id_);
  (*seed)[0] += 1.0;

  const auto& k = simd::active();
  for (std::int64_t id = loss.id_; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || !n.has_grad) continue;
    if (n.backward) n.backward(*this, static_cast<std::uint32_t>(id));
    if (n.param != nullptr) {
      Parameter& p = *n.param;
      if (p.grad.shape() != p.value.shape()) p.grad = Tensor(p.value.shape());
      k.axpy(1.0, n.grad.ptr(), p.grad.ptr(), p.grad.size());
    }
  }

  GradMap out;
  for (Node& n : nodes_) {
    if (n.param == nullptr) continue;
    if (n.param->grad.shape() != n.param->value.shape()) {
      n.param->grad = Tensor(n.param->value.shape());
    }
    out[n.param->name] = n.param->grad;
  }
  return out;
}

Tensor Tape::grad(Var v) const {
  check_owned(v, "grad");
  const Node& n = nodes_[v.id_];
  if (!n.has_grad) return Tensor(value_of(v.id_).shape());
  return n.grad;
}

// ---------------------------------------------------------------------------
// Broadcasting helpers

namespace {

enum class Bcast { same, rhs_row, lhs_row, rhs_scalar, lhs_scalar };

Bcast classify(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return Bcast::same;
  if (b.empty()) return Bcast::rhs_scalar;
  if (a.empty()) return Bcast::lhs_scalar;
  if (a.size() == 2 && b.size() == 1 && a[1] == b[0]) return Bcast::rhs_row;
  if (a.size() == 1 && b.size() == 2 && b[1] == a[0]) return Bcast::lhs_row;
  throw ShapeError(op, a, b);
}

// Index of operand a / b for flat output index i.
struct BcastIndex {
  Bcast mode;
  std::size_t row_len;
  std::size_t a(std::size_t i) const {
    switch (mode) {
      case Bcast::lhs_row:
        return i % row_len;
      case Bcast::lhs_scalar:
        return 0;
      default:
        return i;
    }
  }
  std::size_t b(std::size_t i) const {
    switch (mode) {
      case Bcast::rhs_row:
        return i % row_len;
      case Bcast::rhs_scalar:
        return 0;
      default:
        return i;
    }
  }
};

Shape out_shape(Bcast mode, const Shape& a, const Shape& b) {
  return (mode == Bcast::lhs_row || mode == Bcast::lhs_scalar) ? b : a;
}

std::size_t row_len(Bcast mode, const Shape& a, const Shape& b) {
  if (mode == Bcast::rhs_row) return b[0];
  if (mode == Bcast::lhs_row) return a[0];
  return 1;
}

// grad_operand[idx(i)] += contrib(i) for every output element.
template <typename Idx, typename F>
void scatter_grad(Tensor* buf, std::size_t n, Idx idx, F contrib) {
  if (buf == nullptr) return;
  double* g = buf->ptr();
  for (std::size_t i = 0; i < n; ++i) g[idx(i)] += contrib(i);
}

enum class BinOp { add, sub, mul, div };

const char* bin_name(BinOp op) {
  switch (op) {
    case BinOp::add:
      return "add";
    case BinOp::sub:
      return "sub";
    case BinOp::mul:
      return "mul";
    case BinOp::div:
      return "div";
  }
  return "?";
}

Var binary(Var a, Var b, BinOp op) {
  const char* name = bin_name(op);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Bcast mode = classify(av.shape(), bv.shape(), name);
  const BcastIndex ix{mode, row_len(mode, av.shape(), bv.shape())};
  Tensor out(out_shape(mode, av.shape(), bv.shape()));
  const std::size_t n = out.size();
  const double* pa = av.ptr();
  const double* pb = bv.ptr();
  double* po = out.ptr();
  const auto& k = simd::active();

  if (mode == Bcast::same && op == BinOp::add) {
    k.add(pa, pb, po, n);
  } else if (mode == Bcast::same && op == BinOp::mul) {
    k.mul(pa, pb, po, n);
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const double x = pa[ix.a(i)];
      const double y = pb[ix.b(i)];
      switch (op) {
        case BinOp::add:
          po[i] = x + y;
          break;
        case BinOp::sub:
          po[i] = x - y;
          break;
        case BinOp::mul:
          po[i] = x * y;
          break;
        case BinOp::div:
          po[i] = x / y;
          break;
      }
    }
  }

  return a.tape().record(
      std::move(out), {a, b},
      [op, ix, n](Tape& t, std::uint32_t self) {
        const std::uint32_t ia = t.input_id(self, 0);
        const std::uint32_t ib = t.input_id(self, 1);
        const double* g = t.grad_of(self).ptr();
        const double* va = t.value_of(ia).ptr();
        const double* vb = t.value_of(ib).ptr();
        Tensor* ga = t.grad_buffer(ia);
        Tensor* gb = t.grad_buffer(ib);
        auto ai = [&](std::size_t i) { return ix.a(i); };
        auto bi = [&](std::size_t i) { return ix.b(i); };
        switch (op) {
          case BinOp::add:
            scatter_grad(ga, n, ai, [&](std::size_t i) { return g[i]; });
            scatter_grad(gb, n, bi, [&](std::size_t i) { return g[i]; });
            break;
          case BinOp::sub:
            scatter_grad(ga, n, ai, [&](std::size_t i) { return g[i]; });
            scatter_grad(gb, n, bi, [&](std::size_t i) { return -g[i]; });
            break;
          case BinOp::mul:
            scatter_grad(ga, n, ai, [&](std::size_t i) { return g[i] * vb[ix.b(i)]; });
            scatter_grad(gb, n, bi, [&](std::size_t i) { return g[i] * va[ix.a(i)]; });
            break;
          case BinOp::div:
            scatter_grad(ga, n, ai, [&](std::size_t i) { return g[i] / vb[ix.b(i)]; });
            scatter_grad(gb, n, bi, [&](std::size_t i) {
              const double y = vb[ix.b(i)];
              return -g[i] * va[ix.a(i)] / (y * y);
            });
            break;
        }
      },
      name);
}

// Elementwise unary op: forward f(x), local derivative df(x, y).
template <typename F, typename DF>
Var unary(Var x, const char* name, F f, DF df) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return x.tape().record(
      std::move(out), {x},
      [df](Tape& t, std::uint32_t self) {
        const std::uint32_t ix = t.input_id(self, 0);
        Tensor* gx = t.grad_buffer(ix);
        if (gx == nullptr) return;
        const Tensor& g = t.grad_of(self);
        const Tensor& xv = t.value_of(ix);
        const Tensor& yv = t.value_of(self);
        for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * df(xv[i], yv[i]);
      },
      name);
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(op, "expected rank " + std::to_string(rank) + ", got " +
                             shape_to_string(t.shape()));
  }
}

}  // namespace

Var add(Var a, Var b) { return binary(a, b, BinOp::add); }
Var sub(Var a, Var b) { return binary(a, b, BinOp::sub); }
Var mul(Var a, Var b) { return binary(a, b, BinOp::mul); }
Var div(Var a, Var b) { return binary(a, b, BinOp::div); }

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0]) {
    throw ShapeError("matmul", av.shape(), bv.shape());
  }
  const std::size_t m = av.shape()[0];
  const std::size_t kk = av.shape()[1];
  const std::size_t n = bv.shape()[1];
  Tensor out(Shape{m, n});
  simd::active().gemm_nn(av.ptr(), bv.ptr(), out.ptr(), m, kk, n);
  return a.tape().record(
      std::move(out), {a, b},
      [m, kk, n](Tape& t, std::uint32_t self) {
        const std::uint32_t ia = t.input_id(self, 0);
        const std::uint32_t ib = t.input_id(self, 1);
        const Tensor& g = t.grad_of(self);
        const auto& kern = simd::active();
        if (Tensor* ga = t.grad_buffer(ia)) {
          // dA = dC * B^T
          kern.gemm_nt(g.ptr(), t.value_of(ib).ptr(), ga->ptr(), m, n, kk);
        }
        if (Tensor* gb = t.grad_buffer(ib)) {
          // dB = A^T * dC
          kern.gemm_tn(t.value_of(ia).ptr(), g.ptr(), gb->ptr(), kk, m, n);
        }
      },
      "matmul");
}

Var neg(Var x) {
  return unary(x, "neg", [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Var exp(Var x) {
  return unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log(Var x) {
  return unary(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var tanh(Var x) {
  return unary(
      x, "tanh", [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Var relu(Var x) {
  return unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var sqrt(Var x) {
  return unary(
      x, "sqrt",
      [](double v) { return v < 0.0 ? std::numeric_limits<double>::quiet_NaN() : std::sqrt(v); },
      [](double, double y) { return 0.5 / y; });
}

Var square(Var x) {
  return unary(
      x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Var scale(Var x, double c) {
  return unary(
      x, "scale", [c](double v) { return c * v; }, [c](double, double) { return c; });
}

Var add_scalar(Var x, double c) {
  return unary(
      x, "add_scalar", [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(Var x, std::size_t axis) {
  const Tensor& xv = x.value();
  if (xv.rank() == 1 && axis == 0) return sum_all(x);
  require_rank(xv, 2, "sum");
  if (axis > 1) throw ShapeError("sum", "axis " + std::to_string(axis) + " out of range");
  const std::size_t rows = xv.shape()[0];
  const std::size_t cols = xv.shape()[1];
  Tensor out(Shape{axis == 0 ? cols : rows});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[axis == 0 ? c : r] += xv[r * cols + c];
  }
  return x.tape().record(
      std::move(out), {x},
      [axis, rows, cols](Tape& t, std::uint32_t self) {
        Tensor* gx = t.grad_buffer(t.input_id(self, 0));
        if (gx == nullptr) return;
        const Tensor& g = t.grad_of(self);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) (*gx)[r * cols + c] += g[axis == 0 ? c : r];
        }
      },
      "sum");
}

Var mean(Var x, std::size_t axis) {
  const Tensor& xv = x.value();
  const std::size_t count = xv.rank() == 1 ? xv.size() : xv.dim(axis);
  return scale(sum(x, axis), 1.0 / static_cast<double>(count));
}

Var sum_all(Var x) {
  const Tensor& xv = x.value();
  double s = 0.0;
  for (double v : xv.data()) s += v;
  return x.tape().record(
      Tensor::scalar(s), {x},
      [](Tape& t, std::uint32_t self) {
        Tensor* gx = t.grad_buffer(t.input_id(self, 0));
        if (gx == nullptr) return;
        const double g = t.grad_of(self)[0];
        for (double& v : gx->data()) v += g;
      },
      "sum_all");
}

Var mean_all(Var x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.value().size())); }

// ---------------------------------------------------------------------------
// Shape ops

Var broadcast_rows(Var x, std::size_t rows) {
  const Tensor& xv = x.value();
  require_rank(xv, 1, "broadcast_rows");
  const std::size_t d = xv.size();
  Tensor out(Shape{rows, d});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy(xv.ptr(), xv.ptr() + d, out.ptr() + r * d);
  }
  return x.tape().record(
      std::move(out), {x},
      [rows, d](Tape& t, std::uint32_t self) {
        Tensor* gx = t.grad_buffer(t.input_id(self, 0));
        if (gx == nullptr) return;
        const Tensor& g = t.grad_of(self);
        for (std::size_t r = 0; r < rows; ++r) {
          simd::active().axpy(1.0, g.ptr() + r * d, gx->ptr(), d);
        }
      },
      "broadcast_rows");
}

Var mask_select(Var x, std::span<const double> mask) {
  const Tensor& xv = x.value();
  require_rank(xv, 2, "mask_select");
  if (mask.size() != xv.shape()[1]) {
    throw ShapeError("mask_select", xv.shape(), Shape{mask.size()});
  }
  std::vector<std::size_t> cols;
  for (std::size_t j = 0; j < mask.size(); ++j) {
    if (mask[j] != 0.0) cols.push_back(j);
  }
  if (cols.empty()) throw ShapeError("mask_select", "mask selects no columns");
  const std::size_t rows = xv.shape()[0];
  const std::size_t d = xv.shape()[1];
  Tensor out(Shape{rows, cols.size()});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < cols.size(); ++j) out[r * cols.size() + j] = xv[r * d + cols[j]];
  }
  return x.tape().record(
      std::move(out), {x},
      [cols = std::move(cols), rows, d](Tape& t, std::uint32_t self) {
        Tensor* gx = t.grad_buffer(t.input_id(self, 0));
        if (gx == nullptr) return;
        const Tensor& g = t.grad_of(self);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < cols.size(); ++j) {
            (*gx)[r * d + cols[j]] += g[r * cols.size() + j];
          }
        }
      },
      "mask_select");
}

Var concat_cols(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.shape()[0] != bv.shape()[0]) {
    throw ShapeError("concat_cols", av.shape(), bv.shape());
  }
  const std::size_t rows = av.shape()[0];
  const std::size_t p = av.shape()[1];
  const std::size_t q = bv.shape()[1];
  Tensor out(Shape{rows, p + q});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy(av.ptr() + r * p, av.ptr() + (r + 1) * p, out.ptr() + r * (p + q));
    std::copy(bv.ptr() + r * q, bv.ptr() + (r + 1) * q, out.ptr() + r * (p + q) + p);
  }
  return a.tape().record(
      std::move(out), {a, b},
      [rows, p, q](Tape& t, std::uint32_t self) {
        const Tensor& g = t.grad_of(self);
        if (Tensor* ga = t.grad_buffer(t.input_id(self, 0))) {
          for (std::size_t r = 0; r < rows; ++r) {
            simd::active().axpy(1.0, g.ptr() + r * (p + q), ga->ptr() + r * p, p);
          }
        }
        if (Tensor* gb = t.grad_buffer(t.input_id(self, 1))) {
          for (std::size_t r = 0; r < rows; ++r) {
            simd::active().axpy(1.0, g.ptr() + r * (p + q) + p, gb->ptr() + r * q, q);
          }
        }
      },
      "concat_cols");
}

Var log_softmax(Var logits) {
  const Tensor& xv = logits.value();
  require_rank(xv, 2, "log_softmax");
  const std::size_t rows = xv.shape()[0];
  const std::size_t k = xv.shape()[1];
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = xv.ptr() + r * k;
    const double mx = *std::max_element(x, x + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(x[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] = x[j] - lse;
  }
  return logits.tape().record(
      std::move(out), {logits},
      [rows, k](Tape& t, std::uint32_t self) {
        Tensor* gx = t.grad_buffer(t.input_id(self, 0));
        if (gx == nullptr) return;
        const Tensor& g = t.grad_of(self);
        const Tensor& y = t.value_of(self);
        for (std::size_t r = 0; r < rows; ++r) {
          double gs = 0.0;
          for (std::size_t j = 0; j < k; ++j) gs += g[r * k + j];
          for (std::size_t j = 0; j < k; ++j) {
            (*gx)[r * k + j] += g[r * k + j] - std::exp(y[r * k + j]) * gs;
          }
        }
      },
      "log_softmax");
}

Var pick(Var x, std::span<const std::size_t> columns) {
  const Tensor& xv = x.value();
  require_rank(xv, 2, "pick");
  const std::size_t rows = xv.shape()[0];
  const std::size_t k = xv.shape()[1];
  if (columns.size() != rows) throw ShapeError("pick", xv.shape(), Shape{columns.size()});
  std::vector<std::size_t> cols(columns.begin(), columns.end());
  Tensor out(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    if (cols[r] >= k) {
      throw ShapeError("pick", "column " + std::to_string(cols[r]) + " out of range for " +
                                   shape_to_string(xv.shape()));
    }
    out[r] = xv[r * k + cols[r]];
  }
  return x.tape().record(
      std::move(out), {x},
      [cols = std::move(cols), k](Tape& t, std::uint32_t self) {
        Tensor* gx = t.grad_buffer(t.input_id(self, 0));
        if (gx == nullptr) return;
        const Tensor& g = t.grad_of(self);
        for (std::size_t r = 0; r < cols.size(); ++r) (*gx)[r * k + cols[r]] += g[r];
      },
      "pick");
}

Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels) {
  return neg(mean_all(pick(log_softmax(logits), labels)));
}

}  // namespace tttflow
