#include "tttflow/nn.hpp"

#include <cmath>

namespace tttflow {

Var bind(Tape& tape, Parameter& p, Binding binding) {
  return binding == Binding::trainable ? tape.param(p) : tape.frozen(p);
}

Linear::Linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng,
               bool with_bias)
    : has_bias(with_bias) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Tensor w(Shape{in, out});
  for (double& v : w.data()) v = rng.uniform(-bound, bound);
  weight = Parameter(name + ".weight", std::move(w));
  if (!has_bias) return;
  Tensor b(Shape{out});
  for (double& v : b.data()) v = rng.uniform(-bound, bound);
  bias = Parameter(name + ".bias", std::move(b));
}

Var Linear::forward(Tape& tape, Var x, Binding binding) {
  const Var y = matmul(x, bind(tape, weight, binding));
  return has_bias ? y + bind(tape, bias, binding) : y;
}

Var Linear::forward(Tape& tape, Var x) const {
  const Var y = matmul(x, tape.frozen(weight));
  return has_bias ? y + tape.frozen(bias) : y;
}

}  // namespace tttflow
