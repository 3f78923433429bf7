#pragma once

#include <string>
#include <vector>

#include "tttflow/autodiff.hpp"
#include "tttflow/rng.hpp"

namespace tttflow {

// How a module's parameters enter a tape: as gradient-receiving leaves or as
// constants (frozen heads, frozen extractors).
enum class Binding { trainable, frozen };

Var bind(Tape& tape, Parameter& p, Binding binding);

using ParamRefs = std::vector<Parameter*>;
using ConstParamRefs = std::vector<const Parameter*>;

// y = x W + b with W stored [in, out]; without bias, y = x W.
struct Linear {
  Parameter weight;
  Parameter bias;
  bool has_bias = true;

  Linear() = default;
  // Weights and bias ~ U(-1/sqrt(in), 1/sqrt(in)).
  Linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng,
         bool with_bias = true);

  std::size_t in_features() const { return weight.value.dim(0); }
  std::size_t out_features() const { return weight.value.dim(1); }

  Var forward(Tape& tape, Var x, Binding binding);
  // Constant-parameter forward on an existing tape, for callers holding a
  // const module.
  Var forward(Tape& tape, Var x) const;

  void collect(ParamRefs& out) {
    out.push_back(&weight);
    if (has_bias) out.push_back(&bias);
  }
  void collect(ConstParamRefs& out) const {
    out.push_back(&weight);
    if (has_bias) out.push_back(&bias);
  }
};

}  // namespace tttflow
