#pragma once

#include <functional>
#include <vector>

#include "tttflow/autodiff.hpp"
#include "tttflow/tensor.hpp"

namespace tttflow {

// Central-difference gradient of a scalar function:
//   (f(x + h e_i) - f(x - h e_i)) / 2h  for every coordinate i.
// Independent of the autodiff engine; used as the test oracle for it.
Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                  double h);

// |a - b| / max(|a|, |b|, floor)
double relative_error(double a, double b, double floor = 1e-8);
double max_relative_error(const Tensor& a, const Tensor& b, double floor = 1e-8);

struct GradCheckEntry {
  std::string parameter;
  std::size_t index;
  double analytic;
  double numeric;
  double rel_error;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  GradCheckEntry worst{};
};

// Compares backward() gradients of `loss` (which must build a fresh tape, bind
// `params` with Tape::param and return the loss value) against central
// differences over every entry of every parameter.
GradCheckReport check_parameter_gradients(
    const std::vector<Parameter*>& params,
    const std::function<double(bool with_backward)>& loss, double h);

}  // namespace tttflow
