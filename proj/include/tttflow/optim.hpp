#pragma once

#include <cstddef>
#include <vector>

#include "tttflow/nn.hpp"

namespace tttflow {

// SGD with heavy-ball momentum:
//   v <- momentum * v + g;  p <- p - lr * v
// momentum == 0 gives plain SGD and keeps no state.
class Sgd {
 public:
  Sgd(ParamRefs params, double momentum = 0.0);

  void zero_grad();
  void step(double lr);

  const ParamRefs& params() const noexcept { return params_; }
  double momentum() const noexcept { return momentum_; }

 private:
  ParamRefs params_;
  double momentum_;
  std::vector<Tensor> velocity_;
};

// lr0 / factor^(number of milestones <= epoch). Milestones strictly increasing.
struct StepSchedule {
  double lr0 = 0.1;
  std::vector<std::size_t> milestones;
  double factor = 10.0;

  double at(std::size_t epoch) const;
};

// lr0 * 0.5 * (1 + cos(pi * t / total)), t = completed epochs.
struct CosineSchedule {
  double lr0 = 0.01;
  std::size_t total = 1;

  double at(std::size_t epoch) const;
};

}  // namespace tttflow
