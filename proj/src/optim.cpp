#include "tttflow/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "tttflow/simd/kernels.hpp"

namespace tttflow {

Sgd::Sgd(ParamRefs params, double momentum) : params_(std::move(params)), momentum_(momentum) {
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw std::invalid_argument("SGD momentum must lie in [0, 1)");
  }
  if (momentum_ > 0.0) {
    velocity_.reserve(params_.size());
    for (const Parameter* p : params_) velocity_.emplace_back(p->value.shape());
  }
}

void Sgd::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

void Sgd::step(double lr) {
  const auto& k = simd::active();
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    if (p.grad.shape() != p.value.shape()) continue;  // never touched by backward
    if (momentum_ > 0.0) {
      Tensor& v = velocity_[i];
      for (std::size_t j = 0; j < v.size(); ++j) v[j] = momentum_ * v[j] + p.grad[j];
      k.axpy(-lr, v.ptr(), p.value.ptr(), v.size());
    } else {
      k.axpy(-lr, p.grad.ptr(), p.value.ptr(), p.value.size());
    }
  }
}

double StepSchedule::at(std::size_t epoch) const {
  double lr = lr0;
  for (std::size_t m : milestones) {
    if (epoch >= m) lr /= factor;
  }
  return lr;
}

double CosineSchedule::at(std::size_t epoch) const {
  if (total == 0) return lr0;
  const double t = static_cast<double>(std::min(epoch, total)) / static_cast<double>(total);
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

}  // namespace tttflow
