#include "tttflow/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace tttflow {

Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                  double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_difference_gradient: h must be positive");
  Tensor probe = x;
  Tensor grad(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

double relative_error(double a, double b, double floor) {
  const double denom = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / denom;
}

double max_relative_error(const Tensor& a, const Tensor& b, double floor) {
  if (a.shape() != b.shape()) throw ShapeError("max_relative_error", a.shape(), b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, relative_error(a[i], b[i], floor));
  return m;
}

GradCheckReport check_parameter_gradients(const std::vector<Parameter*>& params,
                                          const std::function<double(bool)>& loss, double h) {
  for (Parameter* p : params) p->zero_grad();
  loss(true);
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->grad);

  GradCheckReport report;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double orig = p.value[i];
      p.value[i] = orig + h;
      const double fp = loss(false);
      p.value[i] = orig - h;
      const double fm = loss(false);
      p.value[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double err = relative_error(analytic[k][i], numeric);
      ++report.checked;
      if (err >= report.max_rel_error) {
        report.max_rel_error = err;
        report.worst = {p.name, i, analytic[k][i], numeric, err};
      }
    }
  }
  return report;
}

}  // namespace tttflow
