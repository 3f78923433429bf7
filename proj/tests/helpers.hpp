#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <numbers>
#include <cstdint>
#include <vector>

#include "tttflow/autodiff.hpp"
#include "tttflow/backbone.hpp"
#include "tttflow/flow.hpp"
#include "tttflow/optim.hpp"
#include "tttflow/rng.hpp"
#include "tttflow/tensor.hpp"

namespace tttflow::testing {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

inline Tensor random_normal(const Shape& shape, Rng& rng, double sd = 1.0) {
  Tensor t(shape);
  for (double& v : t.data()) v = sd * rng.normal();
  return t;
}

inline void randomize(const std::vector<Parameter*>& params, Rng& rng, double amplitude) {
  for (Parameter* p : params) {
    for (double& v : p->value.data()) v = rng.uniform(-amplitude, amplitude);
  }
}

inline double sample_mean_log_prob(const FlowModel& flow, const Tensor& features) {
  const Tensor lp = flow.log_prob(features);
  double s = 0.0;
  for (double v : lp.data()) s += v;
  return s / static_cast<double>(lp.size());
}

// L_cls + beta * L_uns with every backbone and flow parameter trainable and
// BN in train mode without touching the running statistics.
inline Var joint_objective(Tape& tape, Backbone& b, FlowModel& flow, Var x,
                           const std::vector<std::size_t>& labels, double beta) {
  const std::size_t split = b.split_stage();
  const Var feats = b.extract_features(tape, x, split, BnMode::train, Binding::trainable, false);
  const Var cls = softmax_cross_entropy(
      b.logits_from(tape, feats, split, BnMode::train, Binding::trainable, false), labels);
  return cls + scale(flow.nll_loss(tape, feats, Binding::trainable), beta);
}

// Multinomial logistic regression fit by full-batch gradient descent on plain
// arrays. Shares no code with the library's autodiff or training loop.
struct LogisticOracle {
  std::size_t classes = 2;
  std::size_t dim = 0;
  std::vector<double> w;  // [classes][dim + 1], last column is the bias

  std::vector<double> scores(const double* x) const {
    std::vector<double> s(classes, 0.0);
    for (std::size_t k = 0; k < classes; ++k) {
      double acc = w[k * (dim + 1) + dim];
      for (std::size_t j = 0; j < dim; ++j) acc += w[k * (dim + 1) + j] * x[j];
      s[k] = acc;
    }
    return s;
  }

  std::size_t predict(const double* x) const {
    const auto s = scores(x);
    std::size_t best = 0;
    for (std::size_t k = 1; k < classes; ++k) {
      if (s[k] > s[best]) best = k;
    }
    return best;
  }

  void fit(const std::vector<double>& x, const std::vector<std::size_t>& y, std::size_t n,
           std::size_t steps, double lr) {
    w.assign(classes * (dim + 1), 0.0);
    std::vector<double> g(w.size());
    for (std::size_t step = 0; step < steps; ++step) {
      std::fill(g.begin(), g.end(), 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        const double* xi = x.data() + i * dim;
        auto s = scores(xi);
        double m = s[0];
        for (double v : s) m = std::max(m, v);
        double z = 0.0;
        for (double& v : s) z += (v = std::exp(v - m));
        for (std::size_t k = 0; k < classes; ++k) {
          const double r = s[k] / z - (y[i] == k ? 1.0 : 0.0);
          for (std::size_t j = 0; j < dim; ++j) g[k * (dim + 1) + j] += r * xi[j];
          g[k * (dim + 1) + dim] += r;
        }
      }
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i] / static_cast<double>(n);
    }
  }

  double accuracy(const std::vector<double>& x, const std::vector<std::size_t>& y,
                  std::size_t n) const {
    std::size_t hit = 0;
    for (std::size_t i = 0; i < n; ++i) hit += predict(x.data() + i * dim) == y[i] ? 1 : 0;
    return static_cast<double>(hit) / static_cast<double>(n);
  }
};

// ---- flow oracles ------------------------------------------------------------------

inline constexpr double kLog2Pi = 1.8378770664093453;  // log(2 pi)

inline FlowModel random_flow(std::size_t dim, std::size_t layers, std::uint64_t seed,
                             double amplitude = 0.5, std::size_t hidden = 16) {
  FlowConfig cfg;
  cfg.dim = dim;
  cfg.layers = layers;
  cfg.hidden = hidden;
  FlowModel f(cfg, seed);
  Rng rng(seed + 1);
  randomize(f.parameters(), rng, amplitude);
  return f;
}

// Every parameter redrawn from U(+-1/sqrt(fan_in)), the scale of a fresh
// conditioner, including the zero-initialized output heads.
inline FlowModel init_scale_flow(std::size_t dim, std::size_t layers, std::uint64_t seed,
                                 std::size_t hidden = 64) {
  FlowConfig cfg;
  cfg.dim = dim;
  cfg.layers = layers;
  cfg.hidden = hidden;
  FlowModel f(cfg, seed);
  Rng rng(seed + 1);
  for (CouplingLayer& l : f.layers()) {
    for (Conditioner* c : {&l.scale_net(), &l.translate_net()}) {
      for (Linear* lin : {&c->first.inner, &c->first.outer, &c->second.inner, &c->second.outer,
                          &c->head}) {
        const double a = 1.0 / std::sqrt(static_cast<double>(lin->in_features()));
        for (double& v : lin->weight.value.data()) v = rng.uniform(-a, a);
        for (double& v : lin->bias.value.data()) v = rng.uniform(-a, a);
      }
    }
  }
  return f;
}

// Jacobian of x -> z by central differences, row i = dz_i/dx.
inline Eigen::MatrixXd fd_jacobian(const std::function<Tensor(const Tensor&)>& g, const Tensor& x,
                                   double h) {
  const std::size_t d = x.size();
  Eigen::MatrixXd j(d, d);
  for (std::size_t c = 0; c < d; ++c) {
    Tensor xp = x, xm = x;
    xp[c] += h;
    xm[c] -= h;
    const Tensor zp = g(xp), zm = g(xm);
    for (std::size_t r = 0; r < d; ++r) j(r, c) = (zp[r] - zm[r]) / (2.0 * h);
  }
  return j;
}

inline double log_normal(const Tensor& z) {
  double s = 0.0;
  for (double v : z.data()) s += v * v;
  return -0.5 * (s + static_cast<double>(z.size()) * kLog2Pi);
}

inline Tensor two_moons(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Tensor x(Shape{n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    const double t = rng.uniform(0.0, std::numbers::pi);
    const bool upper = i % 2 == 0;
    const double a = upper ? std::cos(t) : 1.0 - std::cos(t);
    const double b = upper ? std::sin(t) : 0.5 - std::sin(t);
    x.at(i, 0) = a - 0.5 + 0.1 * rng.normal();
    x.at(i, 1) = 2.0 * (b - 0.25) + 0.1 * rng.normal();
  }
  return x;
}

inline void train_flow_steps(FlowModel& f, const Tensor& data, std::size_t steps, double lr,
                             std::size_t batch = 128) {
  Sgd opt(f.parameters(), 0.0);
  Rng rng(3);
  const std::size_t n = data.rows();
  std::vector<std::size_t> idx(batch);
  for (std::size_t s = 0; s < steps; ++s) {
    for (auto& i : idx) i = rng.index(n);
    opt.zero_grad();
    Tape tape;
    tape.backward(f.nll_loss(tape, tape.constant(data.gather_rows(idx)), Binding::trainable));
    opt.step(lr);
  }
}

// Trapezoidal rule of exp(log_prob) on [-8, 8]^2 with step 0.05.
inline double integrate_density(const FlowModel& f) {
  const double lo = -8.0, h = 0.05;
  const std::size_t m = 321;
  Tensor grid(Shape{m * m, 2});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      grid.at(i * m + j, 0) = lo + h * static_cast<double>(i);
      grid.at(i * m + j, 1) = lo + h * static_cast<double>(j);
    }
  }
  const Tensor lp = f.log_prob(grid);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double wi = (i == 0 || i == m - 1) ? 0.5 : 1.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double wj = (j == 0 || j == m - 1) ? 0.5 : 1.0;
      total += wi * wj * std::exp(lp[i * m + j]);
    }
  }
  return total * h * h;
}

}  // namespace tttflow::testing
