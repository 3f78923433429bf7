#include "tttflow/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace tttflow {

std::string_view bn_mode_name(BnMode mode) { return mode == BnMode::train ? "train" : "eval"; }

BnMode parse_bn_mode(std::string_view name) {
  if (name == "train") return BnMode::train;
  if (name == "eval") return BnMode::eval;
  throw std::invalid_argument("unknown batch-norm mode '" + std::string(name) + "'");
}

BatchNorm::BatchNorm(const std::string& name_, std::size_t features, double momentum_,
                     double epsilon_)
    : gamma(name_ + ".gamma", Tensor(Shape{features}, 1.0)),
      beta(name_ + ".beta", Tensor(Shape{features}, 0.0)),
      running_mean(Shape{features}, 0.0),
      running_var(Shape{features}, 1.0),
      momentum(momentum_),
      epsilon(epsilon_),
      name(name_) {
  if (!(momentum > 0.0 && momentum < 1.0)) {
    throw std::invalid_argument("batch-norm momentum must lie in (0, 1)");
  }
  if (!(epsilon > 0.0)) throw std::invalid_argument("batch-norm epsilon must be positive");
}

Var BatchNorm::forward(Tape& tape, Var x, BnMode mode, Binding binding, bool update_stats) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || xv.shape()[1] != gamma.value.size()) {
    throw ShapeError("batchnorm", xv.shape(), gamma.value.shape());
  }
  Var normalized;
  if (mode == BnMode::train) {
    if (xv.shape()[0] < 2) {
      throw ShapeError("batchnorm", "train mode needs a batch of at least 2 (variance undefined)");
    }
    const Var mu = mean(x, 0);
    const Var centered = x - mu;
    const Var var = mean(square(centered), 0);
    normalized = centered / sqrt(add_scalar(var, epsilon));
    if (update_stats) {
      const Tensor& bm = mu.value();
      const Tensor& bv = var.value();
      for (std::size_t j = 0; j < bm.size(); ++j) {
        running_mean[j] = (1.0 - momentum) * running_mean[j] + momentum * bm[j];
        running_var[j] = (1.0 - momentum) * running_var[j] + momentum * bv[j];
      }
    }
  } else {
    Tensor inv_std(running_var.shape());
    for (std::size_t j = 0; j < inv_std.size(); ++j) {
      inv_std[j] = 1.0 / std::sqrt(running_var[j] + epsilon);
    }
    normalized = (x - tape.constant(running_mean)) * tape.constant(std::move(inv_std));
  }
  return normalized * bind(tape, gamma, binding) + bind(tape, beta, binding);
}

Var Stage::forward(Tape& tape, Var x, BnMode mode, Binding binding, bool update_stats) {
  return tanh(bn.forward(tape, linear.forward(tape, x, binding), mode, binding, update_stats));
}

void Stage::collect(ParamRefs& out) {
  linear.collect(out);
  out.push_back(&bn.gamma);
  out.push_back(&bn.beta);
}

// ---------------------------------------------------------------------------

Backbone::Backbone(const BackboneConfig& config, Rng& rng) : config_(config) {
  if (config.input_dim < 1 || config.num_classes < 2) {
    throw std::invalid_argument("backbone needs input_dim >= 1 and num_classes >= 2");
  }
  if (config.split_stage < 1 || config.split_stage > kStages) {
    throw std::invalid_argument("split_stage must be in {1, 2, 3}");
  }
  std::size_t in = config.input_dim;
  for (std::size_t s = 0; s < kStages; ++s) {
    const std::string name = "stage" + std::to_string(s + 1);
    // No bias: the batch-norm shift that follows subsumes it.
    stages_[s].linear = Linear(name + ".linear", in, config.widths[s], rng, false);
    stages_[s].bn = BatchNorm(name + ".bn", config.widths[s], config.bn_momentum, config.bn_epsilon);
    in = config.widths[s];
  }
  head_ = Linear("head", in, config.num_classes, rng);
}

Backbone::Backbone(const BackboneConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  *this = Backbone(config, rng);
}

std::size_t Backbone::feature_dim(std::size_t upto) const {
  if (upto < 1 || upto > kStages) throw std::invalid_argument("stage index must be in {1, 2, 3}");
  return config_.widths[upto - 1];
}

Var Backbone::extract_features(Tape& tape, Var x, std::size_t upto, BnMode mode,
                               Binding binding, bool update_stats) {
  if (upto < 1 || upto > kStages) {
    throw std::invalid_argument("extract_features: stage index " + std::to_string(upto) +
                                " not in {1, 2, 3}");
  }
  Var h = x;
  for (std::size_t s = 0; s < upto; ++s) h = stages_[s].forward(tape, h, mode, binding, update_stats);
  return h;
}

Var Backbone::logits_from(Tape& tape, Var features, std::size_t upto, BnMode mode,
                          Binding binding, bool update_stats) {
  if (upto < 1 || upto > kStages) throw std::invalid_argument("stage index must be in {1, 2, 3}");
  Var h = features;
  for (std::size_t s = upto; s < kStages; ++s) {
    h = stages_[s].forward(tape, h, mode, binding, update_stats);
  }
  return head_logits(tape, h, binding);
}

Var Backbone::logits(Tape& tape, Var x, BnMode mode, Binding binding, bool update_stats) {
  return logits_from(tape, extract_features(tape, x, kStages, mode, binding, update_stats), kStages,
                     mode, binding, update_stats);
}

Var Backbone::head_logits(Tape& tape, Var features, Binding binding) {
  return head_.forward(tape, features, binding);
}

Tensor Backbone::features(const Tensor& x, std::size_t upto) const {
  Tape tape;
  // Eval mode with frozen binding reads parameters and running stats only.
  auto* self = const_cast<Backbone*>(this);
  return self->extract_features(tape, tape.constant(x), upto, BnMode::eval, Binding::frozen)
      .value();
}

Tensor Backbone::logits(const Tensor& x) const {
  Tape tape;
  auto* self = const_cast<Backbone*>(this);
  return self->logits(tape, tape.constant(x), BnMode::eval, Binding::frozen).value();
}

Tensor Backbone::classify(const Tensor& features) const {
  Tape tape;
  return softmax_rows(head_.forward(tape, tape.constant(features)).value());
}

std::vector<std::size_t> Backbone::predict(const Tensor& x) const {
  return argmax_rows(logits(x));
}

ParamRefs Backbone::parameters() {
  ParamRefs out = stage_parameters(1, kStages);
  head_.collect(out);
  return out;
}

ParamRefs Backbone::stage_parameters(std::size_t first, std::size_t last) {
  ParamRefs out;
  for (std::size_t s = first; s <= last && s <= kStages; ++s) stages_[s - 1].collect(out);
  return out;
}

ParamRefs Backbone::head_parameters() {
  ParamRefs out;
  head_.collect(out);
  return out;
}

ConstParamRefs Backbone::parameters() const {
  ParamRefs mut = const_cast<Backbone*>(this)->parameters();
  return ConstParamRefs(mut.begin(), mut.end());
}

std::vector<std::pair<std::string, Tensor*>> Backbone::buffers() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (auto& st : stages_) {
    out.emplace_back(st.bn.name + ".running_mean", &st.bn.running_mean);
    out.emplace_back(st.bn.name + ".running_var", &st.bn.running_var);
  }
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> Backbone::buffers() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [name, ptr] : const_cast<Backbone*>(this)->buffers()) out.emplace_back(name, ptr);
  return out;
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> argmax_rows(const Tensor& scores) {
  const std::size_t rows = scores.rows();
  const std::size_t cols = scores.cols();
  std::vector<std::size_t> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = scores.ptr() + r * cols;
    // max_element returns the first maximum, i.e. the lowest index on ties.
    out[r] = static_cast<std::size_t>(std::max_element(row, row + cols) - row);
  }
  return out;
}

Tensor softmax_rows(const Tensor& logits) {
  Tensor out(logits.shape());
  const std::size_t rows = logits.rows();
  const std::size_t cols = logits.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = logits.ptr() + r * cols;
    const double mx = *std::max_element(x, x + cols);
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      out[r * cols + j] = std::exp(x[j] - mx);
      s += out[r * cols + j];
    }
    for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] /= s;
  }
  return out;
}

}  // namespace tttflow
