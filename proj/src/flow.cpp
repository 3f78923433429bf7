#include "tttflow/flow.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace tttflow {

std::string_view mask_kind_name(MaskKind kind) {
  return kind == MaskKind::checkerboard ? "checkerboard" : "channelwise";
}

MaskKind parse_mask_kind(std::string_view name) {
  if (name == "checkerboard") return MaskKind::checkerboard;
  if (name == "channelwise") return MaskKind::channelwise;
  throw std::invalid_argument("unknown mask kind '" + std::string(name) + "'");
}

std::vector<double> coupling_mask(MaskKind kind, std::size_t dim, std::size_t layer) {
  if (dim < 2) throw std::invalid_argument("coupling mask needs dim >= 2");
  std::vector<double> mask(dim);
  for (std::size_t i = 0; i < dim; ++i) {
    const bool on = kind == MaskKind::checkerboard ? (i % 2 == 0) : (i < dim / 2);
    mask[i] = (on != (layer % 2 == 1)) ? 1.0 : 0.0;
  }
  return mask;
}

// ---------------------------------------------------------------------------

ResBlock::ResBlock(const std::string& name, std::size_t dim, std::size_t hidden, Rng& rng)
    : inner(name + ".inner", dim, hidden, rng), outer(name + ".outer", hidden, dim, rng) {}

Var ResBlock::forward(Tape& tape, Var x, Binding binding) {
  return x + outer.forward(tape, tanh(inner.forward(tape, x, binding)), binding);
}

Conditioner::Conditioner(const std::string& name, std::size_t dim, std::size_t hidden, Rng& rng)
    : first(name + ".res0", dim, hidden, rng),
      second(name + ".res1", dim, hidden, rng),
      head(name + ".head", dim, dim, rng) {
  head.weight.value.fill(0.0);
  head.bias.value.fill(0.0);
}

Var Conditioner::forward(Tape& tape, Var x, Binding binding) {
  return head.forward(tape, second.forward(tape, first.forward(tape, x, binding), binding),
                      binding);
}

void Conditioner::collect(ParamRefs& out) {
  first.inner.collect(out);
  first.outer.collect(out);
  second.inner.collect(out);
  second.outer.collect(out);
  head.collect(out);
}

// ---------------------------------------------------------------------------

CouplingLayer::CouplingLayer(const std::string& name, std::vector<double> mask,
                             std::size_t hidden, double scale_clamp, Rng& rng)
    : mask_(std::move(mask)), scale_clamp_(scale_clamp) {
  bool any_on = false;
  bool any_off = false;
  for (double m : mask_) {
    if (m != 0.0 && m != 1.0) throw std::invalid_argument("coupling mask must be binary");
    any_on = any_on || m == 1.0;
    any_off = any_off || m == 0.0;
  }
  if (!any_on || !any_off) {
    throw std::invalid_argument("coupling mask must be neither all-zero nor all-one");
  }
  if (!(scale_clamp > 0.0)) throw std::invalid_argument("scale_clamp must be positive");
  inv_mask_.resize(mask_.size());
  for (std::size_t i = 0; i < mask_.size(); ++i) inv_mask_[i] = 1.0 - mask_[i];
  scale_net_ = Conditioner(name + ".scale", mask_.size(), hidden, rng);
  translate_net_ = Conditioner(name + ".translate", mask_.size(), hidden, rng);
}

std::pair<Var, Var> CouplingLayer::conditioners(Tape& tape, Var x, Binding binding) {
  const Var mask = tape.constant(Tensor(Shape{mask_.size()}, mask_));
  const Var inv_mask = tape.constant(Tensor(Shape{inv_mask_.size()}, inv_mask_));
  const Var conditioning = x * mask;
  const Var s = scale(tanh(scale_net_.forward(tape, conditioning, binding)), scale_clamp_) * inv_mask;
  const Var t = translate_net_.forward(tape, conditioning, binding) * inv_mask;
  return {s, t};
}

CouplingLayer::Output CouplingLayer::forward(Tape& tape, Var x, Binding binding,
                                             std::size_t layer_index) {
  if (x.value().rank() != 2 || x.value().shape()[1] != mask_.size()) {
    throw ShapeError("coupling_forward", x.value().shape(), Shape{mask_.size()});
  }
  try {
    auto [s, t] = conditioners(tape, x, binding);
    const Var z = x * exp(s) + t;
    const Var logdet = sum(s, 1);
    return {z, logdet};
  } catch (const CouplingError&) {
    throw;
  } catch (const NumericError& e) {
    throw CouplingError(layer_index, e.row().value_or(0));
  }
}

CouplingLayer::Output CouplingLayer::forward(Tape& tape, Var x, std::size_t layer_index) const {
  // Frozen binding never writes to the parameters.
  return const_cast<CouplingLayer*>(this)->forward(tape, x, Binding::frozen, layer_index);
}

Tensor CouplingLayer::inverse(const Tensor& z) const {
  if (z.rank() != 2 || z.shape()[1] != mask_.size()) {
    throw ShapeError("coupling_inverse", z.shape(), Shape{mask_.size()});
  }
  Tape tape;
  // m*x == m*z, so the conditioners see the same input as in forward.
  auto [s, t] = const_cast<CouplingLayer*>(this)->conditioners(tape, tape.constant(z),
                                                                 Binding::frozen);
  const Tensor& sv = s.value();
  const Tensor& tv = t.value();
  Tensor x(z.shape());
  for (std::size_t i = 0; i < z.size(); ++i) x[i] = (z[i] - tv[i]) * std::exp(-sv[i]);
  const std::size_t bad = x.first_non_finite();
  if (bad != x.size()) throw NumericError("coupling_inverse", bad, bad / mask_.size());
  return x;
}

void CouplingLayer::collect(ParamRefs& out) {
  scale_net_.collect(out);
  translate_net_.collect(out);
}

// ---------------------------------------------------------------------------

FlowModel::FlowModel(const FlowConfig& config, Rng& rng) : config_(config) {
  if (config.layers < 1) throw std::invalid_argument("flow needs at least one coupling layer");
  if (config.hidden < 1) throw std::invalid_argument("flow hidden width must be positive");
  layers_.reserve(config.layers);
  for (std::size_t l = 0; l < config.layers; ++l) {
    layers_.emplace_back("flow.layer" + std::to_string(l), coupling_mask(config.mask, config.dim, l),
                         config.hidden, config.scale_clamp, rng);
  }
}

FlowModel::FlowModel(const FlowConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  *this = FlowModel(config, rng);
}

FlowModel::Output FlowModel::forward(Tape& tape, Var x, Binding binding) {
  Var z = x;
  Var logdet;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    auto out = layers_[l].forward(tape, z, binding, l);
    z = out.z;
    logdet = l == 0 ? out.logdet : logdet + out.logdet;
  }
  return {z, logdet};
}

FlowModel::Output FlowModel::forward(Tape& tape, Var x) const {
  return const_cast<FlowModel*>(this)->forward(tape, x, Binding::frozen);
}

Var standard_normal_log_prob(Var z) {
  const double d = static_cast<double>(z.value().shape().back());
  const double log_2pi = std::log(2.0 * std::numbers::pi);
  return add_scalar(scale(sum(square(z), 1), -0.5), -0.5 * d * log_2pi);
}

Var FlowModel::log_prob(Tape& tape, Var x, Binding binding) {
  auto out = forward(tape, x, binding);
  return standard_normal_log_prob(out.z) + out.logdet;
}

Var FlowModel::log_prob(Tape& tape, Var x) const {
  return const_cast<FlowModel*>(this)->log_prob(tape, x, Binding::frozen);
}

Tensor FlowModel::log_prob(const Tensor& x) const {
  Tape tape;
  return log_prob(tape, tape.constant(x)).value();
}

Var FlowModel::nll_loss(Tape& tape, Var x, Binding binding) {
  if (x.value().rank() != 2) throw ShapeError("nll_loss", "expected a [batch, dim] input");
  return neg(mean_all(log_prob(tape, x, binding)));
}

Var FlowModel::nll_loss(Tape& tape, Var x) const {
  return const_cast<FlowModel*>(this)->nll_loss(tape, x, Binding::frozen);
}

Tensor FlowModel::forward_values(const Tensor& x) const {
  Tape tape;
  return forward(tape, tape.constant(x)).z.value();
}

Tensor FlowModel::inverse(const Tensor& z) const {
  Tensor x = z;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) x = it->inverse(x);
  return x;
}

Tensor FlowModel::sample(std::size_t n, std::uint64_t seed) const {
  if (n < 1) throw std::invalid_argument("sample: n must be >= 1");
  Rng rng(seed);
  Tensor z(Shape{n, config_.dim});
  for (double& v : z.data()) v = rng.normal();
  return inverse(z);
}

ParamRefs FlowModel::parameters() {
  ParamRefs out;
  for (auto& layer : layers_) layer.collect(out);
  return out;
}

ConstParamRefs FlowModel::parameters() const {
  ParamRefs mut = const_cast<FlowModel*>(this)->parameters();
  return ConstParamRefs(mut.begin(), mut.end());
}

}  // namespace tttflow
