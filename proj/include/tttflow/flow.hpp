#pragma once

// RealNVP-style normalizing flow over feature vectors.
//
// Each coupling layer keeps the masked coordinates (mask == 1) and applies an
// elementwise affine map to the rest, conditioned on the masked input:
//
//   z = m*x + (1-m)*(x*exp(s(m*x)) + t(m*x)),   s = clamp * tanh(raw)
//   log|det dz/dx| = sum over unmasked coordinates of s
//
// The model log-likelihood is log N(g(x); 0, I) plus the summed log-dets.

#include <cstdint>
#include <string>
#include <vector>

#include "tttflow/autodiff.hpp"
#include "tttflow/nn.hpp"
#include "tttflow/rng.hpp"

namespace tttflow {

enum class MaskKind { checkerboard, channelwise };

std::string_view mask_kind_name(MaskKind kind);
MaskKind parse_mask_kind(std::string_view name);

// Mask of coupling layer `layer`: checkerboard is 1 on even indices for layer
// 0; channelwise is 1 on the first half. Both flip on every layer.
std::vector<double> coupling_mask(MaskKind kind, std::size_t dim, std::size_t layer);

struct FlowConfig {
  std::size_t dim = 16;
  std::size_t layers = 3;
  std::size_t hidden = 64;
  double scale_clamp = 2.0;
  MaskKind mask = MaskKind::checkerboard;
};

// x + W2 tanh(W1 x + b1) + b2
struct ResBlock {
  Linear inner;
  Linear outer;

  ResBlock() = default;
  ResBlock(const std::string& name, std::size_t dim, std::size_t hidden, Rng& rng);
  Var forward(Tape& tape, Var x, Binding binding);
};

// Two residual blocks followed by a linear output head. The head starts at
// zero so a fresh coupling layer is the identity map.
struct Conditioner {
  ResBlock first;
  ResBlock second;
  Linear head;

  Conditioner() = default;
  Conditioner(const std::string& name, std::size_t dim, std::size_t hidden, Rng& rng);
  Var forward(Tape& tape, Var x, Binding binding);
  void collect(ParamRefs& out);
};

class CouplingLayer {
 public:
  struct Output {
    Var z;
    Var logdet;  // [batch]
  };

  CouplingLayer() = default;
  CouplingLayer(const std::string& name, std::vector<double> mask, std::size_t hidden,
                double scale_clamp, Rng& rng);

  // Throws CouplingError naming the first sample whose z or logdet is non-finite.
  Output forward(Tape& tape, Var x, Binding binding, std::size_t layer_index = 0);
  Output forward(Tape& tape, Var x, std::size_t layer_index = 0) const;
  Tensor inverse(const Tensor& z) const;

  const std::vector<double>& mask() const noexcept { return mask_; }
  std::size_t dim() const noexcept { return mask_.size(); }
  double scale_clamp() const noexcept { return scale_clamp_; }
  Conditioner& scale_net() noexcept { return scale_net_; }
  Conditioner& translate_net() noexcept { return translate_net_; }

  void collect(ParamRefs& out);

 private:
  // Masked scale (already clamped) and shift for a conditioning input.
  std::pair<Var, Var> conditioners(Tape& tape, Var x, Binding binding);

  std::vector<double> mask_;
  std::vector<double> inv_mask_;
  Conditioner scale_net_;
  Conditioner translate_net_;
  double scale_clamp_ = 2.0;
};

class FlowModel {
 public:
  struct Output {
    Var z;
    Var logdet;  // summed over layers, [batch]
  };

  FlowModel() = default;
  FlowModel(const FlowConfig& config, Rng& rng);
  FlowModel(const FlowConfig& config, std::uint64_t seed);

  const FlowConfig& config() const noexcept { return config_; }
  std::size_t dim() const noexcept { return config_.dim; }
  std::vector<CouplingLayer>& layers() noexcept { return layers_; }
  const std::vector<CouplingLayer>& layers() const noexcept { return layers_; }

  Output forward(Tape& tape, Var x, Binding binding);
  Output forward(Tape& tape, Var x) const;

  // Per-sample log-likelihood, [batch]. Differentiable w.r.t. x and (when
  // trainable) the flow parameters.
  Var log_prob(Tape& tape, Var x, Binding binding);
  Var log_prob(Tape& tape, Var x) const;
  Tensor log_prob(const Tensor& x) const;

  // Mean over the batch of -log_prob. Throws on an empty batch.
  Var nll_loss(Tape& tape, Var x, Binding binding);
  Var nll_loss(Tape& tape, Var x) const;

  Tensor forward_values(const Tensor& x) const;
  Tensor inverse(const Tensor& z) const;
  // n draws of z ~ N(0, I) from Rng(seed), mapped through the inverse flow.
  Tensor sample(std::size_t n, std::uint64_t seed) const;

  ParamRefs parameters();
  ConstParamRefs parameters() const;

 private:
  FlowConfig config_;
  std::vector<CouplingLayer> layers_;
};

// log N(z; 0, I) per row of z: -0.5 * (|z|^2 + d log 2 pi).
Var standard_normal_log_prob(Var z);

}  // namespace tttflow
