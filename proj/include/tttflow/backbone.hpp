#pragma once

// MLP classifier split into a staged feature extractor and a linear head.
// Every stage is Linear (no bias) -> BatchNorm -> tanh; the flow taps the output of
// stage `split_stage` (1-based).

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "tttflow/autodiff.hpp"
#include "tttflow/nn.hpp"
#include "tttflow/rng.hpp"

namespace tttflow {

enum class BnMode { train, eval };

std::string_view bn_mode_name(BnMode mode);
BnMode parse_bn_mode(std::string_view name);

class BatchNorm {
 public:
  BatchNorm() = default;
  BatchNorm(const std::string& name, std::size_t features, double momentum, double epsilon);

  // Train mode normalizes by the batch mean and biased variance and, when
  // `update_stats`, folds them into the running statistics:
  //   running = (1 - momentum) * running + momentum * batch.
  // Eval mode normalizes by the running statistics only.
  Var forward(Tape& tape, Var x, BnMode mode, Binding binding, bool update_stats = true);

  Parameter gamma;
  Parameter beta;
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;
  std::string name;
};

struct Stage {
  Linear linear;
  BatchNorm bn;

  Var forward(Tape& tape, Var x, BnMode mode, Binding binding, bool update_stats = true);
  void collect(ParamRefs& out);
};

struct BackboneConfig {
  std::size_t input_dim = 20;
  std::array<std::size_t, 3> widths{32, 16, 16};
  std::size_t num_classes = 10;
  std::size_t split_stage = 2;
  double bn_momentum = 0.1;
  double bn_epsilon = 1e-5;
};

class Backbone {
 public:
  static constexpr std::size_t kStages = 3;

  Backbone() = default;
  Backbone(const BackboneConfig& config, Rng& rng);
  Backbone(const BackboneConfig& config, std::uint64_t seed);

  const BackboneConfig& config() const noexcept { return config_; }
  std::size_t split_stage() const noexcept { return config_.split_stage; }
  // Output width of stage `upto` (1-based).
  std::size_t feature_dim(std::size_t upto) const;

  // Composition of stages 1..upto. Throws std::invalid_argument unless
  // upto is in {1, 2, 3}.
  Var extract_features(Tape& tape, Var x, std::size_t upto, BnMode mode, Binding binding,
                       bool update_stats = true);
  // Stages upto+1..3 followed by the head, applied to stage-`upto` features.
  Var logits_from(Tape& tape, Var features, std::size_t upto, BnMode mode, Binding binding,
                  bool update_stats = true);
  Var logits(Tape& tape, Var x, BnMode mode, Binding binding, bool update_stats = true);
  Var head_logits(Tape& tape, Var features, Binding binding);

  // Eval-mode conveniences; pure functions of parameters and running stats.
  Tensor features(const Tensor& x, std::size_t upto) const;
  Tensor logits(const Tensor& x) const;
  // Softmax of the head applied to full-depth features.
  Tensor classify(const Tensor& features) const;
  // argmax of classify(features(x, 3)); ties go to the lowest class index.
  std::vector<std::size_t> predict(const Tensor& x) const;

  Stage& stage(std::size_t index) { return stages_.at(index - 1); }
  const Stage& stage(std::size_t index) const { return stages_.at(index - 1); }
  Linear& head() noexcept { return head_; }
  const Linear& head() const noexcept { return head_; }

  ParamRefs parameters();
  ParamRefs stage_parameters(std::size_t first, std::size_t last);
  ParamRefs head_parameters();
  ConstParamRefs parameters() const;

  // Named non-trainable buffers (BN running statistics).
  std::vector<std::pair<std::string, Tensor*>> buffers();
  std::vector<std::pair<std::string, const Tensor*>> buffers() const;

 private:
  BackboneConfig config_;
  std::array<Stage, kStages> stages_;
  Linear head_;
};

std::vector<std::size_t> argmax_rows(const Tensor& scores);
Tensor softmax_rows(const Tensor& logits);

}  // namespace tttflow
