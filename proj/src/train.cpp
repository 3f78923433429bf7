#include "tttflow/train.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace tttflow {

namespace {

constexpr std::uint64_t kShuffleStream = 0x5348;

void check_labels(const LabeledDataset& data, std::size_t num_classes) {
  if (data.size() == 0) throw std::invalid_argument("training set is empty");
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.labels[i] >= num_classes) {
      throw std::invalid_argument("label " + std::to_string(data.labels[i]) + " at row " +
                                  std::to_string(i) + " is outside [0, " +
                                  std::to_string(num_classes) + ")");
    }
  }
}

std::vector<std::size_t> gather_labels(const std::vector<std::size_t>& labels,
                                       const std::vector<std::size_t>& idx) {
  std::vector<std::size_t> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = labels[idx[i]];
  return out;
}

double checked_loss(const Var& loss, const char* phase, std::size_t epoch, std::size_t batch) {
  const double v = loss.value().item();
  if (!std::isfinite(v)) throw TrainingError(phase, epoch, batch, "loss is not finite");
  return v;
}

void check_flow_dim(const FlowModel& flow, const Backbone& backbone) {
  const std::size_t d = backbone.feature_dim(backbone.split_stage());
  if (flow.dim() != d) {
    throw std::invalid_argument("flow dim " + std::to_string(flow.dim()) +
                                " does not match extractor width " + std::to_string(d) +
                                " at stage " + std::to_string(backbone.split_stage()));
  }
}

}  // namespace

std::string_view schedule_name(ScheduleKind kind) {
  return kind == ScheduleKind::step ? "step" : "cosine";
}

ScheduleKind parse_schedule(std::string_view name) {
  if (name == "step") return ScheduleKind::step;
  if (name == "cosine") return ScheduleKind::cosine;
  throw std::invalid_argument("unknown schedule '" + std::string(name) + "'");
}

TrainConfig TrainConfig::classifier() { return TrainConfig{}; }

TrainConfig TrainConfig::flow() {
  TrainConfig cfg;
  cfg.epochs = 40;
  cfg.lr0 = 0.01;
  cfg.schedule = ScheduleKind::cosine;
  cfg.milestones.clear();
  cfg.momentum = 0.0;
  return cfg;
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be positive");
  if (!(lr0 > 0.0) || !std::isfinite(lr0)) throw std::invalid_argument("lr0 must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must be in [0, 1)");
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw std::invalid_argument("beta must be >= 0");
  if (schedule == ScheduleKind::step) {
    if (!(factor > 0.0)) throw std::invalid_argument("step factor must be positive");
    for (std::size_t i = 0; i < milestones.size(); ++i) {
      if (i > 0 && milestones[i] <= milestones[i - 1]) {
        throw std::invalid_argument("milestones must be strictly increasing");
      }
      if (milestones[i] >= epochs) throw std::invalid_argument("milestones must be < epochs");
    }
  }
}

double TrainConfig::lr_at(std::size_t epoch) const {
  if (schedule == ScheduleKind::step) return StepSchedule{lr0, milestones, factor}.at(epoch);
  return CosineSchedule{lr0, epochs}.at(epoch);
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                    Rng& rng) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(perm));
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t b = 0; b < n; b += batch_size) {
    const std::size_t e = std::min(n, b + batch_size);
    if (e - b == 1 && !batches.empty()) {
      batches.back().push_back(perm[b]);
    } else {
      batches.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(b),
                           perm.begin() + static_cast<std::ptrdiff_t>(e));
    }
  }
  return batches;
}

TrainHistory train_source(Backbone& backbone, const LabeledDataset& data, const TrainConfig& cfg,
                          const EpochCallback& on_epoch) {
  cfg.validate();
  check_labels(data, backbone.config().num_classes);
  Sgd opt(backbone.parameters(), cfg.momentum);
  Rng shuffle(mix_seed(cfg.seed, kShuffleStream));
  TrainHistory history;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at(epoch);
    double total = 0.0;
    const auto batches = epoch_batches(data.size(), cfg.batch_size, shuffle);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto& idx = batches[b];
      const auto labels = gather_labels(data.labels, idx);
      try {
        opt.zero_grad();
        Tape tape;
        const Var x = tape.constant(data.inputs.gather_rows(idx));
        const Var loss = softmax_cross_entropy(
            backbone.logits(tape, x, BnMode::train, Binding::trainable), labels);
        total += checked_loss(loss, "train_source", epoch, b) * static_cast<double>(idx.size());
        tape.backward(loss);
      } catch (const NumericError& e) {
        throw TrainingError("train_source", epoch, b, e.what());
      }
      opt.step(lr);
    }
    history.loss.push_back(total / static_cast<double>(data.size()));
    if (on_epoch) on_epoch({"source", epoch, lr, history.loss.back()});
  }
  return history;
}

TrainHistory train_flow(FlowModel& flow, Backbone& backbone, const Tensor& inputs,
                        const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  check_flow_dim(flow, backbone);
  const std::size_t n = inputs.rows();
  if (n == 0) throw std::invalid_argument("training set is empty");
  Sgd opt(flow.parameters(), cfg.momentum);
  Rng shuffle(mix_seed(cfg.seed, kShuffleStream));
  const BnMode bn = cfg.update_bn_stats ? BnMode::train : BnMode::eval;
  TrainHistory history;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at(epoch);
    double total = 0.0;
    const auto batches = epoch_batches(n, cfg.batch_size, shuffle);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto& idx = batches[b];
      try {
        opt.zero_grad();
        Tape tape;
        const Var feats = backbone.extract_features(tape, tape.constant(inputs.gather_rows(idx)),
                                                    backbone.split_stage(), bn, Binding::frozen);
        const Var loss = flow.nll_loss(tape, tape.constant(feats.value()), Binding::trainable);
        total += checked_loss(loss, "train_flow", epoch, b) * static_cast<double>(idx.size());
        tape.backward(loss);
      } catch (const NumericError& e) {
        throw TrainingError("train_flow", epoch, b, e.what());
      }
      opt.step(lr);
    }
    history.loss.push_back(total / static_cast<double>(n));
    if (on_epoch) on_epoch({"flow", epoch, lr, history.loss.back()});
  }
  return history;
}

JointHistory train_joint(Backbone& backbone, FlowModel& flow, const LabeledDataset& data,
                         const TrainConfig& cls_cfg, const TrainConfig& flow_cfg,
                         const EpochCallback& on_epoch) {
  cls_cfg.validate();
  flow_cfg.validate();
  check_flow_dim(flow, backbone);
  check_labels(data, backbone.config().num_classes);
  if (cls_cfg.epochs != flow_cfg.epochs) {
    throw std::invalid_argument("joint training needs equal classifier and flow epochs");
  }
  const double beta = cls_cfg.beta;
  const std::size_t split = backbone.split_stage();
  Sgd cls_opt(backbone.parameters(), cls_cfg.momentum);
  Sgd flow_opt(flow.parameters(), flow_cfg.momentum);
  Rng shuffle(mix_seed(cls_cfg.seed, kShuffleStream));
  JointHistory history;

  for (std::size_t epoch = 0; epoch < cls_cfg.epochs; ++epoch) {
    const double cls_lr = cls_cfg.lr_at(epoch);
    const double flow_lr = flow_cfg.lr_at(epoch);
    double sum_cls = 0.0;
    double sum_uns = 0.0;
    const auto batches = epoch_batches(data.size(), cls_cfg.batch_size, shuffle);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto& idx = batches[b];
      const auto labels = gather_labels(data.labels, idx);
      const auto w = static_cast<double>(idx.size());
      try {
        cls_opt.zero_grad();
        flow_opt.zero_grad();
        Tape tape;
        const Var x = tape.constant(data.inputs.gather_rows(idx));
        const Var feats =
            backbone.extract_features(tape, x, split, BnMode::train, Binding::trainable);
        const Var cls = softmax_cross_entropy(
            backbone.logits_from(tape, feats, split, BnMode::train, Binding::trainable), labels);
        // Flow branch on detached features: trains the flow with the unscaled NLL.
        const Var uns = flow.nll_loss(tape, tape.constant(feats.value()), Binding::trainable);
        Var loss = cls + uns;
        if (beta > 0.0) {
          // Extractor branch through a frozen copy of the same flow.
          loss = loss + scale(flow.nll_loss(tape, feats, Binding::frozen), beta);
        }
        sum_cls += checked_loss(cls, "train_joint", epoch, b) * w;
        sum_uns += checked_loss(uns, "train_joint", epoch, b) * w;
        tape.backward(loss);
      } catch (const NumericError& e) {
        throw TrainingError("train_joint", epoch, b, e.what());
      }
      cls_opt.step(cls_lr);
      flow_opt.step(flow_lr);
    }
    const auto n = static_cast<double>(data.size());
    history.cls.push_back(sum_cls / n);
    history.uns.push_back(sum_uns / n);
    history.total.push_back(history.cls.back() + beta * history.uns.back());
    if (on_epoch) on_epoch({"joint", epoch, cls_lr, history.total.back()});
  }
  return history;
}

}  // namespace tttflow
