#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tttflow/backbone.hpp"
#include "tttflow/data.hpp"
#include "tttflow/flow.hpp"
#include "tttflow/optim.hpp"

namespace tttflow {

enum class ScheduleKind { step, cosine };

std::string_view schedule_name(ScheduleKind kind);
ScheduleKind parse_schedule(std::string_view name);

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 128;
  double lr0 = 0.1;
  ScheduleKind schedule = ScheduleKind::step;
  std::vector<std::size_t> milestones{25, 40};
  double factor = 10.0;  // step schedule divides the rate by this at each milestone
  double momentum = 0.9;
  std::uint64_t seed = 0;  // drives the per-epoch shuffles
  double beta = 0.0;       // joint-training weight of the flow NLL
  // train_flow only: run the frozen extractor's BN in train mode so its
  // running statistics keep tracking the features.
  bool update_bn_stats = true;

  static TrainConfig classifier();
  static TrainConfig flow();

  // Throws std::invalid_argument listing the first violated constraint.
  void validate() const;
  double lr_at(std::size_t epoch) const;
};

inline constexpr double kJointBetaPresets[] = {0.01, 0.001};

struct EpochRecord {
  std::string phase;
  std::size_t epoch;
  double lr;
  double loss;  // sample-weighted mean over the epoch's batches
};

using EpochCallback = std::function<void(const EpochRecord&)>;

struct TrainHistory {
  std::vector<double> loss;  // per epoch
};

struct JointHistory {
  std::vector<double> cls;    // L_cls per epoch
  std::vector<double> uns;    // L_uns per epoch
  std::vector<double> total;  // L_cls + beta * L_uns per epoch
};

// Index batches of one epoch: a fresh permutation drawn from `rng`, cut into
// batch_size pieces with the short tail kept. A tail of one sample is merged
// into the previous batch because train-mode batch norm needs two rows.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                    Rng& rng);

// Mean cross-entropy with momentum SGD, BN in train mode. Throws
// TrainingError naming the epoch and batch of the first non-finite value.
TrainHistory train_source(Backbone& backbone, const LabeledDataset& data, const TrainConfig& cfg,
                          const EpochCallback& on_epoch = {});

// NLL of the flow on extract_features(x, split_stage). Extractor weights and
// the head are never written; BN running statistics are updated only when
// cfg.update_bn_stats.
TrainHistory train_flow(FlowModel& flow, Backbone& backbone, const Tensor& inputs,
                        const TrainConfig& cfg, const EpochCallback& on_epoch = {});

// L_JT = L_cls + beta * L_uns. The backbone follows `cls_cfg` (its beta is
// used), the flow follows `flow_cfg` on the same batches. The flow receives
// the gradient of L_uns alone, the head that of L_cls alone, the extractor
// both. beta == 0 drops the extractor term, so the backbone trajectory is
// identical to train_source with the same cls_cfg.
JointHistory train_joint(Backbone& backbone, FlowModel& flow, const LabeledDataset& data,
                         const TrainConfig& cls_cfg, const TrainConfig& flow_cfg,
                         const EpochCallback& on_epoch = {});

}  // namespace tttflow
