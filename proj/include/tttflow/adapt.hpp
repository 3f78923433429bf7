#pragma once

// Test-time adaptation: each batch restarts from the source extractor, takes
// a few SGD steps on the frozen flow's NLL of its features, then classifies.

#include <cstddef>
#include <functional>
#include <vector>

#include "tttflow/backbone.hpp"
#include "tttflow/flow.hpp"
#include "tttflow/fileio.hpp"

namespace tttflow {

struct AdaptConfig {
  std::size_t iterations = 10;
  double lr = 0.001;
  std::size_t batch_size = 128;
  bool reset_per_batch = true;
  // Stages 1..adapt_scope receive updates; 0 means "up to the split stage".
  std::size_t adapt_scope = 0;
  // Train mode normalizes by batch statistics during the adaptation steps
  // and folds them into the running statistics of the adapted stages.
  BnMode bn_mode = BnMode::train;

  void validate(const Backbone& backbone) const;
  std::size_t scope(const Backbone& backbone) const;
};

// Mean -log p(features) of a batch, BN in eval mode. Higher means farther
// from the source feature distribution.
double shift_score(const FlowModel& flow, const Backbone& backbone, const Tensor& batch);

struct AdaptResult {
  Backbone backbone;              // adapted copy (the snapshot on failure)
  double initial_nll = 0.0;       // loss before the first step
  std::vector<double> nll_trace;  // loss after each completed step
  bool failed = false;
};

// Called after step `iteration` (1-based) with the current weights.
using StepCallback = std::function<void(std::size_t iteration, const Backbone& current)>;

// Copies `snapshot`, then runs cfg.iterations SGD steps on the flow NLL of the
// batch's split-stage features, updating only stages within the scope. A
// non-finite value restores the snapshot and sets `failed`; so does a
// single-row batch in train BN mode, whose variance is undefined.
AdaptResult adapt_batch(const Backbone& snapshot, const FlowModel& flow, const Tensor& batch,
                        const AdaptConfig& cfg, const StepCallback& on_step = {});

struct BatchOutcome {
  std::size_t batch_index = 0;
  std::size_t size = 0;
  double nll_before = 0.0;  // shift_score before adaptation
  double nll_after = 0.0;   // shift_score with the adapted weights
  std::size_t iterations = 0;
  bool failed = false;
};

struct AdaptedPredictions {
  std::vector<std::size_t> labels;
  std::vector<BatchOutcome> batches;
  std::size_t failed_batches = 0;
};

// Splits `inputs` into consecutive batches of cfg.batch_size. With
// reset_per_batch every batch starts from `source`; otherwise weights carry
// over. Failed batches fall back to the unadapted prediction. When `log` is
// given, writes one JSON line per batch.
AdaptedPredictions predict_with_adaptation(const Backbone& source, const FlowModel& flow,
                                           const Tensor& inputs, const AdaptConfig& cfg,
                                           JsonLinesLogger* log = nullptr);

double accuracy(const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& labels);

}  // namespace tttflow
