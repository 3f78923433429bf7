#include "tttflow/adapt.hpp"

#include <cmath>
#include <stdexcept>

#include "tttflow/optim.hpp"

namespace tttflow {

void AdaptConfig::validate(const Backbone& backbone) const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw std::invalid_argument("adapt lr must be positive");
  if (batch_size < 1) throw std::invalid_argument("adapt batch_size must be positive");
  if (adapt_scope > backbone.split_stage()) {
    throw std::invalid_argument("adapt_scope " + std::to_string(adapt_scope) +
                                " exceeds split_stage " +
                                std::to_string(backbone.split_stage()));
  }
}

std::size_t AdaptConfig::scope(const Backbone& backbone) const {
  return adapt_scope == 0 ? backbone.split_stage() : adapt_scope;
}

double shift_score(const FlowModel& flow, const Backbone& backbone, const Tensor& batch) {
  Tape tape;
  const Tensor feats = backbone.features(batch, backbone.split_stage());
  return flow.nll_loss(tape, tape.constant(feats)).value().item();
}

namespace {

// Split-stage features with the in-scope stages trainable in `mode` and the
// remaining ones frozen in eval mode.
Var adapt_features(Backbone& b, Tape& tape, Var x, std::size_t scope, BnMode mode,
                   bool update_stats) {
  Var h = x;
  for (std::size_t s = 1; s <= b.split_stage(); ++s) {
    if (s <= scope) {
      h = b.stage(s).forward(tape, h, mode, Binding::trainable, update_stats);
    } else {
      h = b.stage(s).forward(tape, h, BnMode::eval, Binding::frozen);
    }
  }
  return h;
}

}  // namespace

AdaptResult adapt_batch(const Backbone& snapshot, const FlowModel& flow, const Tensor& batch,
                        const AdaptConfig& cfg, const StepCallback& on_step) {
  cfg.validate(snapshot);
  AdaptResult result{snapshot, 0.0, {}, false};
  if (cfg.iterations == 0) return result;
  if (cfg.bn_mode == BnMode::train && batch.rows() < 2) {
    result.failed = true;
    return result;
  }
  const std::size_t scope = cfg.scope(snapshot);
  Backbone& b = result.backbone;
  Sgd opt(b.stage_parameters(1, scope), 0.0);

  try {
    // Pass i evaluates the weights after i steps; the last pass only scores.
    for (std::size_t i = 0; i <= cfg.iterations; ++i) {
      const bool stepping = i < cfg.iterations;
      opt.zero_grad();
      Tape tape;
      const Var feats =
          adapt_features(b, tape, tape.constant(batch), scope, cfg.bn_mode, stepping);
      const Var loss = flow.nll_loss(tape, feats);
      const double v = loss.value().item();
      if (!std::isfinite(v)) throw NumericError("adapt_nll", std::nullopt);
      if (i == 0) {
        result.initial_nll = v;
      } else {
        result.nll_trace.push_back(v);
      }
      if (!stepping) break;
      tape.backward(loss);
      opt.step(cfg.lr);
      for (const Parameter* p : opt.params()) {
        if (!p->value.all_finite()) throw NumericError("adapt_step", p->value.first_non_finite());
      }
      if (on_step) on_step(i + 1, b);
    }
  } catch (const NumericError&) {
    result.backbone = snapshot;
    result.failed = true;
  }
  return result;
}

AdaptedPredictions predict_with_adaptation(const Backbone& source, const FlowModel& flow,
                                           const Tensor& inputs, const AdaptConfig& cfg,
                                           JsonLinesLogger* log) {
  cfg.validate(source);
  const std::size_t n = inputs.rows();
  AdaptedPredictions out;
  out.labels.reserve(n);
  Backbone carried = source;

  for (std::size_t begin = 0, index = 0; begin < n; begin += cfg.batch_size, ++index) {
    const std::size_t end = std::min(n, begin + cfg.batch_size);
    const Tensor batch = inputs.slice_rows(begin, end);
    const Backbone& start = cfg.reset_per_batch ? source : carried;

    BatchOutcome outcome;
    outcome.batch_index = index;
    outcome.size = end - begin;
    outcome.nll_before = shift_score(flow, start, batch);

    AdaptResult r = adapt_batch(start, flow, batch, cfg);
    outcome.failed = r.failed;
    outcome.iterations = r.failed ? 0 : cfg.iterations;
    // On failure r.backbone already equals the unadapted start weights.
    const Backbone& used = r.backbone;
    outcome.nll_after = shift_score(flow, used, batch);
    const auto pred = used.predict(batch);
    out.labels.insert(out.labels.end(), pred.begin(), pred.end());
    if (r.failed) ++out.failed_batches;
    if (!cfg.reset_per_batch) carried = std::move(r.backbone);

    if (log != nullptr) {
      log->log({{"batch_index", outcome.batch_index},
                {"nll_before", outcome.nll_before},
                {"nll_after", outcome.nll_after},
                {"iterations", outcome.iterations},
                {"failed", outcome.failed}});
    }
    out.batches.push_back(outcome);
  }
  return out;
}

double accuracy(const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& labels) {
  if (predicted.size() != labels.size() || labels.empty()) {
    throw std::invalid_argument("accuracy needs equally sized, non-empty label vectors");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predicted[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

}  // namespace tttflow
