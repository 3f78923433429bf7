#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <set>
#include <utility>
#include <vector>

#include "helpers.hpp"
#include "tttflow/gradcheck.hpp"
#include "tttflow/train.hpp"

using namespace tttflow;
using tttflow::testing::LogisticOracle;
using tttflow::testing::random_normal;
using tttflow::testing::sample_mean_log_prob;

namespace {

// Two isotropic unit-variance blobs in 2-d whose means are 6 sigma apart.
LabeledDataset blobs(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  LabeledDataset ds;
  ds.inputs = Tensor(Shape{n, 2});
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = i % 2;
    ds.labels[i] = y;
    ds.inputs.at(i, 0) = (y == 0 ? -3.0 : 3.0) + rng.normal();
    ds.inputs.at(i, 1) = rng.normal();
  }
  return ds;
}

BackboneConfig blob_backbone() {
  BackboneConfig cfg;
  cfg.input_dim = 2;
  cfg.num_classes = 2;
  return cfg;
}

BackboneConfig small_backbone() {
  BackboneConfig cfg;
  cfg.input_dim = 6;
  cfg.widths = {8, 4, 4};
  cfg.num_classes = 3;
  return cfg;
}

TrainConfig short_config(std::size_t epochs, std::uint64_t seed = 0) {
  TrainConfig cfg = TrainConfig::classifier();
  cfg.epochs = epochs;
  cfg.milestones.clear();
  cfg.batch_size = 32;
  cfg.seed = seed;
  return cfg;
}

TrainConfig short_flow_config(std::size_t epochs) {
  TrainConfig cfg = TrainConfig::flow();
  cfg.epochs = epochs;
  cfg.batch_size = 32;
  return cfg;
}

FlowConfig flow_for(const Backbone& b) {
  FlowConfig f;
  f.dim = b.feature_dim(b.split_stage());
  f.hidden = 8;
  return f;
}

double train_accuracy(const Backbone& b, const LabeledDataset& ds) {
  const auto pred = b.predict(ds.inputs);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == ds.labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

template <typename Refs>
std::vector<Tensor> snapshot(const Refs& ps) {
  std::vector<Tensor> out;
  for (const Parameter* p : ps) out.push_back(p->value);
  return out;
}

std::vector<Tensor> buffer_snapshot(const Backbone& b) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : b.buffers()) out.push_back(*t);
  return out;
}

}  // namespace

// ---- schedules and optimizer -------------------------------------------------------

TEST(Schedule, StepDividesAtMilestones) {
  TrainConfig cfg = TrainConfig::classifier();
  EXPECT_DOUBLE_EQ(cfg.lr_at(0), 0.1);
  EXPECT_DOUBLE_EQ(cfg.lr_at(24), 0.1);
  EXPECT_DOUBLE_EQ(cfg.lr_at(25), 0.01);
  EXPECT_DOUBLE_EQ(cfg.lr_at(39), 0.01);
  EXPECT_DOUBLE_EQ(cfg.lr_at(40), 0.001);
  EXPECT_DOUBLE_EQ(cfg.lr_at(49), 0.001);
}

TEST(Schedule, CosineEndpoints) {
  TrainConfig cfg = TrainConfig::flow();
  EXPECT_EQ(cfg.lr_at(0), cfg.lr0);
  EXPECT_EQ(cfg.lr_at(cfg.epochs), 0.0);
  EXPECT_NEAR(cfg.lr_at(cfg.epochs / 2), 0.5 * cfg.lr0, 1e-15);
  for (std::size_t t = 1; t <= cfg.epochs; ++t) EXPECT_LT(cfg.lr_at(t), cfg.lr_at(t - 1));
}

TEST(Schedule, ValidationRejectsBadMilestones) {
  TrainConfig cfg = TrainConfig::classifier();
  cfg.milestones = {25, 25};
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg.milestones = {10, 50};
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg.milestones = {10, 20};
  EXPECT_NO_THROW(cfg.validate());
  cfg.lr0 = 0.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  EXPECT_THROW(parse_schedule("linear"), std::invalid_argument);
}

TEST(Optimizer, HeavyBallMomentum) {
  Parameter p("p", Tensor::vector({1.0, -2.0}));
  Sgd opt({&p}, 0.9);
  const double lr = 0.1, g0 = 0.5, g1 = -1.0;
  p.grad = Tensor::vector({g0, g1});
  opt.step(lr);
  EXPECT_DOUBLE_EQ(p.value[0], 1.0 - lr * g0);
  p.grad = Tensor::vector({g0, g1});
  opt.step(lr);
  // v = 0.9 * g + g after the second step.
  EXPECT_DOUBLE_EQ(p.value[0], 1.0 - lr * g0 - lr * (0.9 * g0 + g0));
  EXPECT_DOUBLE_EQ(p.value[1], -2.0 - lr * g1 - lr * (0.9 * g1 + g1));
  opt.zero_grad();
  EXPECT_EQ(p.grad, Tensor(Shape{2}, 0.0));
}

TEST(EpochBatches, PartitionWithTailMerge) {
  for (std::size_t n : {1, 5, 128, 129, 257, 258, 1000}) {
    Rng rng(n);
    const auto batches = epoch_batches(n, 128, rng);
    std::multiset<std::size_t> seen;
    for (const auto& b : batches) {
      if (n > 1) {
        EXPECT_GE(b.size(), 2u) << "n=" << n;
      }
      EXPECT_LE(b.size(), 129u);
      seen.insert(b.begin(), b.end());
    }
    ASSERT_EQ(seen.size(), n);
    for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(seen.count(i), 1u);
  }
  Rng rng(0);
  const auto b257 = epoch_batches(257, 128, rng);
  ASSERT_EQ(b257.size(), 2u);
  EXPECT_EQ(b257[1].size(), 129u);
  const auto b258 = epoch_batches(258, 128, rng);
  ASSERT_EQ(b258.size(), 3u);
  EXPECT_EQ(b258[2].size(), 2u);
}

// ---- train_source ------------------------------------------------------------------

TEST(TrainSource, SeparableBlobsReachOracleAccuracy) {
  const LabeledDataset ds = blobs(2000, 17);

  // Oracle: plain-array logistic regression on the same samples.
  LogisticOracle oracle;
  oracle.classes = 2;
  oracle.dim = 2;
  std::vector<double> x(ds.inputs.data().begin(), ds.inputs.data().end());
  oracle.fit(x, ds.labels, ds.size(), 300, 0.5);
  const double oracle_acc = oracle.accuracy(x, ds.labels, ds.size());
  ASSERT_GE(oracle_acc, 0.99);

  Backbone b(blob_backbone(), 5);
  TrainConfig cfg = TrainConfig::classifier();
  const TrainHistory h = train_source(b, ds, cfg);
  ASSERT_EQ(h.loss.size(), 50u);
  for (double l : h.loss) EXPECT_TRUE(std::isfinite(l));
  EXPECT_LT(h.loss.back(), h.loss.front());
  EXPECT_GE(train_accuracy(b, ds), 0.99);
}

TEST(TrainSource, ZeroEpochsLeavesParameters) {
  const LabeledDataset ds = generate_source(3, 6, 100, 1);
  Backbone b(small_backbone(), 2);
  const auto before = snapshot(std::as_const(b).parameters());
  const auto buffers = buffer_snapshot(b);
  const TrainHistory h = train_source(b, ds, short_config(0));
  EXPECT_TRUE(h.loss.empty());
  EXPECT_EQ(snapshot(std::as_const(b).parameters()), before);
  EXPECT_EQ(buffer_snapshot(b), buffers);
}

TEST(TrainSource, SameSeedBitwiseIdentical) {
  const LabeledDataset ds = generate_source(3, 6, 300, 3);
  Backbone a(small_backbone(), 4), b(small_backbone(), 4);
  const auto ha = train_source(a, ds, short_config(3, 9));
  const auto hb = train_source(b, ds, short_config(3, 9));
  EXPECT_EQ(ha.loss, hb.loss);
  EXPECT_EQ(snapshot(std::as_const(a).parameters()), snapshot(std::as_const(b).parameters()));
  EXPECT_EQ(buffer_snapshot(a), buffer_snapshot(b));

  Backbone c(small_backbone(), 4);
  const auto hc = train_source(c, ds, short_config(3, 10));
  EXPECT_NE(hc.loss, ha.loss);
}

TEST(TrainSource, EpochCallbackReportsEveryEpoch) {
  const LabeledDataset ds = generate_source(3, 6, 100, 3);
  Backbone b(small_backbone(), 4);
  TrainConfig cfg = short_config(4);
  cfg.milestones = {2};
  std::vector<EpochRecord> seen;
  const auto h = train_source(b, ds, cfg, [&](const EpochRecord& r) { seen.push_back(r); });
  ASSERT_EQ(seen.size(), 4u);
  for (std::size_t e = 0; e < 4; ++e) {
    EXPECT_EQ(seen[e].epoch, e);
    EXPECT_EQ(seen[e].loss, h.loss[e]);
    EXPECT_DOUBLE_EQ(seen[e].lr, e < 2 ? 0.1 : 0.01);
  }
}

TEST(TrainSource, NonFiniteInputNamesEpochAndBatch) {
  LabeledDataset ds = generate_source(3, 6, 100, 3);
  ds.inputs.at(37, 2) = std::numeric_limits<double>::quiet_NaN();
  Backbone b(small_backbone(), 4);
  try {
    train_source(b, ds, short_config(2));
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_EQ(e.epoch(), 0u);
    EXPECT_LT(e.batch(), 4u);
    EXPECT_NE(std::string(e.what()).find("epoch 0"), std::string::npos) << e.what();
  }
}

TEST(TrainSource, LabelOutOfRangeRejected) {
  LabeledDataset ds = generate_source(3, 6, 30, 3);
  ds.labels[5] = 3;
  Backbone b(small_backbone(), 4);
  EXPECT_THROW(train_source(b, ds, short_config(1)), std::invalid_argument);
}

// ---- train_flow --------------------------------------------------------------------

class TrainFlowTest : public ::testing::Test {
 protected:
  void SetUp() override {
    data = generate_source(3, 6, 600, 21);
    heldout = generate_source(3, 6, 300, 21, 1);
    backbone = Backbone(small_backbone(), 8);
    train_source(backbone, data, short_config(5));
  }
  LabeledDataset data, heldout;
  Backbone backbone;
};

TEST_F(TrainFlowTest, ImprovesHeldOutLikelihood) {
  FlowModel flow(flow_for(backbone), 3);
  const Tensor before_feats = backbone.features(heldout.inputs, 2);
  const double untrained = sample_mean_log_prob(flow, before_feats);
  const TrainHistory h = train_flow(flow, backbone, data.inputs, short_flow_config(15));
  const double trained = sample_mean_log_prob(flow, backbone.features(heldout.inputs, 2));
  EXPECT_GT(trained, untrained);
  EXPECT_LT(h.loss.back(), h.loss.front());
}

TEST_F(TrainFlowTest, ExtractorAndHeadFrozen) {
  FlowModel flow(flow_for(backbone), 3);
  const auto params = snapshot(std::as_const(backbone).parameters());
  const auto buffers = buffer_snapshot(backbone);
  train_flow(flow, backbone, data.inputs, short_flow_config(2));
  EXPECT_EQ(snapshot(std::as_const(backbone).parameters()), params);
  // Default: BN statistics follow the features.
  EXPECT_NE(buffer_snapshot(backbone), buffers);
}

TEST_F(TrainFlowTest, StatsFrozenWhenUpdateFlagOff) {
  FlowModel flow(flow_for(backbone), 3);
  const auto params = snapshot(std::as_const(backbone).parameters());
  const auto buffers = buffer_snapshot(backbone);
  TrainConfig cfg = short_flow_config(2);
  cfg.update_bn_stats = false;
  train_flow(flow, backbone, data.inputs, cfg);
  EXPECT_EQ(snapshot(std::as_const(backbone).parameters()), params);
  EXPECT_EQ(buffer_snapshot(backbone), buffers);
}

TEST_F(TrainFlowTest, DeterministicPerSeed) {
  Backbone b1 = backbone, b2 = backbone;
  FlowModel f1(flow_for(backbone), 3), f2(flow_for(backbone), 3);
  train_flow(f1, b1, data.inputs, short_flow_config(2));
  train_flow(f2, b2, data.inputs, short_flow_config(2));
  EXPECT_EQ(snapshot(std::as_const(f1).parameters()), snapshot(std::as_const(f2).parameters()));
  EXPECT_EQ(buffer_snapshot(b1), buffer_snapshot(b2));
}

TEST_F(TrainFlowTest, DimensionMismatchRejected) {
  FlowConfig wrong = flow_for(backbone);
  wrong.dim += 1;
  FlowModel flow(wrong, 3);
  EXPECT_THROW(train_flow(flow, backbone, data.inputs, short_flow_config(1)),
               std::invalid_argument);
}

// ---- train_joint -------------------------------------------------------------------

TEST(TrainJoint, BetaZeroReproducesSourceTrajectory) {
  const LabeledDataset ds = generate_source(3, 6, 300, 5);
  Backbone ref(small_backbone(), 6), joint(small_backbone(), 6);
  TrainConfig cls = short_config(3, 2);
  cls.beta = 0.0;
  const TrainHistory href = train_source(ref, ds, cls);

  FlowModel flow(flow_for(joint), 7);
  const auto flow_before = snapshot(std::as_const(flow).parameters());
  TrainConfig fcfg = short_flow_config(3);
  const JointHistory hj = train_joint(joint, flow, ds, cls, fcfg);

  EXPECT_EQ(hj.cls, href.loss);
  EXPECT_EQ(snapshot(std::as_const(joint).parameters()), snapshot(std::as_const(ref).parameters()));
  EXPECT_EQ(buffer_snapshot(joint), buffer_snapshot(ref));
  // The flow still trains on the evolving features.
  EXPECT_NE(snapshot(std::as_const(flow).parameters()), flow_before);
}

TEST(TrainJoint, TotalIsClassifierPlusWeightedFlowLoss) {
  const LabeledDataset ds = generate_source(3, 6, 200, 5);
  for (double beta : kJointBetaPresets) {
    Backbone b(small_backbone(), 6);
    FlowModel flow(flow_for(b), 7);
    TrainConfig cls = short_config(2, 2);
    cls.beta = beta;
    const JointHistory h = train_joint(b, flow, ds, cls, short_flow_config(2));
    ASSERT_EQ(h.total.size(), 2u);
    for (std::size_t e = 0; e < 2; ++e) {
      EXPECT_EQ(h.total[e], h.cls[e] + beta * h.uns[e]);
      EXPECT_TRUE(std::isfinite(h.total[e]));
    }
  }
  EXPECT_EQ(kJointBetaPresets[0], 0.01);
  EXPECT_EQ(kJointBetaPresets[1], 0.001);
}

TEST(TrainJoint, PositiveBetaChangesExtractorOnly) {
  const LabeledDataset ds = generate_source(3, 6, 200, 5);
  Backbone ref(small_backbone(), 6), joint(small_backbone(), 6);
  TrainConfig cls = short_config(1, 2);
  train_source(ref, ds, cls);
  cls.beta = 0.01;
  FlowModel flow(flow_for(joint), 7);
  train_joint(joint, flow, ds, cls, short_flow_config(1));
  EXPECT_NE(snapshot(joint.stage_parameters(1, 2)), snapshot(ref.stage_parameters(1, 2)));
}

TEST(TrainJoint, MismatchedEpochsRejected) {
  const LabeledDataset ds = generate_source(3, 6, 50, 5);
  Backbone b(small_backbone(), 6);
  FlowModel flow(flow_for(b), 7);
  EXPECT_THROW(train_joint(b, flow, ds, short_config(2), short_flow_config(3)),
               std::invalid_argument);
}

TEST(TrainJoint, JointObjectiveGradientMatchesFiniteDifferences) {
  Rng rng(12);
  Backbone b(small_backbone(), 13);
  FlowModel flow(flow_for(b), 14);
  tttflow::testing::randomize(flow.parameters(), rng, 0.3);
  const Tensor x = random_normal({8, 6}, rng);
  const std::vector<std::size_t> y{0, 1, 2, 0, 1, 2, 1, 0};
  std::vector<Parameter*> params = b.parameters();
  for (Parameter* p : flow.parameters()) params.push_back(p);
  const auto loss = [&](bool with_backward) {
    Tape tape;
    const Var l = tttflow::testing::joint_objective(tape, b, flow, tape.constant(x), y, 0.01);
    if (with_backward) tape.backward(l);
    return l.value().item();
  };
  const GradCheckReport r = check_parameter_gradients(params, loss, 1e-6);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst.parameter << "[" << r.worst.index << "]";
}
