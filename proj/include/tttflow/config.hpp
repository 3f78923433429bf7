#pragma once

// Resolved run configuration. One JSON document with sections data,
// backbone, flow, train, joint, adapt and bench; every field has a default
// and unknown keys are rejected. A single top-level seed drives everything:
// the data family, both initializations and both shuffling streams.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tttflow/adapt.hpp"
#include "tttflow/backbone.hpp"
#include "tttflow/data.hpp"
#include "tttflow/flow.hpp"
#include "tttflow/train.hpp"

namespace tttflow {

struct DataSection {
  std::size_t num_classes = 10;
  std::size_t input_dim = 20;
  std::size_t n_train = 10000;
  std::size_t n_test = 2000;
  std::string family = "simplex";
};

struct JointSection {
  std::vector<double> betas{kJointBetaPresets[0], kJointBetaPresets[1]};
};

struct BenchSection {
  std::vector<CorruptionKind> corruptions{kAllCorruptions.begin(), kAllCorruptions.end()};
  std::vector<int> severities{1, 3, 5};
  std::vector<std::size_t> iterations{0, 1, 3, 10, 20, 50};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  bool include_clean = false;
};

struct RunConfig {
  std::uint64_t seed = 0;
  DataSection data;
  BackboneConfig backbone;
  FlowConfig flow;  // dim is derived from the backbone split width
  TrainConfig classifier = TrainConfig::classifier();
  TrainConfig flow_train = TrainConfig::flow();
  JointSection joint;
  AdaptConfig adapt;
  BenchSection bench;

  // Seeds of the individual random streams, all derived from `seed`.
  std::uint64_t backbone_init_seed() const;
  std::uint64_t flow_init_seed() const;
  // Copies with the shuffle seed filled in.
  TrainConfig classifier_config() const;
  TrainConfig flow_config() const;
  FlowConfig flow_config_for_backbone() const;
  // Same configuration with a different top-level seed.
  RunConfig with_seed(std::uint64_t s) const;
};

nlohmann::json to_json(const RunConfig& cfg);
// Strict parse over the defaults: throws ConfigError listing every unknown
// key, type mismatch and invalid value found.
RunConfig config_from_json(const nlohmann::json& doc);

// Applies `a.b.c=value` overrides to a JSON document. The value is parsed as
// JSON when possible and taken as a string otherwise.
void apply_overrides(nlohmann::json& doc, const std::vector<std::string>& overrides);

// Reads `path` (empty path: defaults only), applies overrides, validates.
RunConfig load_config(const std::filesystem::path& path,
                      const std::vector<std::string>& overrides = {});

// SHA-256 of the canonical JSON dump.
std::string config_hash(const RunConfig& cfg);

}  // namespace tttflow
