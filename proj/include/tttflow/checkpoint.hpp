#pragma once

// Single-file model checkpoints.
//
//   "TTTFCKPT" | u32 format_version | u64 header_bytes | header JSON
//              | u64 payload_bytes  | payload (little-endian float64)
//
// The header lists every tensor (name, role, shape, offset, count), the kind
// ("backbone" or "flow"), the model config and free-form metadata, plus
// `content_sha256`: the SHA-256 of the header dumped without that field,
// followed by the payload bytes. Loading recomputes it and refuses a mismatch.

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "tttflow/backbone.hpp"
#include "tttflow/flow.hpp"

namespace tttflow {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointInfo {
  std::uint32_t format_version = 0;
  std::string kind;
  nlohmann::json config;
  nlohmann::json metadata;
  std::string content_hash;
};

std::string encode_backbone(const Backbone& backbone, const nlohmann::json& metadata = {});
std::string encode_flow(const FlowModel& flow, const nlohmann::json& metadata = {});
Backbone decode_backbone(std::string_view bytes, CheckpointInfo* info = nullptr);
FlowModel decode_flow(std::string_view bytes, CheckpointInfo* info = nullptr);

// Atomic write; returns the content hash.
std::string save_backbone(const Backbone& backbone, const std::filesystem::path& path,
                          const nlohmann::json& metadata = {});
std::string save_flow(const FlowModel& flow, const std::filesystem::path& path,
                      const nlohmann::json& metadata = {});
Backbone load_backbone(const std::filesystem::path& path, CheckpointInfo* info = nullptr);
FlowModel load_flow(const std::filesystem::path& path, CheckpointInfo* info = nullptr);

// Header fields of a checkpoint without building the model; verifies the hash.
CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

}  // namespace tttflow
