#pragma once

#include <filesystem>
#include <mutex>
#include <ostream>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

namespace tttflow {

// Writes to `<path>.tmp.<pid>` and renames over `path`, so readers never see a
// partial file. Creates missing parent directories.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

std::string read_file(const std::filesystem::path& path);

// Hex SHA-256 of a byte string.
std::string sha256_hex(std::string_view bytes);

// One JSON object per line. Thread-safe; a null stream discards records.
class JsonLinesLogger {
 public:
  explicit JsonLinesLogger(std::ostream* out = nullptr) : out_(out) {}

  void log(nlohmann::json record);
  // Adds {"level": "info", "event": event} to the fields.
  void info(std::string_view event, nlohmann::json fields = nlohmann::json::object());

 private:
  std::ostream* out_;
  std::mutex mutex_;
};

}  // namespace tttflow
