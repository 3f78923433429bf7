#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace tttflow {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);

// Operand shapes are incompatible for an op.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const Shape& lhs, const Shape& rhs);
  ShapeError(const std::string& op, const std::string& what);

  const Shape& lhs() const noexcept { return lhs_; }
  const Shape& rhs() const noexcept { return rhs_; }

 private:
  Shape lhs_;
  Shape rhs_;
};

// An op produced NaN/Inf. `index` is the flat position of the first bad
// value; `row` its leading-axis (batch) index when the output has rank >= 1.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& op, std::optional<std::size_t> index,
               std::optional<std::size_t> row = std::nullopt);
  NumericError(const std::string& what, const std::string& op, std::optional<std::size_t> index,
               std::optional<std::size_t> row = std::nullopt);

  const std::string& op() const noexcept { return op_; }
  std::optional<std::size_t> index() const noexcept { return index_; }
  std::optional<std::size_t> row() const noexcept { return row_; }

 private:
  std::string op_;
  std::optional<std::size_t> index_;
  std::optional<std::size_t> row_;
};

// Non-finite output of a coupling layer; carries the offending sample.
class CouplingError : public NumericError {
 public:
  CouplingError(std::size_t layer, std::size_t batch_index);

  std::size_t layer() const noexcept { return layer_; }
  std::size_t batch_index() const noexcept { return batch_index_; }

 private:
  std::size_t layer_;
  std::size_t batch_index_;
};

// Misuse of the autodiff graph (non-scalar loss, nothing to differentiate, ...).
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Training diverged; location is the epoch and batch where the loss went bad.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& phase, std::size_t epoch, std::size_t batch,
                const std::string& cause);

  std::size_t epoch() const noexcept { return epoch_; }
  std::size_t batch() const noexcept { return batch_; }

 private:
  std::size_t epoch_;
  std::size_t batch_;
};

// Dataset parsing/generation failure. `line` is 1-based when known.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what, std::optional<std::size_t> line = std::nullopt);

  std::optional<std::size_t> line() const noexcept { return line_; }

 private:
  std::optional<std::size_t> line_;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Collects every validation problem of a config document at once.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> problems);

  const std::vector<std::string>& problems() const noexcept { return problems_; }

 private:
  std::vector<std::string> problems_;
};

}  // namespace tttflow
