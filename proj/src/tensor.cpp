#include "tttflow/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace tttflow {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

ShapeError::ShapeError(const std::string& op, const Shape& lhs, const Shape& rhs)
    : std::invalid_argument("shape mismatch in " + op + ": " + shape_to_string(lhs) + " vs " +
                            shape_to_string(rhs)),
      lhs_(lhs),
      rhs_(rhs) {}

ShapeError::ShapeError(const std::string& op, const std::string& what)
    : std::invalid_argument("invalid shape in " + op + ": " + what) {}

namespace {
std::string numeric_message(const std::string& op, std::optional<std::size_t> index) {
  std::string msg = op + " produced a non-finite value";
  if (index) msg += " at flat index " + std::to_string(*index);
  return msg;
}
}  // namespace

NumericError::NumericError(const std::string& op, std::optional<std::size_t> index,
                           std::optional<std::size_t> row)
    : std::runtime_error(numeric_message(op, index)), op_(op), index_(index), row_(row) {}

NumericError::NumericError(const std::string& what, const std::string& op,
                           std::optional<std::size_t> index, std::optional<std::size_t> row)
    : std::runtime_error(what), op_(op), index_(index), row_(row) {}

CouplingError::CouplingError(std::size_t layer, std::size_t batch_index)
    : NumericError("coupling layer " + std::to_string(layer) +
                       " produced a non-finite output for batch index " +
                       std::to_string(batch_index),
                   "coupling_forward", std::nullopt, batch_index),
      layer_(layer),
      batch_index_(batch_index) {}

TrainingError::TrainingError(const std::string& phase, std::size_t epoch, std::size_t batch,
                             const std::string& cause)
    : std::runtime_error(phase + " diverged at epoch " + std::to_string(epoch) + ", batch " +
                         std::to_string(batch) + ": " + cause),
      epoch_(epoch),
      batch_(batch) {}

DataError::DataError(const std::string& what, std::optional<std::size_t> line)
    : std::runtime_error(line ? "line " + std::to_string(*line) + ": " + what : what),
      line_(line) {}

namespace {
std::string join_problems(const std::vector<std::string>& problems) {
  std::string out = "invalid config:";
  for (const auto& p : problems) out += " [" + p + "]";
  return out;
}
}  // namespace

ConfigError::ConfigError(std::vector<std::string> problems)
    : std::runtime_error(join_problems(problems)), problems_(std::move(problems)) {}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

namespace {
void check_dims(const Shape& shape) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor", "zero-length dimension in " + shape_to_string(shape));
  }
}
}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_dims(shape_);
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_dims(shape_);
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("tensor", "shape " + shape_to_string(shape_) + " needs " +
                                   std::to_string(shape_numel(shape_)) + " values, got " +
                                   std::to_string(data_.size()));
  }
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor(Shape{values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
  return Tensor(Shape{rows, cols}, std::vector<double>(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("dim", "axis " + std::to_string(axis) + " out of range for " +
                                shape_to_string(shape_));
  }
  return shape_[axis];
}

std::size_t Tensor::rows() const {
  if (rank() == 2) return shape_[0];
  if (rank() == 1) return 1;
  throw ShapeError("rows", "expected rank 1 or 2, got " + shape_to_string(shape_));
}

std::size_t Tensor::cols() const {
  if (rank() == 2) return shape_[1];
  if (rank() == 1) return shape_[0];
  throw ShapeError("cols", "expected rank 1 or 2, got " + shape_to_string(shape_));
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item", "tensor has " + shape_to_string(shape_));
  return data_[0];
}

std::span<const double> Tensor::row(std::size_t r) const {
  const std::size_t c = cols();
  return std::span<const double>(data_).subspan(r * c, c);
}

std::span<double> Tensor::row(std::size_t r) {
  const std::size_t c = cols();
  return std::span<double>(data_).subspan(r * c, c);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const noexcept { return first_non_finite() == data_.size(); }

std::size_t Tensor::first_non_finite() const noexcept {
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (!std::isfinite(data_[i])) return i;
  }
  return data_.size();
}

Tensor Tensor::slice_rows(std::size_t begin, std::size_t end) const {
  if (rank() != 2 || begin >= end || end > shape_[0]) {
    throw ShapeError("slice_rows", "rows [" + std::to_string(begin) + "," + std::to_string(end) +
                                       ") of " + shape_to_string(shape_));
  }
  const std::size_t c = shape_[1];
  std::vector<double> out(data_.begin() + static_cast<std::ptrdiff_t>(begin * c),
                          data_.begin() + static_cast<std::ptrdiff_t>(end * c));
  return Tensor(Shape{end - begin, c}, std::move(out));
}

Tensor Tensor::gather_rows(std::span<const std::size_t> indices) const {
  if (rank() != 2 || indices.empty()) {
    throw ShapeError("gather_rows", "need rank-2 source and nonempty index list, got " +
                                        shape_to_string(shape_));
  }
  const std::size_t c = shape_[1];
  Tensor out(Shape{indices.size(), c});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= shape_[0]) throw ShapeError("gather_rows", "row index out of range");
    std::memcpy(out.ptr() + i * c, data_.data() + indices[i] * c, c * sizeof(double));
  }
  return out;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) noexcept {
  return a.shape() == b.shape() &&
         std::memcmp(a.ptr(), b.ptr(), a.size() * sizeof(double)) == 0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff", a.shape(), b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace tttflow
