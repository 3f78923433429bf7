#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

#include "tttflow/errors.hpp"

namespace tttflow {

std::size_t shape_numel(const Shape& shape);

// Dense row-major float64 array. Rank 0 (scalar), 1 and 2 are used by the
// engine; product(shape) == size() always holds.
class Tensor {
 public:
  Tensor() : shape_{}, data_(1, 0.0) {}
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor vector(std::initializer_list<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values);
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const;
  // Rows/cols of a rank-2 tensor; a rank-1 tensor is treated as one row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  double* ptr() noexcept { return data_.data(); }
  const double* ptr() const noexcept { return data_.data(); }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double item() const;

  std::span<const double> row(std::size_t r) const;
  std::span<double> row(std::size_t r);

  void fill(double v);
  bool all_finite() const noexcept;
  // Flat index of the first NaN/Inf, or size() if none.
  std::size_t first_non_finite() const noexcept;

  // Rows [begin, end) of a rank-2 tensor.
  Tensor slice_rows(std::size_t begin, std::size_t end) const;
  // Rows picked by index, in the given order.
  Tensor gather_rows(std::span<const std::size_t> indices) const;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Bitwise comparison (distinguishes -0.0/+0.0 and NaN payloads).
bool bitwise_equal(const Tensor& a, const Tensor& b) noexcept;
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace tttflow
