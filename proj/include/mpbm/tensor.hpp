#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace mpbm {

// Dense row-major N-dimensional array of doubles.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<size_t> shape);  // zero-filled
  Tensor(std::vector<size_t> shape, std::vector<double> data);

  static Tensor scalar(double v);
  static Tensor row(std::vector<double> v);  // 1 x n
  static Tensor matrix(size_t rows, size_t cols, std::vector<double> data);
  static Tensor full(std::vector<size_t> shape, double v);

  const std::vector<size_t>& shape() const { return shape_; }
  size_t ndim() const { return shape_.size(); }
  size_t size() const { return data_.size(); }
  size_t extent(size_t axis) const;
  size_t rows() const { return extent(0); }
  size_t cols() const { return extent(1); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](size_t i) { return data_[i]; }
  double operator[](size_t i) const { return data_[i]; }
  double& at(size_t i, size_t j);
  double at(size_t i, size_t j) const;

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  Tensor reshaped(std::vector<size_t> shape) const;
  std::string shape_str() const;

  bool all_finite() const;
  void require_finite(const char* who) const;  // throws on NaN/Inf

 private:
  std::vector<size_t> shape_;
  std::vector<double> data_;
};

size_t shape_numel(const std::vector<size_t>& shape);
std::string shape_to_string(const std::vector<size_t>& shape);

}  // namespace mpbm
