#include "mpbm/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <utility>

namespace mpbm {

size_t shape_numel(const std::vector<size_t>& shape) {
  size_t n = 1;
  for (size_t e : shape) n *= e;
  return n;
}

std::string shape_to_string(const std::vector<size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

Tensor::Tensor(std::vector<size_t> shape)
    : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

Tensor::Tensor(std::vector<size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size())
    throw std::runtime_error("tensor: shape " + shape_to_string(shape_) +
                             " does not match data length " + std::to_string(data_.size()));
  require_finite("tensor");
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::row(std::vector<double> v) {
  size_t n = v.size();
  return Tensor({1, n}, std::move(v));
}

Tensor Tensor::matrix(size_t rows, size_t cols, std::vector<double> data) {
  return Tensor({rows, cols}, std::move(data));
}

Tensor Tensor::full(std::vector<size_t> shape, double v) {
  Tensor t(std::move(shape));
  for (size_t i = 0; i < t.size(); ++i) t[i] = v;
  return t;
}

size_t Tensor::extent(size_t axis) const {
  if (axis >= shape_.size())
    throw std::runtime_error("tensor: axis " + std::to_string(axis) + " out of range for shape " +
                             shape_to_string(shape_));
  return shape_[axis];
}

double& Tensor::at(size_t i, size_t j) {
  if (ndim() != 2) throw std::runtime_error("tensor: 2-d accessor on shape " + shape_str());
  return data_[i * shape_[1] + j];
}

double Tensor::at(size_t i, size_t j) const {
  if (ndim() != 2) throw std::runtime_error("tensor: 2-d accessor on shape " + shape_str());
  return data_[i * shape_[1] + j];
}

Tensor Tensor::reshaped(std::vector<size_t> shape) const {
  if (shape_numel(shape) != data_.size())
    throw std::runtime_error("tensor: cannot reshape " + shape_str() + " to " +
                             shape_to_string(shape));
  Tensor out;
  out.shape_ = std::move(shape);
  out.data_ = data_;
  return out;
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

void Tensor::require_finite(const char* who) const {
  if (!all_finite())
    throw std::runtime_error(std::string(who) + ": non-finite entry in tensor " + shape_str());
}

}  // namespace mpbm
