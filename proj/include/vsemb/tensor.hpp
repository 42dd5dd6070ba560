#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <vector>

#include "vsemb/common.hpp"

namespace vsemb {

// Dense row-major array. Values are 64-bit in memory; the on-disk format
// (tensor_io.hpp) stores 32-bit floats.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> dims, double fill = 0.0)
      : dims_(std::move(dims)),
        data_(checked_numel(dims_), fill) {}

  Tensor(std::vector<std::size_t> dims, std::vector<double> data)
      : dims_(std::move(dims)), data_(std::move(data)) {
    if (data_.size() != checked_numel(dims_))
      throw ConfigError("tensor: data length does not match dims");
  }

  static Tensor vector_of(std::vector<double> v) {
    std::vector<std::size_t> d{v.size()};
    return Tensor(std::move(d), std::move(v));
  }

  const std::vector<std::size_t>& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t dim(std::size_t i) const { return dims_[i]; }
  std::size_t numel() const { return data_.size(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }

  double& operator()(std::size_t i) { return data_[i]; }
  const double& operator()(std::size_t i) const { return data_[i]; }

  double& operator()(std::size_t i, std::size_t j) {
    return data_[i * dims_[1] + j];
  }
  const double& operator()(std::size_t i, std::size_t j) const {
    return data_[i * dims_[1] + j];
  }

  double& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * dims_[1] + j) * dims_[2] + k];
  }
  const double& operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * dims_[1] + j) * dims_[2] + k];
  }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool same_shape(const Tensor& other) const { return dims_ == other.dims_; }

  std::string shape_str() const {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < dims_.size(); ++i)
      os << (i ? "," : "") << dims_[i];
    os << ")";
    return os.str();
  }

 private:
  static std::size_t checked_numel(const std::vector<std::size_t>& dims) {
    std::size_t n = 1;
    for (std::size_t d : dims) {
      if (d == 0) throw ConfigError("tensor: zero dimension");
      n *= d;
    }
    return n;
  }

  std::vector<std::size_t> dims_;
  std::vector<double> data_;
};

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double squared_distance(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace vsemb
