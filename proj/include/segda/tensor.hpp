#pragma once

#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace segda {

// Dense row-major double tensor, rank 0..4. Shape is fixed after
// construction; values are mutable.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape, double fill = 0.0)
      : shape_(std::move(shape)), values_(checked_numel(shape_), fill) {}

  Tensor(std::vector<int> shape, std::vector<double> values)
      : shape_(std::move(shape)), values_(std::move(values)) {
    if (static_cast<std::size_t>(checked_numel(shape_)) != values_.size()) {
      throw std::invalid_argument("Tensor: value count " +
                                  std::to_string(values_.size()) +
                                  " does not match shape " + shape_str());
    }
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor full(std::vector<int> shape, double v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  const std::vector<int>& shape() const { return shape_; }
  int numel() const { return static_cast<int>(values_.size()); }

  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }

  double& operator[](int i) { return values_[static_cast<std::size_t>(i)]; }
  double operator[](int i) const { return values_[static_cast<std::size_t>(i)]; }

  double& at(int i) { return values_[static_cast<std::size_t>(i)]; }
  double& at(int i, int j) { return values_[static_cast<std::size_t>(i * shape_[1] + j)]; }
  double& at(int i, int j, int k) {
    return values_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  double& at(int i, int j, int k, int l) {
    return values_[static_cast<std::size_t>(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
  }
  double at(int i) const { return values_[static_cast<std::size_t>(i)]; }
  double at(int i, int j) const { return values_[static_cast<std::size_t>(i * shape_[1] + j)]; }
  double at(int i, int j, int k) const {
    return values_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  double at(int i, int j, int k, int l) const {
    return values_[static_cast<std::size_t>(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  std::string shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(shape_[i]);
    }
    return s + "]";
  }

 private:
  static int checked_numel(const std::vector<int>& shape) {
    long long n = 1;
    for (int d : shape) {
      if (d <= 0) throw std::invalid_argument("Tensor: non-positive dimension " + std::to_string(d));
      n *= d;
      if (n > (1LL << 31)) throw std::invalid_argument("Tensor: shape too large");
    }
    return static_cast<int>(n);
  }

  std::vector<int> shape_;
  std::vector<double> values_;
};

}  // namespace segda
