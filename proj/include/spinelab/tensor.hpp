#ifndef SPINELAB_TENSOR_HPP_
#define SPINELAB_TENSOR_HPP_

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <vector>

#include "spinelab/error.hpp"

namespace spinelab {

/// Dense row-major n-dimensional array. Value type; copies are deep.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(numel_of(shape_)), T{});
  }

  Tensor(std::initializer_list<int64_t> shape)
      : Tensor(std::vector<int64_t>(shape)) {}

  static Tensor full(std::vector<int64_t> shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t dim(size_t axis) const { return shape_.at(axis); }
  size_t rank() const { return shape_.size(); }
  int64_t numel() const { return numel_of(shape_); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // Row-major offsets; callers index hot loops directly for speed.
  T& at(int64_t i0) { return data_[static_cast<size_t>(i0)]; }
  T& at(int64_t i0, int64_t i1) {
    return data_[static_cast<size_t>(i0 * shape_[1] + i1)];
  }
  T& at(int64_t i0, int64_t i1, int64_t i2) {
    return data_[static_cast<size_t>((i0 * shape_[1] + i1) * shape_[2] + i2)];
  }
  T& at(int64_t i0, int64_t i1, int64_t i2, int64_t i3) {
    return data_[static_cast<size_t>(
        (((i0 * shape_[1] + i1) * shape_[2]) + i2) * shape_[3] + i3)];
  }
  const T& at(int64_t i0) const { return data_[static_cast<size_t>(i0)]; }
  const T& at(int64_t i0, int64_t i1) const {
    return data_[static_cast<size_t>(i0 * shape_[1] + i1)];
  }
  const T& at(int64_t i0, int64_t i1, int64_t i2) const {
    return data_[static_cast<size_t>((i0 * shape_[1] + i1) * shape_[2] + i2)];
  }
  const T& at(int64_t i0, int64_t i1, int64_t i2, int64_t i3) const {
    return data_[static_cast<size_t>(
        (((i0 * shape_[1] + i1) * shape_[2]) + i2) * shape_[3] + i3)];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (int64_t i = 0; i < numel(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  static int64_t numel_of(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
      if (d < 0) throw ShapeError("negative tensor extent");
      n *= d;
    }
    return n;
  }

  static std::string shape_string(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) os << ", ";
      os << shape[i];
    }
    os << ")";
    return os.str();
  }

 private:
  std::vector<int64_t> shape_;
  std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace spinelab

#endif  // SPINELAB_TENSOR_HPP_
