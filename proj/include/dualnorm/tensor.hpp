#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dualnorm/errors.hpp"

namespace dualnorm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense row-major tensor. Activations use NCHW layout.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_)) {
      throw PreconditionError("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                              shape_string(shape_));
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  // Leading-dimension slice [begin, end) of a batch tensor.
  Tensor slice(std::size_t begin, std::size_t end) const {
    const std::size_t stride = shape_.empty() ? 0 : size() / shape_[0];
    Shape s = shape_;
    s[0] = end - begin;
    return Tensor(std::move(s), std::vector<T>(data_.begin() + begin * stride, data_.begin() + end * stride));
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  Shape shape_;
  std::vector<T> data_;
};

// Concatenate batch tensors along dim 0.
template <typename T>
Tensor<T> concat_batch(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  if (!std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1, b.shape().end())) {
    throw PreconditionError("concat_batch: incompatible shapes " + shape_string(a.shape()) + " and " +
                            shape_string(b.shape()));
  }
  Shape s = a.shape();
  s[0] += b.dim(0);
  std::vector<T> data;
  data.reserve(a.size() + b.size());
  data.insert(data.end(), a.storage().begin(), a.storage().end());
  data.insert(data.end(), b.storage().begin(), b.storage().end());
  return Tensor<T>(std::move(s), std::move(data));
}

}  // namespace dualnorm
