#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dove/common.hpp"
#include "dove/rng.hpp"

namespace dove {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// Dense row-major tensor. Value semantics throughout; shapes are explicit and
// checked at op boundaries rather than broadcast implicitly.
template <typename T>
class Tensor {
 public:
  using Buffer = std::vector<T, AlignedAllocator<T>>;

  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), T(0)) {}
  Tensor(Shape shape, T fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, const std::vector<T>& data)
      : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    if (static_cast<int64_t>(data_.size()) != shape_numel(shape_))
      throw ShapeError("tensor data size does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }

  static Tensor random_uniform(Shape shape, Rng& rng, T lo = T(0), T hi = T(1)) {
    Tensor t(std::move(shape));
    for (T& v : t.data_) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  static Tensor random_normal(Shape shape, Rng& rng, T mean = T(0), T stddev = T(1)) {
    Tensor t(std::move(shape));
    for (T& v : t.data_) v = static_cast<T>(rng.normal(mean, stddev));
    return t;
  }

  const Shape& shape() const { return shape_; }
  int64_t dim(size_t i) const { return shape_[i]; }
  size_t rank() const { return shape_.size(); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  Buffer& vec() { return data_; }
  const Buffer& vec() const { return data_; }

  T& operator[](int64_t i) { return data_[i]; }
  const T& operator[](int64_t i) const { return data_[i]; }

  T& at(int64_t i, int64_t j) { return data_[i * shape_[1] + j]; }
  const T& at(int64_t i, int64_t j) const { return data_[i * shape_[1] + j]; }
  T& at(int64_t c, int64_t i, int64_t j) { return data_[(c * shape_[1] + i) * shape_[2] + j]; }
  const T& at(int64_t c, int64_t i, int64_t j) const {
    return data_[(c * shape_[1] + i) * shape_[2] + j];
  }
  T& at(int64_t n, int64_t c, int64_t i, int64_t j) {
    return data_[((n * shape_[1] + c) * shape_[2] + i) * shape_[3] + j];
  }
  const T& at(int64_t n, int64_t c, int64_t i, int64_t j) const {
    return data_[((n * shape_[1] + c) * shape_[2] + i) * shape_[3] + j];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel())
      throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(shape) +
                       " changes element count");
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool all_finite() const {
    for (T v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> t(shape_);
    for (int64_t i = 0; i < numel(); ++i) t[i] = static_cast<U>(data_[i]);
    return t;
  }

  Tensor& operator+=(const Tensor& o) {
    check_same(o, "+=");
    for (int64_t i = 0; i < numel(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator-=(const Tensor& o) {
    check_same(o, "-=");
    for (int64_t i = 0; i < numel(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Tensor& operator*=(T s) {
    for (T& v : data_) v *= s;
    return *this;
  }

  double sum() const {
    double acc = 0.0;
    for (T v : data_) acc += static_cast<double>(v);
    return acc;
  }
  double mean() const { return numel() ? sum() / static_cast<double>(numel()) : 0.0; }

  double max_abs_diff(const Tensor& o) const {
    check_same(o, "max_abs_diff");
    double m = 0.0;
    for (int64_t i = 0; i < numel(); ++i)
      m = std::max(m, std::abs(static_cast<double>(data_[i]) - static_cast<double>(o.data_[i])));
    return m;
  }

 private:
  void check_same(const Tensor& o, const char* op) const {
    if (!same_shape(o))
      throw ShapeError(std::string("tensor ") + op + ": shape mismatch " + shape_str(shape_) +
                       " vs " + shape_str(o.shape_));
  }

  Shape shape_;
  Buffer data_;
};

template <typename T>
Tensor<T> operator+(Tensor<T> a, const Tensor<T>& b) {
  a += b;
  return a;
}
template <typename T>
Tensor<T> operator-(Tensor<T> a, const Tensor<T>& b) {
  a -= b;
  return a;
}
template <typename T>
Tensor<T> operator*(Tensor<T> a, T s) {
  a *= s;
  return a;
}

}  // namespace dove
