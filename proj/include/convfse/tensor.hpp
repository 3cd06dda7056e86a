#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "convfse/errors.hpp"
#include "convfse/rng.hpp"

namespace convfse {

// Dense row-major tensor, up to 4 dimensions. float for training/inference,
// double for gradient checking; both instantiations share all kernels.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape, T fill = T(0))
      : shape_(std::move(shape)) {
    data_.assign(checked_numel(shape_), fill);
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, T v) { return Tensor(std::move(shape), v); }

  static Tensor uniform(std::vector<int> shape, Rng& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  const std::vector<int>& shape() const { return shape_; }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(int a) { return data_[static_cast<std::size_t>(a)]; }
  const T& at(int a) const { return data_[static_cast<std::size_t>(a)]; }

  T& at(int a, int b) { return data_[idx2(a, b)]; }
  const T& at(int a, int b) const { return data_[idx2(a, b)]; }

  T& at(int a, int b, int c) { return data_[idx3(a, b, c)]; }
  const T& at(int a, int b, int c) const { return data_[idx3(a, b, c)]; }

  T& at(int a, int b, int c, int d) { return data_[idx4(a, b, c, d)]; }
  const T& at(int a, int b, int c, int d) const { return data_[idx4(a, b, c, d)]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    for (const T& x : data_)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i)
      out[i] = static_cast<U>(data_[i]);
    return out;
  }

  static std::string shape_str(const std::vector<int>& s) {
    std::string r = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i) r += ",";
      r += std::to_string(s[i]);
    }
    return r + "]";
  }

 private:
  std::size_t idx2(int a, int b) const {
    return static_cast<std::size_t>(a) * shape_[1] + b;
  }
  std::size_t idx3(int a, int b, int c) const {
    return (static_cast<std::size_t>(a) * shape_[1] + b) * shape_[2] + c;
  }
  std::size_t idx4(int a, int b, int c, int d) const {
    return ((static_cast<std::size_t>(a) * shape_[1] + b) * shape_[2] + c) * shape_[3] + d;
  }

  static std::size_t checked_numel(const std::vector<int>& shape) {
    if (shape.empty() || shape.size() > 4)
      throw ShapeError("tensor rank must be 1..4, got " + shape_str(shape));
    std::size_t n = 1;
    for (int d : shape) {
      if (d < 1) throw ShapeError("tensor dims must be positive, got " + shape_str(shape));
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  std::vector<int> shape_;
  std::vector<T> data_;
};

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) throw ShapeError("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

}  // namespace convfse
