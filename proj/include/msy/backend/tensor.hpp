#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "msy/backend/memory.hpp"

namespace msy {

// Raised when a caller breaks an operation's documented precondition
// (shape mismatch, crop larger than input, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Batch x channels x height x width. Vectors are stored as N x C x 1 x 1.
struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t numel() const { return static_cast<std::size_t>(n) * c * h * w; }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const {
    return "[" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + "]";
  }
};

template <typename T>
class Tensor {
 public:
  using Storage = std::vector<T, TrackingAllocator<T>>;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape_(s), data_(s.numel(), fill) {
    if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1) {
      throw ContractError("tensor dimensions must be >= 1, got " + s.str());
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return {data_.data(), data_.size()}; }
  std::span<const T> span() const { return {data_.data(), data_.size()}; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::size_t index(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }
  T& at(int n, int c, int y, int x) { return data_[index(n, c, y, x)]; }
  const T& at(int n, int c, int y, int x) const { return data_[index(n, c, y, x)]; }

  T* plane(int n, int c) { return data_.data() + index(n, c, 0, 0); }
  const T* plane(int n, int c) const { return data_.data() + index(n, c, 0, 0); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(T(0)); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  // Returns a tensor of the same data with a different shape of equal size.
  Tensor reshaped(Shape s) const {
    if (s.numel() != numel()) {
      throw ContractError("reshape " + shape_.str() + " -> " + s.str() + " changes element count");
    }
    Tensor out = *this;
    out.shape_ = s;
    return out;
  }

  Tensor& operator+=(const Tensor& o) {
    check_same(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

 private:
  void check_same(const Tensor& o) const {
    if (!(o.shape_ == shape_)) throw ContractError("shape mismatch " + shape_.str() + " vs " + o.shape_.str());
  }

  Shape shape_{};
  Storage data_;
};

}  // namespace msy
