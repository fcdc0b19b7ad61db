#pragma once

// Dense row-major tensor. Rank 1 or 2 covers everything in this codebase;
// batch dimension always comes first.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "ctxwm/common.hpp"

namespace ctxwm {

template <class T>
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> sh) : shape(std::move(sh)) {
    data.assign(size_t(numel_of(shape)), T(0));
  }
  Tensor(std::vector<int64_t> sh, std::vector<T> d) : shape(std::move(sh)), data(std::move(d)) {
    check(int64_t(data.size()) == numel_of(shape), Errc::dimension,
          "tensor data size does not match shape");
  }

  static int64_t numel_of(const std::vector<int64_t>& sh) {
    int64_t n = 1;
    for (int64_t d : sh) {
      check(d >= 0, Errc::dimension, "negative tensor dimension");
      n *= d;
    }
    return n;
  }

  static Tensor zeros(std::vector<int64_t> sh) { return Tensor(std::move(sh)); }

  static Tensor full(std::vector<int64_t> sh, T v) {
    Tensor t(std::move(sh));
    for (auto& x : t.data) x = v;
    return t;
  }

  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  static Tensor row(std::vector<T> v) {
    int64_t n = int64_t(v.size());
    return Tensor({1, n}, std::move(v));
  }

  int64_t numel() const { return int64_t(data.size()); }
  int rank() const { return int(shape.size()); }

  // 2-D accessors; rank-1 tensors behave as a single row
  int64_t rows() const { return rank() == 2 ? shape[0] : 1; }
  int64_t cols() const { return rank() == 2 ? shape[1] : (rank() == 1 ? shape[0] : 1); }

  T& at(int64_t r, int64_t c) { return data[size_t(r * cols() + c)]; }
  const T& at(int64_t r, int64_t c) const { return data[size_t(r * cols() + c)]; }

  T& operator[](int64_t i) { return data[size_t(i)]; }
  const T& operator[](int64_t i) const { return data[size_t(i)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(double(v))) return false;
    return true;
  }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = U(data[i]);
    return out;
  }
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

}  // namespace ctxwm
