#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "d2am/error.hpp"

namespace d2am {

// Batched activations, channel-major: element (c, n, y, x) at ((c * N + n) * H + y) * W + x.
// Keeping the channel outermost lets a convolution write its GEMM output in place.
template <class T>
struct FeatureMap {
  int channels = 0;
  int batch = 0;
  int height = 0;
  int width = 0;
  std::vector<T> data;

  FeatureMap() = default;
  FeatureMap(int c, int n, int h, int w)
      : channels(c), batch(n), height(h), width(w), data(static_cast<std::size_t>(c) * n * h * w, T(0)) {}

  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  std::size_t size() const { return data.size(); }

  T* plane_ptr(int c, int n) { return data.data() + (static_cast<std::size_t>(c) * batch + n) * plane(); }
  const T* plane_ptr(int c, int n) const {
    return data.data() + (static_cast<std::size_t>(c) * batch + n) * plane();
  }

  T& at(int c, int n, int y, int x) { return plane_ptr(c, n)[static_cast<std::size_t>(y) * width + x]; }
  const T& at(int c, int n, int y, int x) const {
    return plane_ptr(c, n)[static_cast<std::size_t>(y) * width + x];
  }

  bool same_shape(const FeatureMap& o) const {
    return channels == o.channels && batch == o.batch && height == o.height && width == o.width;
  }

  std::string shape_string() const {
    return std::to_string(channels) + "x" + std::to_string(batch) + "x" + std::to_string(height) + "x" +
           std::to_string(width);
  }
};

// Row-major dense matrix; rows are samples.
template <class T>
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, T(0)) {}

  T& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  const T& operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
  T* row(int r) { return data.data() + static_cast<std::size_t>(r) * cols; }
  const T* row(int r) const { return data.data() + static_cast<std::size_t>(r) * cols; }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

// One learnable tensor.
template <class T>
struct Param {
  std::vector<int> shape;
  std::vector<T> value;

  Param() = default;
  explicit Param(std::vector<int> s) : shape(std::move(s)) {
    value.assign(std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                                 [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); }),
                 T(0));
  }

  std::size_t size() const { return value.size(); }
  T* data() { return value.data(); }
  const T* data() const { return value.data(); }
  T& operator[](std::size_t i) { return value[i]; }
  const T& operator[](std::size_t i) const { return value[i]; }
};

template <class U, class T>
Param<U> cast_param(const Param<T>& p) {
  Param<U> out;
  out.shape = p.shape;
  out.value.resize(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) out.value[i] = static_cast<U>(p.value[i]);
  return out;
}

template <class T>
bool all_finite(const std::vector<T>& v) {
  for (const auto& x : v)
    if (!std::isfinite(static_cast<double>(x))) return false;
  return true;
}

}  // namespace d2am
