#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstddef>
#include <vector>

#include "d2am/tensor.hpp"

namespace d2am::linalg {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

// C (m x n) = alpha * op(A) * op(B) + beta * C, all row-major.
template <class T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, const T* b, T beta, T* c) {
  MapMat<T> cm(c, m, n);
  if (beta == T(0)) cm.setZero();
  else if (beta != T(1)) cm *= beta;
  if (!trans_a && !trans_b) {
    cm.noalias() += alpha * ConstMapMat<T>(a, m, k) * ConstMapMat<T>(b, k, n);
  } else if (trans_a && !trans_b) {
    cm.noalias() += alpha * ConstMapMat<T>(a, k, m).transpose() * ConstMapMat<T>(b, k, n);
  } else if (!trans_a && trans_b) {
    cm.noalias() += alpha * ConstMapMat<T>(a, m, k) * ConstMapMat<T>(b, n, k).transpose();
  } else {
    cm.noalias() += alpha * ConstMapMat<T>(a, k, m).transpose() * ConstMapMat<T>(b, n, k).transpose();
  }
}

// Unfolds a square-kernel, stride-1, "same"-padded convolution input into a
// (C * k * k) x (N * H * W) matrix. Row index is (c * k + ky) * k + kx.
template <class T>
void im2col(const FeatureMap<T>& x, int kernel, std::vector<T>& cols) {
  const int pad = kernel / 2;
  const int h = x.height, w = x.width;
  const std::size_t ncols = static_cast<std::size_t>(x.batch) * h * w;
  cols.assign(static_cast<std::size_t>(x.channels) * kernel * kernel * ncols, T(0));
  for (int c = 0; c < x.channels; ++c) {
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        T* dst = cols.data() + (static_cast<std::size_t>(c * kernel + ky) * kernel + kx) * ncols;
        for (int n = 0; n < x.batch; ++n) {
          const T* src = x.plane_ptr(c, n);
          T* d = dst + static_cast<std::size_t>(n) * h * w;
          for (int y = 0; y < h; ++y) {
            const int sy = y + ky - pad;
            if (sy < 0 || sy >= h) continue;
            const int x_lo = std::max(0, pad - kx);
            const int x_hi = std::min(w, w + pad - kx);
            const T* s = src + static_cast<std::size_t>(sy) * w + (kx - pad);
            T* dr = d + static_cast<std::size_t>(y) * w;
            for (int xx = x_lo; xx < x_hi; ++xx) dr[xx] = s[xx];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters column gradients back onto an input-shaped map (overwrites dx).
template <class T>
void col2im(const std::vector<T>& cols, int kernel, FeatureMap<T>& dx) {
  const int pad = kernel / 2;
  const int h = dx.height, w = dx.width;
  const std::size_t ncols = static_cast<std::size_t>(dx.batch) * h * w;
  std::fill(dx.data.begin(), dx.data.end(), T(0));
  for (int c = 0; c < dx.channels; ++c) {
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        const T* src = cols.data() + (static_cast<std::size_t>(c * kernel + ky) * kernel + kx) * ncols;
        for (int n = 0; n < dx.batch; ++n) {
          T* dst = dx.plane_ptr(c, n);
          const T* s = src + static_cast<std::size_t>(n) * h * w;
          for (int y = 0; y < h; ++y) {
            const int sy = y + ky - pad;
            if (sy < 0 || sy >= h) continue;
            const int x_lo = std::max(0, pad - kx);
            const int x_hi = std::min(w, w + pad - kx);
            T* d = dst + static_cast<std::size_t>(sy) * w + (kx - pad);
            const T* sr = s + static_cast<std::size_t>(y) * w;
            for (int xx = x_lo; xx < x_hi; ++xx) d[xx] += sr[xx];
          }
        }
      }
    }
  }
}

}  // namespace d2am::linalg
