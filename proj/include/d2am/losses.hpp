#pragma once

// Classification, MMD-to-prior and depth objectives. Each takes an optional
// output span/matrix; when supplied it is overwritten with d(loss)/d(input).

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "d2am/dual.hpp"
#include "d2am/error.hpp"
#include "d2am/rng.hpp"
#include "d2am/tensor.hpp"

namespace d2am {

inline constexpr double kProbClamp = 1e-7;

// Mean binary cross-entropy -[y ln p + (1-y) ln(1-p)] over the batch. Probabilities are
// clamped to [1e-7, 1-1e-7]; clamped entries contribute zero gradient.
template <class T>
T bce_loss(std::span<const T> p, std::span<const int> y, std::span<T> d_p = {}) {
  using std::log;
  require(p.size() == y.size() && !p.empty(), "bce_loss: probability/label size mismatch");
  if (!d_p.empty()) require(d_p.size() == p.size(), "bce_loss: gradient buffer size mismatch");
  const T lo(kProbClamp), hi(1.0 - kProbClamp);
  const T inv_n = T(1) / static_cast<T>(p.size());
  T total = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(value_of(p[i]) >= 0.0 && value_of(p[i]) <= 1.0))
      throw ContractError("bce_loss: probability " + std::to_string(value_of(p[i])) + " outside [0,1]");
    const bool clamped = p[i] < lo || p[i] > hi;
    const T q = p[i] < lo ? lo : (p[i] > hi ? hi : p[i]);
    const bool live = y[i] == 1;
    total -= live ? log(q) : log(T(1) - q);
    if (!d_p.empty()) d_p[i] = clamped ? T(0) : (live ? -inv_n / q : inv_n / (T(1) - q));
  }
  return total * inv_n;
}

// Unweighted sum of Gaussian RBF kernels k(x,y) = sum_k exp(-|x-y|^2 / (2 s_k)), s_k = sigma^2.
struct KernelSpec {
  std::vector<double> bandwidths{1.0};

  void validate() const {
    require(!bandwidths.empty(), "KernelSpec: need at least one bandwidth");
    for (double b : bandwidths) require(b > 0.0 && std::isfinite(b), "KernelSpec: bandwidths must be positive");
  }
};

template <class T>
T squared_distance(const T* a, const T* b, int d) {
  T s = 0;
  for (int k = 0; k < d; ++k) {
    const T diff = a[k] - b[k];
    s += diff * diff;
  }
  return s;
}

template <class T>
T kernel_value(const KernelSpec& kernel, const T& sq_dist) {
  using std::exp;
  T k = 0;
  for (double s : kernel.bandwidths) k += exp(-sq_dist / T(2.0 * s));
  return k;
}

// Median heuristic: bandwidths {0.5, 1, 2} x median pairwise squared distance of the
// merged sample (i < j pairs). Falls back to 1 when every point coincides.
template <class T>
KernelSpec median_heuristic_kernel(const Matrix<T>& a, const Matrix<T>& b) {
  require(a.cols == b.cols, "median_heuristic_kernel: dimension mismatch");
  std::vector<const T*> rows;
  for (int i = 0; i < a.rows; ++i) rows.push_back(a.row(i));
  for (int i = 0; i < b.rows; ++i) rows.push_back(b.row(i));
  std::vector<double> d;
  d.reserve(rows.size() * (rows.size() - 1) / 2);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = i + 1; j < rows.size(); ++j) d.push_back(value_of(squared_distance(rows[i], rows[j], a.cols)));
  double med = 0.0;
  if (!d.empty()) {
    const std::size_t mid = d.size() / 2;
    std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid), d.end());
    med = d[mid];
    if (d.size() % 2 == 0) {
      const double lower = *std::max_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid));
      med = 0.5 * (med + lower);
    }
  }
  if (!(med > 1e-12) || !std::isfinite(med)) med = 1.0;
  return KernelSpec{{0.5 * med, med, 2.0 * med}};
}

// Biased (V-statistic) squared MMD between the rows of h and t:
//   mean k(h,h') + mean k(t,t') - 2 mean k(h,t).
// The kernel is treated as fixed; d_h receives the gradient w.r.t. h.
template <class T>
T mmd_to_prior(const Matrix<T>& h, const Matrix<T>& t, const KernelSpec& kernel, Matrix<T>* d_h = nullptr) {
  using std::exp;
  require(h.rows == t.rows && h.cols == t.cols && h.rows > 0,
          "mmd_to_prior: samples must have equal size and dimension");
  kernel.validate();
  if (d_h) *d_h = Matrix<T>(h.rows, h.cols);
  const int b = h.rows, d = h.cols;
  const T inv_b2 = T(1) / static_cast<T>(b * b);
  T khh = 0, ktt = 0, kht = 0;
  // d k / d x for k = exp(-|x-y|^2 / (2 s)) is -k (x - y) / s.
  auto pair_grad = [&](const T* x, const T* y, const T& sq, T* out, const T& scale) {
    T coeff = 0;
    for (double s : kernel.bandwidths) coeff += exp(-sq / T(2.0 * s)) / T(s);
    coeff *= scale;
    for (int k = 0; k < d; ++k) out[k] -= coeff * (x[k] - y[k]);
  };
  for (int i = 0; i < b; ++i) {
    for (int j = 0; j < b; ++j) {
      const T sq = squared_distance(h.row(i), h.row(j), d);
      khh += kernel_value(kernel, sq);
      // Symmetric pair appears twice in the double sum.
      if (d_h && i != j) pair_grad(h.row(i), h.row(j), sq, d_h->row(i), T(2) * inv_b2);
      ktt += kernel_value(kernel, squared_distance(t.row(i), t.row(j), d));
      const T sq_ht = squared_distance(h.row(i), t.row(j), d);
      kht += kernel_value(kernel, sq_ht);
      if (d_h) pair_grad(h.row(i), t.row(j), sq_ht, d_h->row(i), T(-2) * inv_b2);
    }
  }
  return (khh + ktt - T(2) * kht) * inv_b2;
}

namespace detail {
// Merged-sample row r of [h; t].
template <class T>
const T* merged_row(const Matrix<T>& h, const Matrix<T>& t, int r) {
  return r < h.rows ? h.row(r) : t.row(r - h.rows);
}
}  // namespace detail

// Squared MMD with the median-heuristic kernel of the merged sample, differentiated
// through the bandwidth as well: the median is the squared distance of one (or the mean
// of two) specific pairs, so it is a smooth function of h away from ties.
template <class T>
T mmd_to_prior_median(const Matrix<T>& h, const Matrix<T>& t, Matrix<T>* d_h = nullptr) {
  using std::exp;
  require(h.rows == t.rows && h.cols == t.cols && h.rows > 0,
          "mmd_to_prior: samples must have equal size and dimension");
  const int n = 2 * h.rows, d = h.cols;
  struct PairDist {
    double v;
    int a, b;
  };
  std::vector<PairDist> pd;
  pd.reserve(static_cast<std::size_t>(n) * (n - 1) / 2);
  for (int a = 0; a < n; ++a)
    for (int b = a + 1; b < n; ++b)
      pd.push_back({value_of(squared_distance(detail::merged_row(h, t, a), detail::merged_row(h, t, b), d)), a, b});
  std::vector<std::pair<int, int>> median_pairs;
  if (!pd.empty()) {
    const std::size_t mid = pd.size() / 2;
    auto by_v = [](const PairDist& x, const PairDist& y) { return x.v < y.v; };
    std::nth_element(pd.begin(), pd.begin() + static_cast<std::ptrdiff_t>(mid), pd.end(), by_v);
    median_pairs.emplace_back(pd[mid].a, pd[mid].b);
    if (pd.size() % 2 == 0) {
      const auto lower = std::max_element(pd.begin(), pd.begin() + static_cast<std::ptrdiff_t>(mid), by_v);
      median_pairs.emplace_back(lower->a, lower->b);
    }
  }
  T med = 0;
  for (const auto& [a, b] : median_pairs)
    med += squared_distance(detail::merged_row(h, t, a), detail::merged_row(h, t, b), d);
  if (!median_pairs.empty()) med = med / static_cast<T>(median_pairs.size());
  const bool adaptive = value_of(med) > 1e-12 && std::isfinite(value_of(med));
  if (!adaptive) {
    med = T(1);
    median_pairs.clear();
  }
  static constexpr std::array<double, 3> kScales{0.5, 1.0, 2.0};
  std::array<T, 3> s{T(kScales[0]) * med, T(kScales[1]) * med, T(kScales[2]) * med};

  const int b = h.rows;
  const T inv_b2 = T(1) / static_cast<T>(b * b);
  if (d_h) *d_h = Matrix<T>(h.rows, h.cols);
  T total = 0;
  T d_med = 0;  // d total / d med through the bandwidths
  // weight w: +1 for hh and tt pairs, -2 for ht pairs (each over ordered pairs, / b^2)
  auto visit = [&](const T* x, const T* y, const T& w, T* grad_x) {
    const T sq = squared_distance(x, y, d);
    T k = 0, dk_dsq = 0, dk_dmed = 0;
    for (std::size_t q = 0; q < s.size(); ++q) {
      const T e = exp(-sq / (T(2) * s[q]));
      k += e;
      dk_dsq -= e / (T(2) * s[q]);
      dk_dmed += e * sq / (T(2) * s[q] * s[q]) * T(kScales[q]);
    }
    total += w * k;
    if (!d_h) return;
    d_med += w * dk_dmed;
    if (grad_x) {
      const T c = T(2) * w * dk_dsq;  // d sq / d x = 2 (x - y)
      for (int q = 0; q < d; ++q) grad_x[q] += c * (x[q] - y[q]);
    }
  };
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < b; ++j) {
      // Symmetric hh pairs: the (j, i) visit covers row j, so each visit updates row i only,
      // doubled.
      visit(h.row(i), h.row(j), inv_b2, nullptr);
      visit(t.row(i), t.row(j), inv_b2, nullptr);
      visit(h.row(i), t.row(j), T(-2) * inv_b2, d_h ? d_h->row(i) : nullptr);
    }
  if (d_h) {
    // hh contributions: d/dh_i sum_{a,b} k(h_a, h_b) = 2 sum_j dk(h_i, h_j)/dh_i.
    for (int i = 0; i < b; ++i)
      for (int j = 0; j < b; ++j) {
        if (i == j) continue;
        const T sq = squared_distance(h.row(i), h.row(j), d);
        T dk_dsq = 0;
        for (const auto& sq_s : s) dk_dsq -= exp(-sq / (T(2) * sq_s)) / (T(2) * sq_s);
        const T c = T(2) * inv_b2 * T(2) * dk_dsq;
        for (int q = 0; q < d; ++q) (*d_h)(i, q) += c * (h(i, q) - h(j, q));
      }
    if (!median_pairs.empty()) {
      const T scale = d_med / static_cast<T>(median_pairs.size());
      for (const auto& [a, bb] : median_pairs) {
        const T* x = detail::merged_row(h, t, a);
        const T* y = detail::merged_row(h, t, bb);
        for (int q = 0; q < d; ++q) {
          const T g = scale * T(2) * (x[q] - y[q]);
          if (a < b) (*d_h)(a, q) += g;
          if (bb < b) (*d_h)(bb, q) -= g;
        }
      }
    }
  }
  return total;
}

// Standard-normal draws with the shape of the adaptation features.
template <class T>
Matrix<T> draw_prior(int rows, int cols, Rng& rng) {
  Matrix<T> m(rows, cols);
  for (auto& v : m.data) v = static_cast<T>(rng.normal());
  return m;
}

// Mean over the batch of the per-sample sum of squared differences.
template <class T>
T depth_loss(const Matrix<T>& pred, const Matrix<T>& target, Matrix<T>* d_pred = nullptr) {
  require(pred.same_shape(target) && pred.rows > 0, "depth_loss: prediction/target shape mismatch");
  if (d_pred) *d_pred = Matrix<T>(pred.rows, pred.cols);
  const T inv_n = T(1) / static_cast<T>(pred.rows);
  T total = 0;
  for (std::size_t k = 0; k < pred.data.size(); ++k) {
    const T diff = pred.data[k] - target.data[k];
    total += diff * diff;
    if (d_pred) d_pred->data[k] = T(2) * diff * inv_n;
  }
  return total * inv_n;
}

}  // namespace d2am
