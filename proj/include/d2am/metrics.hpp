#pragma once

// Presentation-attack metrics. Scores are p(live); a sample is accepted as live
// when score >= threshold. FAR counts accepted spoofs, FRR rejected lives.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <vector>

#include "d2am/error.hpp"
#include "d2am/losses.hpp"
#include "d2am/rng.hpp"
#include "d2am/tensor.hpp"

namespace d2am {

struct RocPoint {
  double far = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;
};

struct RocCurve {
  std::vector<RocPoint> points;  // from (0,0) to (1,1), FAR nondecreasing
  double auc = 0.0;
};

struct ErrorRates {
  double far = 0.0;
  double frr = 0.0;
  double hter() const { return 0.5 * (far + frr); }
};

namespace detail {
inline void check_binary(std::span<const double> scores, std::span<const int> labels, const char* who) {
  require(scores.size() == labels.size(), std::string(who) + ": scores/labels size mismatch");
  bool live = false, spoof = false;
  for (int y : labels) {
    if (y == 1) live = true;
    else if (y == 0) spoof = true;
    else throw ContractError(std::string(who) + ": label " + std::to_string(y) + " not in {0,1}");
  }
  if (!live || !spoof) throw ContractError(std::string(who) + ": both classes must be present");
}
}  // namespace detail

inline ErrorRates error_rates(std::span<const double> scores, std::span<const int> labels, double threshold) {
  detail::check_binary(scores, labels, "error_rates");
  double fa = 0, fr = 0, n_spoof = 0, n_live = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] == 1) {
      n_live += 1;
      if (scores[i] < threshold) fr += 1;
    } else {
      n_spoof += 1;
      if (scores[i] >= threshold) fa += 1;
    }
  }
  return {fa / n_spoof, fr / n_live};
}

inline double hter(std::span<const double> scores, std::span<const int> labels, double threshold) {
  return error_rates(scores, labels, threshold).hter();
}

// Sweeps every distinct score as a threshold, highest first; tied scores move together.
inline RocCurve roc_and_auc(std::span<const double> scores, std::span<const int> labels) {
  detail::check_binary(scores, labels, "roc_and_auc");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double n_live = 0, n_spoof = 0;
  for (int y : labels) (y == 1 ? n_live : n_spoof) += 1;
  RocCurve roc;
  roc.points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  double tp = 0, fp = 0;
  for (std::size_t k = 0; k < order.size();) {
    const double s = scores[order[k]];
    while (k < order.size() && scores[order[k]] == s) {
      (labels[order[k]] == 1 ? tp : fp) += 1;
      ++k;
    }
    roc.points.push_back({fp / n_spoof, tp / n_live, s});
  }
  for (std::size_t k = 1; k < roc.points.size(); ++k) {
    const auto& a = roc.points[k - 1];
    const auto& b = roc.points[k];
    roc.auc += (b.far - a.far) * 0.5 * (a.tpr + b.tpr);
  }
  return roc;
}

// Threshold where FAR and FRR are closest; ties prefer the lower total error,
// then the higher threshold.
inline double eer_threshold(std::span<const double> scores, std::span<const int> labels) {
  const RocCurve roc = roc_and_auc(scores, labels);
  double best = roc.points.back().threshold;
  double best_gap = std::numeric_limits<double>::infinity(), best_sum = best_gap;
  for (std::size_t k = 1; k < roc.points.size(); ++k) {
    const double far = roc.points[k].far, frr = 1.0 - roc.points[k].tpr;
    const double gap = std::abs(far - frr), sum = far + frr;
    if (gap < best_gap - 1e-12 || (std::abs(gap - best_gap) <= 1e-12 && sum < best_sum - 1e-12)) {
      best_gap = gap;
      best_sum = sum;
      best = roc.points[k].threshold;
    }
  }
  return best;
}

// Biased squared MMD between two sets of possibly different sizes, fixed kernel.
inline double mmd_between(const Matrix<double>& x, const Matrix<double>& y, const KernelSpec& kernel) {
  require(x.cols == y.cols && x.rows > 0 && y.rows > 0, "mmd_between: empty set or dimension mismatch");
  auto mean_k = [&](const Matrix<double>& a, const Matrix<double>& b) {
    double s = 0;
    for (int i = 0; i < a.rows; ++i)
      for (int j = 0; j < b.rows; ++j) s += kernel_value(kernel, squared_distance(a.row(i), b.row(j), a.cols));
    return s / (static_cast<double>(a.rows) * b.rows);
  };
  return std::max(0.0, mean_k(x, x) + mean_k(y, y) - 2.0 * mean_k(x, y));
}

struct DomainMmdReport {
  std::vector<int> domains;               // sorted distinct labels
  std::vector<std::vector<double>> pair;  // symmetric, zero diagonal; NaN where skipped
  double mean_off_diagonal = 0.0;
};

// Pairwise MMD between the embedding sets of each domain. Each set is subsampled to
// at most max_per_domain rows (0 = no limit) with a stream keyed by seed; the kernel
// is the median heuristic on each merged pair.
inline DomainMmdReport inter_domain_mmd(const Matrix<double>& emb, std::span<const int> labels,
                                        std::size_t max_per_domain = 0, std::uint64_t seed = 0) {
  require(labels.size() == static_cast<std::size_t>(emb.rows), "inter_domain_mmd: labels/embedding mismatch");
  std::map<int, std::vector<int>> members;
  for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(static_cast<int>(i));
  if (members.size() < 2) throw ContractError("inter_domain_mmd: need at least two domains");
  DomainMmdReport r;
  std::vector<Matrix<double>> sets;
  Rng rng(stream_seed(seed, {stream::kAnalysis}));
  for (auto& [d, idx] : members) {
    if (max_per_domain > 0 && idx.size() > max_per_domain) {
      rng.shuffle(idx.begin(), idx.end());
      idx.resize(max_per_domain);
      std::sort(idx.begin(), idx.end());
    }
    Matrix<double> m(static_cast<int>(idx.size()), emb.cols);
    for (std::size_t k = 0; k < idx.size(); ++k)
      std::copy(emb.row(idx[k]), emb.row(idx[k]) + emb.cols, m.row(static_cast<int>(k)));
    r.domains.push_back(d);
    sets.push_back(std::move(m));
  }
  const std::size_t k = sets.size();
  r.pair.assign(k, std::vector<double>(k, 0.0));
  double sum = 0;
  int count = 0;
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t b = a + 1; b < k; ++b) {
      if (sets[a].rows < 2 || sets[b].rows < 2) {
        warn("inter_domain_mmd: domain " + std::to_string(sets[a].rows < 2 ? r.domains[a] : r.domains[b]) +
             " is a singleton; skipping pair");
        r.pair[a][b] = r.pair[b][a] = std::numeric_limits<double>::quiet_NaN();
        continue;
      }
      const double v = mmd_between(sets[a], sets[b], median_heuristic_kernel(sets[a], sets[b]));
      r.pair[a][b] = r.pair[b][a] = v;
      sum += v;
      ++count;
    }
  r.mean_off_diagonal = count > 0 ? sum / count : std::numeric_limits<double>::quiet_NaN();
  return r;
}

}  // namespace d2am
