#pragma once

// Pseudo-domain assignment: k-means, Kuhn-Munkres label matching across
// epochs, NMI, silhouette-based choice of K, and the frozen reference
// extractor that bootstraps the first epoch.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "d2am/data_synth.hpp"
#include "d2am/error.hpp"
#include "d2am/model.hpp"
#include "d2am/rng.hpp"

namespace d2am {

using Points = std::vector<std::vector<double>>;

inline double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = a[k] - b[k];
    s += d * d;
  }
  return s;
}

// --- k-means -------------------------------------------------------------------

struct KMeansOptions {
  int max_iter = 100;
  double tol = 1e-6;
  int n_init = 32;  // independent k-means++ restarts; the lowest inertia wins
};

struct KMeansResult {
  std::vector<int> labels;  // 0-based cluster index per point
  Points centroids;
  double inertia = 0.0;
  std::vector<double> inertia_trace;  // per Lloyd iteration of the winning restart
  int iterations = 0;
};

namespace detail {

inline int nearest(const std::vector<double>& p, const Points& centroids, double* best_d = nullptr) {
  int best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.size(); ++c) {
    const double d = sq_dist(p, centroids[c]);
    if (d < bd) {
      bd = d;
      best = static_cast<int>(c);
    }
  }
  if (best_d) *best_d = bd;
  return best;
}

inline Points kmeanspp_init(const Points& pts, int k, Rng& rng) {
  const std::size_t n = pts.size();
  Points c;
  c.push_back(pts[rng.below(n)]);
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = sq_dist(pts[i], c[0]);
  while (static_cast<int>(c.size()) < k) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    std::size_t pick = 0;
    if (total <= 0.0) {
      pick = rng.below(n);
    } else {
      double r = rng.uniform() * total;
      for (pick = 0; pick + 1 < n; ++pick) {
        r -= d2[pick];
        if (r < 0.0) break;
      }
    }
    c.push_back(pts[pick]);
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], sq_dist(pts[i], c.back()));
  }
  return c;
}

// Lloyd iterations from the given centroids.
inline KMeansResult lloyd(const Points& pts, Points centroids, int max_iter, double tol) {
  const std::size_t n = pts.size();
  const std::size_t k = centroids.size();
  const std::size_t d = pts.front().size();
  KMeansResult r;
  r.labels.assign(n, 0);
  std::vector<double> dist(n);
  for (int it = 0; it < max_iter; ++it) {
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      r.labels[i] = nearest(pts[i], centroids, &dist[i]);
      inertia += dist[i];
    }
    r.inertia_trace.push_back(inertia);
    r.iterations = it + 1;
    Points next(k, std::vector<double>(d, 0.0));
    std::vector<std::size_t> count(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      auto& c = next[static_cast<std::size_t>(r.labels[i])];
      for (std::size_t j = 0; j < d; ++j) c[j] += pts[i][j];
      ++count[static_cast<std::size_t>(r.labels[i])];
    }
    std::vector<bool> taken(n, false);
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] > 0) {
        for (auto& v : next[c]) v /= static_cast<double>(count[c]);
        continue;
      }
      // Empty cluster: reseed at the point farthest from its current centroid.
      std::size_t far = 0;
      double fd = -1.0;
      for (std::size_t i = 0; i < n; ++i)
        if (!taken[i] && dist[i] > fd) {
          fd = dist[i];
          far = i;
        }
      taken[far] = true;
      dist[far] = 0.0;
      next[c] = pts[far];
    }
    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c) shift = std::max(shift, std::sqrt(sq_dist(next[c], centroids[c])));
    centroids = std::move(next);
    if (shift < tol) break;
  }
  r.inertia = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double di = 0.0;
    r.labels[i] = nearest(pts[i], centroids, &di);
    r.inertia += di;
  }
  r.centroids = std::move(centroids);
  return r;
}

// Single-point transfers that lower the inertia (Hartigan's criterion). Lloyd stops
// at partitions where no point is nearer another centroid; moving a point also shifts
// both centroids, which can still pay off. Returns true if any point moved.
inline bool hartigan_pass(const Points& pts, KMeansResult& r) {
  const std::size_t n = pts.size(), k = r.centroids.size(), d = pts.front().size();
  Points sum(k, std::vector<double>(d, 0.0));
  std::vector<double> cnt(k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<std::size_t>(r.labels[i]);
    for (std::size_t j = 0; j < d; ++j) sum[c][j] += pts[i][j];
    cnt[c] += 1.0;
  }
  auto centroid_dist = [&](std::size_t i, std::size_t c) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = pts[i][j] - sum[c][j] / cnt[c];
      s += diff * diff;
    }
    return s;
  };
  bool any = false;
  for (bool moved = true; moved;) {
    moved = false;
    for (std::size_t i = 0; i < n; ++i) {
      const auto from = static_cast<std::size_t>(r.labels[i]);
      if (cnt[from] <= 1.0) continue;
      const double remove_gain = cnt[from] / (cnt[from] - 1.0) * centroid_dist(i, from);
      std::size_t to = from;
      double best = remove_gain;
      for (std::size_t c = 0; c < k; ++c) {
        if (c == from || cnt[c] == 0.0) continue;
        const double add_cost = cnt[c] / (cnt[c] + 1.0) * centroid_dist(i, c);
        if (add_cost < best - 1e-12 * std::max(1.0, remove_gain)) {
          best = add_cost;
          to = c;
        }
      }
      if (to == from) continue;
      for (std::size_t j = 0; j < d; ++j) {
        sum[from][j] -= pts[i][j];
        sum[to][j] += pts[i][j];
      }
      cnt[from] -= 1.0;
      cnt[to] += 1.0;
      r.labels[i] = static_cast<int>(to);
      moved = any = true;
    }
  }
  if (any)
    for (std::size_t c = 0; c < k; ++c)
      if (cnt[c] > 0)
        for (std::size_t j = 0; j < d; ++j) r.centroids[c][j] = sum[c][j] / cnt[c];
  return any;
}

// Lloyd to convergence, then alternate Hartigan passes with Lloyd until neither moves.
inline KMeansResult lloyd_hartigan(const Points& pts, Points centroids, int max_iter, double tol) {
  auto r = lloyd(pts, std::move(centroids), max_iter, tol);
  for (int round = 0; round < max_iter && hartigan_pass(pts, r); ++round) {
    auto trace = std::move(r.inertia_trace);
    const int iters = r.iterations;
    r = lloyd(pts, std::move(r.centroids), max_iter, tol);
    trace.insert(trace.end(), r.inertia_trace.begin(), r.inertia_trace.end());
    r.inertia_trace = std::move(trace);
    r.iterations += iters;
  }
  return r;
}

}  // namespace detail

inline KMeansResult kmeans(const Points& pts, int k, std::uint64_t seed, const KMeansOptions& opt = {}) {
  if (k <= 0) throw ContractError("kmeans: K must be positive");
  if (static_cast<int>(pts.size()) < k)
    throw ContractError("kmeans: need N >= K (N=" + std::to_string(pts.size()) + ", K=" + std::to_string(k) + ")");
  const std::size_t d = pts.front().size();
  for (const auto& p : pts) require(p.size() == d, "kmeans: ragged point set");
  KMeansResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (int run = 0; run < std::max(1, opt.n_init); ++run) {
    Rng rng(stream_seed(seed, {stream::kCluster, static_cast<std::uint64_t>(run)}));
    auto r = detail::lloyd_hartigan(pts, detail::kmeanspp_init(pts, k, rng), opt.max_iter, opt.tol);
    if (r.inertia < best.inertia) best = std::move(r);
  }
  return best;
}

// --- Kuhn-Munkres ------------------------------------------------------------------

// Minimum-cost perfect matching on a square matrix; result[row] = assigned column.
inline std::vector<int> kuhn_munkres(const std::vector<std::vector<double>>& cost) {
  const int n = static_cast<int>(cost.size());
  for (const auto& row : cost) {
    if (static_cast<int>(row.size()) != n)
      throw ContractError("kuhn_munkres: cost matrix must be square (" + std::to_string(n) + " rows, row of " +
                          std::to_string(row.size()) + ")");
    for (double v : row)
      if (!std::isfinite(v)) throw ContractError("kuhn_munkres: cost matrix must be finite");
  }
  if (n == 0) return {};
  // Shortest augmenting path with row/column potentials, 1-based internally.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0), v(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<int> match_col(static_cast<std::size_t>(n) + 1, 0), way(static_cast<std::size_t>(n) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    match_col[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(n) + 1, inf);
    std::vector<bool> used(static_cast<std::size_t>(n) + 1, false);
    do {
      used[static_cast<std::size_t>(j0)] = true;
      const int i0 = match_col[static_cast<std::size_t>(j0)];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost[static_cast<std::size_t>(i0 - 1)][static_cast<std::size_t>(j - 1)] -
                           u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(match_col[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (match_col[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      match_col[static_cast<std::size_t>(j0)] = match_col[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> result(static_cast<std::size_t>(n), 0);
  for (int j = 1; j <= n; ++j) result[static_cast<std::size_t>(match_col[static_cast<std::size_t>(j)] - 1)] = j - 1;
  return result;
}

inline double assignment_cost(const std::vector<std::vector<double>>& cost, const std::vector<int>& perm) {
  double s = 0.0;
  for (std::size_t i = 0; i < perm.size(); ++i) s += cost[i][static_cast<std::size_t>(perm[i])];
  return s;
}

// --- NMI -------------------------------------------------------------------------

// Mutual information over the arithmetic mean of the two entropies. Two
// single-cluster labelings count as identical (1.0); one single-cluster labeling
// against a non-trivial one scores 0.0.
inline double nmi(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size() || a.empty()) throw ContractError("nmi: labelings must be nonempty and equal length");
  const double n = static_cast<double>(a.size());
  std::map<int, double> ca, cb;
  std::map<std::pair<int, int>, double> joint;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ca[a[i]] += 1.0;
    cb[b[i]] += 1.0;
    joint[{a[i], b[i]}] += 1.0;
  }
  auto entropy = [n](const std::map<int, double>& c) {
    double h = 0.0;
    for (const auto& [k, v] : c) h -= (v / n) * std::log(v / n);
    return h;
  };
  const double ha = entropy(ca), hb = entropy(cb);
  if (ha + hb <= 0.0) return 1.0;
  double mi = 0.0;
  for (const auto& [key, v] : joint) mi += (v / n) * std::log(v * n / (ca[key.first] * cb[key.second]));
  return std::clamp(mi / (0.5 * (ha + hb)), 0.0, 1.0);
}

// --- silhouette / choice of K ----------------------------------------------------------

inline double silhouette_score(const Points& pts, const std::vector<int>& labels, int k) {
  const std::size_t n = pts.size();
  std::vector<std::size_t> size(static_cast<std::size_t>(k), 0);
  for (int l : labels) ++size[static_cast<std::size_t>(l)];
  double total = 0.0;
  std::vector<double> sum(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(sum.begin(), sum.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) sum[static_cast<std::size_t>(labels[j])] += std::sqrt(sq_dist(pts[i], pts[j]));
    const auto own = static_cast<std::size_t>(labels[i]);
    if (size[own] <= 1) continue;  // singleton: s = 0
    const double a = sum[own] / static_cast<double>(size[own] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < sum.size(); ++c)
      if (c != own && size[c] > 0) b = std::min(b, sum[c] / static_cast<double>(size[c]));
    const double m = std::max(a, b);
    if (m > 0.0 && std::isfinite(b)) total += (b - a) / m;
  }
  return total / static_cast<double>(n);
}

inline int choose_K(const Points& reference_df, std::vector<int> candidates = {2, 3, 4, 5}, std::uint64_t seed = 0) {
  require(!candidates.empty(), "choose_K: no candidates");
  std::sort(candidates.begin(), candidates.end());
  if (static_cast<int>(reference_df.size()) < candidates.back() + 1)
    throw ContractError("choose_K: need at least " + std::to_string(candidates.back() + 1) + " samples");
  bool degenerate = true;
  for (const auto& p : reference_df)
    if (sq_dist(p, reference_df.front()) > 0.0) {
      degenerate = false;
      break;
    }
  if (degenerate) {
    warn("choose_K: all reference features coincide; using K = " + std::to_string(candidates.front()));
    return candidates.front();
  }
  int best_k = candidates.front();
  double best = -std::numeric_limits<double>::infinity();
  for (int k : candidates) {
    const auto r = kmeans(reference_df, k, seed);
    const double s = silhouette_score(reference_df, r.labels, k);
    if (s > best + 1e-12) {
      best = s;
      best_k = k;
    }
  }
  return best_k;
}

// --- reference extractor ------------------------------------------------------------

// Frozen random conv stack with the backbone's shapes. The DRLM gates are zero, so
// a = 1/2 everywhere and low-attention selection keeps the first C/2 channels.
struct ReferenceExtractor {
  ExtractorParams<float> params;
  double eps = 1e-5;

  static ReferenceExtractor make(const ModelConfig& cfg, std::uint64_t seed) {
    ReferenceExtractor r;
    r.params = init_model_params<float>(cfg, stream_seed(seed, {stream::kReference})).extractor;
    for (auto& b : r.params.blocks) {
      std::fill(b.drlm.w1.value.begin(), b.drlm.w1.value.end(), 0.0f);
      std::fill(b.drlm.w2.value.begin(), b.drlm.w2.value.end(), 0.0f);
    }
    r.eps = cfg.eps;
    return r;
  }
};

// --- pseudo-domain assignment --------------------------------------------------------

struct ClusterAssignment {
  int epoch = 0;
  int k = 0;
  std::vector<int> labels;  // 1..K per sample, aligned with the index list it was built from
  double inertia_pos = 0.0;
  double inertia_neg = 0.0;
  std::vector<int> match_pos;  // new positive cluster -> label (0-based)
  std::vector<int> match_neg;
  bool fallback_fired = false;
};

namespace detail {

// Relabels clusters of `members` (global positions) to maximise overlap with prev labels.
inline std::vector<int> match_to_previous(const std::vector<int>& cluster, const std::vector<std::size_t>& members,
                                          const std::vector<int>& prev_labels, int k) {
  std::vector<std::vector<double>> cost(static_cast<std::size_t>(k), std::vector<double>(static_cast<std::size_t>(k), 0.0));
  for (std::size_t m = 0; m < members.size(); ++m) {
    const int prev = prev_labels[members[m]] - 1;
    if (prev >= 0 && prev < k) cost[static_cast<std::size_t>(cluster[m])][static_cast<std::size_t>(prev)] -= 1.0;
  }
  return kuhn_munkres(cost);
}

inline double class_inertia(const Points& df, const std::vector<int>& labels, const std::vector<int>& task,
                            int cls, int k) {
  Points cent(static_cast<std::size_t>(k), std::vector<double>(df.front().size(), 0.0));
  std::vector<double> cnt(static_cast<std::size_t>(k), 0.0);
  for (std::size_t i = 0; i < df.size(); ++i) {
    if (task[i] != cls) continue;
    auto& c = cent[static_cast<std::size_t>(labels[i] - 1)];
    for (std::size_t j = 0; j < c.size(); ++j) c[j] += df[i][j];
    cnt[static_cast<std::size_t>(labels[i] - 1)] += 1.0;
  }
  for (std::size_t c = 0; c < cent.size(); ++c)
    if (cnt[c] > 0) for (auto& v : cent[c]) v /= cnt[c];
  double s = 0.0;
  for (std::size_t i = 0; i < df.size(); ++i)
    if (task[i] == cls) s += sq_dist(df[i], cent[static_cast<std::size_t>(labels[i] - 1)]);
  return s;
}

// Every domain must hold both classes. A domain missing class c receives the
// class-c samples of the largest class-c domain that lie nearest its centroid.
inline bool repair_empty_domains(const Points& df, const std::vector<int>& task, int k, std::vector<int>& labels) {
  bool fired = false;
  for (int cls = 0; cls <= 1; ++cls) {
    for (int dom = 1; dom <= k; ++dom) {
      std::vector<std::size_t> count(static_cast<std::size_t>(k) + 1, 0);
      for (std::size_t i = 0; i < labels.size(); ++i)
        if (task[i] == cls) ++count[static_cast<std::size_t>(labels[i])];
      if (count[static_cast<std::size_t>(dom)] > 0) continue;
      const auto donor = static_cast<int>(std::max_element(count.begin() + 1, count.end()) - count.begin());
      if (count[static_cast<std::size_t>(donor)] < 2) continue;  // nothing to spare
      fired = true;
      std::vector<double> centroid(df.front().size(), 0.0);
      double members = 0.0;
      for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] == dom) {
          for (std::size_t j = 0; j < centroid.size(); ++j) centroid[j] += df[i][j];
          members += 1.0;
        }
      if (members > 0)
        for (auto& v : centroid) v /= members;
      std::vector<std::pair<double, std::size_t>> cand;
      for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] == donor && task[i] == cls) cand.emplace_back(sq_dist(df[i], centroid), i);
      std::sort(cand.begin(), cand.end());
      const std::size_t move = std::max<std::size_t>(1, cand.size() / 2);
      for (std::size_t m = 0; m < move; ++m) labels[cand[m].second] = dom;
      warn("assign_pseudo_domains: domain " + std::to_string(dom) + " had no " + (cls ? "live" : "spoof") +
           " samples; moved " + std::to_string(move) + " from domain " + std::to_string(donor));
    }
  }
  return fired;
}

}  // namespace detail

// df are the (normalised) domain features of the samples in `task` order.
// Without prev: one joint clustering of every sample. With prev: positives and
// negatives are clustered separately and each clustering is matched to prev.
inline ClusterAssignment assign_pseudo_domains(const Points& df, const std::vector<int>& task, int k,
                                               const ClusterAssignment* prev, std::uint64_t seed, int epoch = 0,
                                               const KMeansOptions& opt = {}) {
  require(df.size() == task.size() && !df.empty(), "assign_pseudo_domains: df/task size mismatch");
  require(k >= 1, "assign_pseudo_domains: K must be positive");
  if (prev) require(prev->labels.size() == df.size(), "assign_pseudo_domains: previous assignment has wrong length");
  ClusterAssignment out;
  out.epoch = epoch;
  out.k = k;
  out.labels.assign(df.size(), 1);
  out.match_pos.resize(static_cast<std::size_t>(k));
  out.match_neg.resize(static_cast<std::size_t>(k));
  std::iota(out.match_pos.begin(), out.match_pos.end(), 0);
  std::iota(out.match_neg.begin(), out.match_neg.end(), 0);
  if (k == 1) {
    out.inertia_pos = detail::class_inertia(df, out.labels, task, 1, 1);
    out.inertia_neg = detail::class_inertia(df, out.labels, task, 0, 1);
    return out;
  }
  const std::uint64_t s = stream_seed(seed, {static_cast<std::uint64_t>(epoch)});
  if (!prev) {
    const auto r = kmeans(df, k, s, opt);
    for (std::size_t i = 0; i < df.size(); ++i) out.labels[i] = r.labels[i] + 1;
  } else {
    for (int cls = 1; cls >= 0; --cls) {
      std::vector<std::size_t> members;
      Points sub;
      for (std::size_t i = 0; i < df.size(); ++i)
        if (task[i] == cls) {
          members.push_back(i);
          sub.push_back(df[i]);
        }
      if (static_cast<int>(sub.size()) < k)
        throw ContractError("assign_pseudo_domains: class " + std::to_string(cls) + " has fewer than K samples");
      const auto r = kmeans(sub, k, stream_seed(s, {static_cast<std::uint64_t>(cls)}), opt);
      const auto perm = detail::match_to_previous(r.labels, members, prev->labels, k);
      for (std::size_t m = 0; m < members.size(); ++m)
        out.labels[members[m]] = perm[static_cast<std::size_t>(r.labels[m])] + 1;
      (cls == 1 ? out.match_pos : out.match_neg) = perm;
    }
  }
  out.fallback_fired = detail::repair_empty_domains(df, task, k, out.labels);
  out.inertia_pos = detail::class_inertia(df, out.labels, task, 1, k);
  out.inertia_neg = detail::class_inertia(df, out.labels, task, 0, k);
  return out;
}

// Writes 1-based labels into the pseudo_domain field of ds[indices].
inline void apply_assignment(Dataset& ds, std::span<const std::size_t> indices, const ClusterAssignment& a) {
  require(indices.size() == a.labels.size(), "apply_assignment: index/label size mismatch");
  for (std::size_t i = 0; i < indices.size(); ++i) ds.samples[indices[i]].pseudo_domain = a.labels[i];
}

}  // namespace d2am
