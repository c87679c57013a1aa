#pragma once

// Domain descriptors built from the low-attention half of each DRLM's F- branch,
// and the entropy regulariser that strips task information from F-.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "d2am/error.hpp"
#include "d2am/losses.hpp"
#include "d2am/model.hpp"
#include "d2am/tensor.hpp"

namespace d2am {

inline constexpr double kStatEps = 1e-5;

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> std;  // sqrt(population variance + eps)
};

// Per-channel spatial statistics of one sample of a batched map.
template <class T>
ChannelStats channel_stats(const FeatureMap<T>& f, int sample, double eps = kStatEps) {
  require(f.plane() >= 1, "channel_stats: empty spatial extent");
  require(sample >= 0 && sample < f.batch, "channel_stats: sample index out of range");
  ChannelStats s;
  s.mean.resize(static_cast<std::size_t>(f.channels));
  s.std.resize(static_cast<std::size_t>(f.channels));
  const double inv_area = 1.0 / static_cast<double>(f.plane());
  for (int c = 0; c < f.channels; ++c) {
    const T* p = f.plane_ptr(c, sample);
    double mu = 0.0;
    for (std::size_t k = 0; k < f.plane(); ++k) mu += static_cast<double>(p[k]);
    mu *= inv_area;
    double var = 0.0;
    for (std::size_t k = 0; k < f.plane(); ++k) {
      const double d = static_cast<double>(p[k]) - mu;
      var += d * d;
    }
    var *= inv_area;
    s.mean[static_cast<std::size_t>(c)] = mu;
    s.std[static_cast<std::size_t>(c)] = std::sqrt(var + eps);
  }
  return s;
}

// The C/2 channels with the smallest attention, in ascending attention order;
// equal weights keep the lower channel index first.
template <class T>
std::vector<int> select_low_attention(std::span<const T> attention) {
  const std::size_t c = attention.size();
  if (c % 2 != 0) throw ValidationError("select_low_attention: channel count " + std::to_string(c) + " is odd");
  std::vector<int> order(c);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return attention[static_cast<std::size_t>(a)] < attention[static_cast<std::size_t>(b)];
  });
  order.resize(c / 2);
  return order;
}

// df(x): for each block j, (mu, sigma) of the selected F- channels, concatenated as
// block1 mu, block1 sigma, block2 mu, ... With select_channels = false every channel is used.
template <class T>
std::vector<double> domain_feature(const ExtractorTrace<T>& trace, int sample, bool select_channels = true,
                                   double eps = kStatEps) {
  std::vector<double> df;
  for (int j = 0; j < 3; ++j) {
    const auto& fm = trace.fminus(j);
    const auto& att = trace.attention(j);
    const ChannelStats st = channel_stats(fm, sample, eps);
    std::vector<int> chans;
    if (select_channels) {
      chans = select_low_attention(std::span<const T>(att.row(sample), static_cast<std::size_t>(att.cols)));
    } else {
      chans.resize(static_cast<std::size_t>(fm.channels));
      std::iota(chans.begin(), chans.end(), 0);
    }
    for (int c : chans) df.push_back(st.mean[static_cast<std::size_t>(c)]);
    for (int c : chans) df.push_back(st.std[static_cast<std::size_t>(c)]);
  }
  return df;
}

template <class T>
void append_domain_features(const ExtractorTrace<T>& trace, bool select_channels, std::vector<std::vector<double>>& out) {
  const int n = trace.embedding.rows;
  for (int i = 0; i < n; ++i) out.push_back(domain_feature(trace, i, select_channels));
}

// Per-dimension z-score fitted on one epoch's full feature set.
struct ZScoreNormalizer {
  std::vector<double> mean;
  std::vector<double> scale;

  void fit(const std::vector<std::vector<double>>& rows) {
    require(!rows.empty(), "ZScoreNormalizer::fit: no rows");
    const std::size_t d = rows.front().size();
    mean.assign(d, 0.0);
    scale.assign(d, 1.0);
    for (const auto& r : rows) {
      require(r.size() == d, "ZScoreNormalizer::fit: ragged rows");
      for (std::size_t k = 0; k < d; ++k) mean[k] += r[k];
    }
    for (auto& m : mean) m /= static_cast<double>(rows.size());
    std::vector<double> var(d, 0.0);
    for (const auto& r : rows)
      for (std::size_t k = 0; k < d; ++k) var[k] += (r[k] - mean[k]) * (r[k] - mean[k]);
    for (std::size_t k = 0; k < d; ++k) {
      const double sd = std::sqrt(var[k] / static_cast<double>(rows.size()));
      scale[k] = sd > 1e-12 ? sd : 1.0;
    }
  }

  std::vector<double> apply(const std::vector<double>& row) const {
    require(row.size() == mean.size(), "ZScoreNormalizer::apply: dimension mismatch");
    std::vector<double> out(row.size());
    for (std::size_t k = 0; k < row.size(); ++k) out[k] = (row[k] - mean[k]) / scale[k];
    return out;
  }

  std::vector<std::vector<double>> fit_transform(const std::vector<std::vector<double>>& rows) {
    fit(rows);
    std::vector<std::vector<double>> out;
    out.reserve(rows.size());
    for (const auto& r : rows) out.push_back(apply(r));
    return out;
  }
};

enum class EntropyForm {
  symmetric,  // p ln p + (1-p) ln(1-p), minimised at p = 1/2
  literal,    // p ln p as printed, minimised at p = 1/e
};

// Domain enhancement entropy loss on gap(F-) through the head ent_w, averaged over
// the batch. Fills d_fminus (shape of fminus) and accumulates d_ent_w when given.
template <class T>
T domain_entropy_loss(const FeatureMap<T>& fminus, const Param<T>& ent_w, EntropyForm form = EntropyForm::symmetric,
                      FeatureMap<T>* d_fminus = nullptr, Param<T>* d_ent_w = nullptr) {
  using std::log;
  require(ent_w.size() == static_cast<std::size_t>(fminus.channels),
          "domain_entropy_loss: head has " + std::to_string(ent_w.size()) + " weights for " +
              std::to_string(fminus.channels) + " channels");
  const int c = fminus.channels, n = fminus.batch;
  const T inv_area = T(1) / static_cast<T>(fminus.plane());
  const T inv_n = T(1) / static_cast<T>(n);
  const T lo(kProbClamp), hi(1.0 - kProbClamp);
  if (d_fminus) *d_fminus = FeatureMap<T>(c, n, fminus.height, fminus.width);
  std::vector<T> pooled(static_cast<std::size_t>(c));
  T total = 0;
  for (int i = 0; i < n; ++i) {
    T z = 0;
    for (int ch = 0; ch < c; ++ch) {
      const T* p = fminus.plane_ptr(ch, i);
      T s = 0;
      for (std::size_t k = 0; k < fminus.plane(); ++k) s += p[k];
      pooled[static_cast<std::size_t>(ch)] = s * inv_area;
      z += ent_w[static_cast<std::size_t>(ch)] * pooled[static_cast<std::size_t>(ch)];
    }
    const T p_raw = sigmoid(z);
    const bool clamped = p_raw < lo || p_raw > hi;
    const T p = p_raw < lo ? lo : (p_raw > hi ? hi : p_raw);
    T dl_dp;
    if (form == EntropyForm::symmetric) {
      total += p * log(p) + (T(1) - p) * log(T(1) - p);
      dl_dp = log(p) - log(T(1) - p);
    } else {
      total += p * log(p);
      dl_dp = log(p) + T(1);
    }
    if (!d_fminus && !d_ent_w) continue;
    const T dz = clamped ? T(0) : dl_dp * p * (T(1) - p) * inv_n;
    for (int ch = 0; ch < c; ++ch) {
      if (d_ent_w) (*d_ent_w)[static_cast<std::size_t>(ch)] += dz * pooled[static_cast<std::size_t>(ch)];
      if (d_fminus) {
        const T g = dz * ent_w[static_cast<std::size_t>(ch)] * inv_area;
        T* d = d_fminus->plane_ptr(ch, i);
        for (std::size_t k = 0; k < fminus.plane(); ++k) d[k] = g;
      }
    }
  }
  return total * inv_n;
}

// Runs the extractor over ds[indices] in chunks and returns raw (un-normalised)
// domain features; optionally also the embeddings.
template <class T>
std::vector<std::vector<double>> extract_domain_features(const ExtractorParams<T>& params, double eps,
                                                         const Dataset& ds, std::span<const std::size_t> indices,
                                                         bool select_channels = true,
                                                         Matrix<double>* embeddings = nullptr,
                                                         std::size_t chunk = 128) {
  std::vector<std::vector<double>> out;
  out.reserve(indices.size());
  if (embeddings) *embeddings = Matrix<double>(static_cast<int>(indices.size()), params.blocks[2].out_channels());
  for (std::size_t start = 0; start < indices.size(); start += chunk) {
    const auto part = indices.subspan(start, std::min(chunk, indices.size() - start));
    const auto batch = make_image_batch<T>(ds, part);
    const auto trace = extractor_forward(params, batch, eps);
    append_domain_features(trace, select_channels, out);
    if (embeddings)
      for (int i = 0; i < trace.embedding.rows; ++i)
        for (int c = 0; c < trace.embedding.cols; ++c)
          (*embeddings)(static_cast<int>(start) + i, c) = static_cast<double>(trace.embedding(i, c));
  }
  return out;
}

}  // namespace d2am
