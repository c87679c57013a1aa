#pragma once

// The three networks: a feature extractor of three conv blocks, each ending in a
// domain representation learning module (DRLM, a squeeze-excitation style gate
// that splits features into F+ and F-); a two-layer meta learner whose hidden
// layer is the adaptation layer; and a small depth head tapping block 2.
//
// Every forward has a matching backward that accumulates into a gradient struct
// of the same type as the parameters.

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "d2am/data_synth.hpp"
#include "d2am/dual.hpp"
#include "d2am/error.hpp"
#include "d2am/linalg.hpp"
#include "d2am/rng.hpp"
#include "d2am/tensor.hpp"

namespace d2am {

struct ModelConfig {
  int in_channels = 6;
  std::array<int, 3> widths{16, 32, 64};
  int reduction = 4;  // DRLM squeeze ratio
  int adaptation_width = 32;
  int depth_hidden = 16;
  int depth_height = 8;
  int depth_width = 8;
  double eps = 1e-5;  // instance-norm / channel-stat epsilon

  void validate() const {
    if (in_channels <= 0) throw ValidationError("ModelConfig.in_channels must be positive");
    if (reduction <= 0) throw ValidationError("ModelConfig.reduction must be positive");
    for (int c : widths) {
      if (c <= 0 || c % 2 != 0)
        throw ValidationError("ModelConfig.widths: channel count " + std::to_string(c) +
                              " must be even (low-attention selection keeps C/2)");
      if (c % reduction != 0)
        throw ValidationError("ModelConfig.widths: channel count " + std::to_string(c) +
                              " not divisible by reduction " + std::to_string(reduction));
    }
    if (adaptation_width <= 0 || depth_hidden <= 0) throw ValidationError("ModelConfig: layer widths must be positive");
    if (depth_height <= 0 || depth_width <= 0) throw ValidationError("ModelConfig: depth size must be positive");
    if (!(eps > 0.0)) throw ValidationError("ModelConfig.eps must be positive");
  }

  int embedding_width() const { return widths[2]; }
  int domain_feature_width() const { return widths[0] + widths[1] + widths[2]; }
};

// --- parameter sets -----------------------------------------------------------

template <class T>
struct ConvBlockParams {
  Param<T> weight;  // [Cout][Cin][3][3]
  Param<T> bias;    // [Cout]
  Param<T> gamma;   // instance-norm scale, [Cout]
  Param<T> beta;    // instance-norm shift, [Cout]
};

template <class T>
struct DrlmParams {
  Param<T> w1;     // [C/tau][C]
  Param<T> w2;     // [C][C/tau]
  Param<T> ent_w;  // entropy head on gap(F-), [C]
};

template <class T>
struct BlockParams {
  ConvBlockParams<T> conv;
  DrlmParams<T> drlm;
  int out_channels() const { return conv.weight.shape[0]; }
  int in_channels() const { return conv.weight.shape[1]; }
};

template <class T>
struct ExtractorParams {
  std::array<BlockParams<T>, 3> blocks;
};

template <class T>
struct MetaLearnerParams {
  Param<T> hid_w;  // [Dh][D]
  Param<T> hid_b;  // [Dh]
  Param<T> out_w;  // [Dh]
  Param<T> out_b;  // [1]
};

template <class T>
struct DepthParams {
  Param<T> conv1_w;  // [Hd][C2][3][3]
  Param<T> conv1_b;  // [Hd]
  Param<T> conv2_w;  // [1][Hd]
  Param<T> conv2_b;  // [1]
};

template <class T>
struct ModelParams {
  ExtractorParams<T> extractor;
  MetaLearnerParams<T> meta;
  DepthParams<T> depth;
};

template <class T>
using NamedParam = std::pair<std::string, Param<T>*>;
template <class T>
using ConstNamedParam = std::pair<std::string, const Param<T>*>;

namespace detail {
template <class Out, class M>
void collect_meta(Out& out, M& m, const std::string& p) {
  out.emplace_back(p + "hid_w", &m.hid_w);
  out.emplace_back(p + "hid_b", &m.hid_b);
  out.emplace_back(p + "out_w", &m.out_w);
  out.emplace_back(p + "out_b", &m.out_b);
}
template <class Out, class P>
void collect_all(Out& out, P& m) {
  for (int j = 0; j < 3; ++j) {
    auto& b = m.extractor.blocks[static_cast<std::size_t>(j)];
    const std::string p = "extractor.block" + std::to_string(j + 1) + ".";
    out.emplace_back(p + "conv_w", &b.conv.weight);
    out.emplace_back(p + "conv_b", &b.conv.bias);
    out.emplace_back(p + "in_gamma", &b.conv.gamma);
    out.emplace_back(p + "in_beta", &b.conv.beta);
    out.emplace_back(p + "drlm_w1", &b.drlm.w1);
    out.emplace_back(p + "drlm_w2", &b.drlm.w2);
    out.emplace_back(p + "drlm_ent_w", &b.drlm.ent_w);
  }
  collect_meta(out, m.meta, "meta.");
  out.emplace_back("depth.conv1_w", &m.depth.conv1_w);
  out.emplace_back("depth.conv1_b", &m.depth.conv1_b);
  out.emplace_back("depth.conv2_w", &m.depth.conv2_w);
  out.emplace_back("depth.conv2_b", &m.depth.conv2_b);
}
}  // namespace detail

// Flat, stably ordered view of every tensor; names are used in checkpoints.
template <class T>
std::vector<NamedParam<T>> list_params(ModelParams<T>& m) {
  std::vector<NamedParam<T>> out;
  detail::collect_all(out, m);
  return out;
}
template <class T>
std::vector<ConstNamedParam<T>> list_params(const ModelParams<T>& m) {
  std::vector<ConstNamedParam<T>> out;
  detail::collect_all(out, m);
  return out;
}
template <class T>
std::vector<NamedParam<T>> list_params(MetaLearnerParams<T>& m) {
  std::vector<NamedParam<T>> out;
  detail::collect_meta(out, m, "");
  return out;
}
template <class T>
std::vector<ConstNamedParam<T>> list_params(const MetaLearnerParams<T>& m) {
  std::vector<ConstNamedParam<T>> out;
  detail::collect_meta(out, m, "");
  return out;
}

template <class P>
P zeros_like(const P& params) {
  P out = params;
  for (auto& [name, p] : list_params(out)) std::fill(p->value.begin(), p->value.end(), typename decltype(p->value)::value_type(0));
  return out;
}

template <class U, class T>
MetaLearnerParams<U> cast_params(const MetaLearnerParams<T>& m) {
  return {cast_param<U>(m.hid_w), cast_param<U>(m.hid_b), cast_param<U>(m.out_w), cast_param<U>(m.out_b)};
}

template <class U, class T>
ModelParams<U> cast_params(const ModelParams<T>& m) {
  ModelParams<U> out;
  auto src = list_params(m);
  auto dst = list_params(out);
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = cast_param<U>(*src[i].second);
  return out;
}

template <class T>
std::size_t parameter_count(const ModelParams<T>& m) {
  std::size_t n = 0;
  for (const auto& [name, p] : list_params(m)) n += p->size();
  return n;
}

namespace detail {
template <class T>
void fill_normal(Param<T>& p, Rng& rng, double stddev) {
  for (auto& v : p.value) v = static_cast<T>(stddev * rng.normal());
}
template <class T>
void fill_const(Param<T>& p, double c) {
  for (auto& v : p.value) v = static_cast<T>(c);
}
}  // namespace detail

template <class T>
ModelParams<T> init_model_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(stream_seed(seed, {stream::kInit}));
  ModelParams<T> m;
  int cin = cfg.in_channels;
  for (std::size_t j = 0; j < 3; ++j) {
    const int c = cfg.widths[j];
    const int r = c / cfg.reduction;
    auto& b = m.extractor.blocks[j];
    b.conv.weight = Param<T>({c, cin, 3, 3});
    b.conv.bias = Param<T>({c});
    b.conv.gamma = Param<T>({c});
    b.conv.beta = Param<T>({c});
    b.drlm.w1 = Param<T>({r, c});
    b.drlm.w2 = Param<T>({c, r});
    b.drlm.ent_w = Param<T>({c});
    detail::fill_normal(b.conv.weight, rng, std::sqrt(2.0 / (cin * 9)));
    detail::fill_const(b.conv.gamma, 1.0);
    detail::fill_normal(b.drlm.w1, rng, std::sqrt(2.0 / c));
    detail::fill_normal(b.drlm.w2, rng, std::sqrt(1.0 / r));
    detail::fill_normal(b.drlm.ent_w, rng, std::sqrt(1.0 / c));
    cin = c;
  }
  const int d = cfg.embedding_width(), dh = cfg.adaptation_width;
  m.meta.hid_w = Param<T>({dh, d});
  m.meta.hid_b = Param<T>({dh});
  m.meta.out_w = Param<T>({dh});
  m.meta.out_b = Param<T>({1});
  detail::fill_normal(m.meta.hid_w, rng, std::sqrt(2.0 / d));
  detail::fill_normal(m.meta.out_w, rng, std::sqrt(1.0 / dh));
  const int c2 = cfg.widths[1];
  m.depth.conv1_w = Param<T>({cfg.depth_hidden, c2, 3, 3});
  m.depth.conv1_b = Param<T>({cfg.depth_hidden});
  m.depth.conv2_w = Param<T>({1, cfg.depth_hidden});
  m.depth.conv2_b = Param<T>({1});
  detail::fill_normal(m.depth.conv1_w, rng, std::sqrt(2.0 / (c2 * 9)));
  detail::fill_normal(m.depth.conv2_w, rng, std::sqrt(1.0 / cfg.depth_hidden));
  return m;
}

// --- batches ----------------------------------------------------------------

// Gathers H x W x 6 sample images into a channel-major batch.
template <class T>
FeatureMap<T> make_image_batch(const Dataset& ds, std::span<const std::size_t> indices) {
  const int n = static_cast<int>(indices.size());
  FeatureMap<T> x(Dataset::kChannels, n, ds.height, ds.width);
  for (int i = 0; i < n; ++i) {
    const auto& img = ds.samples[indices[static_cast<std::size_t>(i)]].image;
    require(img.size() == ds.image_size(), "make_image_batch: sample image has wrong size");
    for (int c = 0; c < Dataset::kChannels; ++c) {
      T* dst = x.plane_ptr(c, i);
      for (std::size_t p = 0; p < x.plane(); ++p) dst[p] = static_cast<T>(img[p * Dataset::kChannels + c]);
    }
  }
  return x;
}

template <class T>
Matrix<T> make_depth_batch(const Dataset& ds, std::span<const std::size_t> indices) {
  Matrix<T> d(static_cast<int>(indices.size()), static_cast<int>(ds.depth_size()));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& src = ds.samples[indices[i]].depth;
    for (std::size_t k = 0; k < src.size(); ++k) d(static_cast<int>(i), static_cast<int>(k)) = static_cast<T>(src[k]);
  }
  return d;
}

// --- DRLM ---------------------------------------------------------------------

template <class T>
T sigmoid(const T& z) {
  using std::exp;
  return T(1) / (T(1) + exp(-z));
}

template <class T>
struct DrlmOutput {
  Matrix<T> pooled_mean;  // gap(F), N x C
  Matrix<T> hidden;       // W1 gap(F) before relu, N x C/tau
  Matrix<T> attention;    // a, N x C
  FeatureMap<T> fplus;
  FeatureMap<T> fminus;
};

// a = sigmoid(W2 relu(W1 gap(F))); F+ = a*F; F- = (1-a)*F.
template <class T>
DrlmOutput<T> drlm_forward(const FeatureMap<T>& f, const DrlmParams<T>& p) {
  const int c = f.channels, n = f.batch;
  require(p.w1.shape.size() == 2 && p.w1.shape[1] == c && p.w2.shape[0] == c && p.w2.shape[1] == p.w1.shape[0],
          "drlm_forward: feature map has " + std::to_string(c) + " channels, DRLM weights do not match");
  const int r = p.w1.shape[0];
  const T inv_area = T(1) / static_cast<T>(f.plane());
  DrlmOutput<T> out{Matrix<T>(n, c), Matrix<T>(n, r), Matrix<T>(n, c), FeatureMap<T>(c, n, f.height, f.width),
                    FeatureMap<T>(c, n, f.height, f.width)};
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < n; ++i) {
      const T* src = f.plane_ptr(ch, i);
      T s = 0;
      for (std::size_t k = 0; k < f.plane(); ++k) s += src[k];
      out.pooled_mean(i, ch) = s * inv_area;
    }
  for (int i = 0; i < n; ++i) {
    for (int h = 0; h < r; ++h) {
      T s = 0;
      for (int ch = 0; ch < c; ++ch) s += p.w1[static_cast<std::size_t>(h) * c + ch] * out.pooled_mean(i, ch);
      out.hidden(i, h) = s;
    }
    for (int ch = 0; ch < c; ++ch) {
      T s = 0;
      for (int h = 0; h < r; ++h) {
        const T u = out.hidden(i, h);
        if (u > T(0)) s += p.w2[static_cast<std::size_t>(ch) * r + h] * u;
      }
      out.attention(i, ch) = sigmoid(s);
    }
  }
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < n; ++i) {
      const T a = out.attention(i, ch);
      const T* src = f.plane_ptr(ch, i);
      T* fp = out.fplus.plane_ptr(ch, i);
      T* fm = out.fminus.plane_ptr(ch, i);
      for (std::size_t k = 0; k < f.plane(); ++k) {
        fp[k] = a * src[k];
        fm[k] = src[k] - fp[k];
      }
    }
  return out;
}

// Either upstream map may be null (no gradient). Writes d_f, accumulates weight grads.
template <class T>
void drlm_backward(const FeatureMap<T>& f, const DrlmOutput<T>& fw, const DrlmParams<T>& p,
                   const FeatureMap<T>* d_fplus, const FeatureMap<T>* d_fminus, FeatureMap<T>& d_f,
                   DrlmParams<T>& grad) {
  const int c = f.channels, n = f.batch, r = p.w1.shape[0];
  const std::size_t area = f.plane();
  d_f = FeatureMap<T>(c, n, f.height, f.width);
  Matrix<T> d_att(n, c);
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < n; ++i) {
      const T a = fw.attention(i, ch);
      const T* src = f.plane_ptr(ch, i);
      const T* gp = d_fplus ? d_fplus->plane_ptr(ch, i) : nullptr;
      const T* gm = d_fminus ? d_fminus->plane_ptr(ch, i) : nullptr;
      T* df = d_f.plane_ptr(ch, i);
      T da = 0;
      for (std::size_t k = 0; k < area; ++k) {
        const T up = gp ? gp[k] : T(0);
        const T um = gm ? gm[k] : T(0);
        df[k] = a * up + (T(1) - a) * um;
        da += src[k] * (up - um);
      }
      d_att(i, ch) = da;
    }
  const T inv_area = T(1) / static_cast<T>(area);
  std::vector<T> ds(static_cast<std::size_t>(c)), dr(static_cast<std::size_t>(r));
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const T a = fw.attention(i, ch);
      ds[static_cast<std::size_t>(ch)] = d_att(i, ch) * a * (T(1) - a);
    }
    std::fill(dr.begin(), dr.end(), T(0));
    for (int ch = 0; ch < c; ++ch)
      for (int h = 0; h < r; ++h) {
        const T u = fw.hidden(i, h);
        if (!(u > T(0))) continue;
        grad.w2[static_cast<std::size_t>(ch) * r + h] += ds[static_cast<std::size_t>(ch)] * u;
        dr[static_cast<std::size_t>(h)] += p.w2[static_cast<std::size_t>(ch) * r + h] * ds[static_cast<std::size_t>(ch)];
      }
    for (int h = 0; h < r; ++h) {
      if (!(fw.hidden(i, h) > T(0))) continue;
      const T du = dr[static_cast<std::size_t>(h)];
      for (int ch = 0; ch < c; ++ch) {
        grad.w1[static_cast<std::size_t>(h) * c + ch] += du * fw.pooled_mean(i, ch);
        const T dg = p.w1[static_cast<std::size_t>(h) * c + ch] * du * inv_area;
        T* df = d_f.plane_ptr(ch, i);
        for (std::size_t k = 0; k < area; ++k) df[k] += dg;
      }
    }
  }
}

// --- conv blocks ----------------------------------------------------------------

template <class T>
struct BlockTrace {
  std::vector<T> cols;           // im2col of the block input
  FeatureMap<T> normalized;      // (Z - mu) / sigma
  std::vector<T> inv_std;        // per (c, n)
  FeatureMap<T> activated;       // relu(gamma * normalized + beta)
  FeatureMap<T> pooled;          // F, after 2x2 average pooling
  DrlmOutput<T> drlm;
  int in_height = 0;
  int in_width = 0;
};

namespace detail {

// Stride-1 same-padded convolution of x into out (out must be allocated).
template <class T>
void conv_forward(const FeatureMap<T>& x, const Param<T>& w, const Param<T>& b, int kernel, std::vector<T>& cols,
                  FeatureMap<T>& out) {
  const int cout = w.shape[0];
  const int k = x.channels * kernel * kernel;
  const int ncols = x.batch * x.height * x.width;
  if (kernel == 1) {
    cols = x.data;
  } else {
    linalg::im2col(x, kernel, cols);
  }
  linalg::gemm<T>(false, false, cout, ncols, k, T(1), w.data(), cols.data(), T(0), out.data.data());
  for (int c = 0; c < cout; ++c) {
    const T bias = b[static_cast<std::size_t>(c)];
    if (bias == T(0)) continue;
    T* dst = out.data.data() + static_cast<std::size_t>(c) * ncols;
    for (int i = 0; i < ncols; ++i) dst[i] += bias;
  }
}

// Accumulates dW, db; writes dx when requested.
template <class T>
void conv_backward(const FeatureMap<T>& dz, const std::vector<T>& cols, const Param<T>& w, int kernel,
                   Param<T>& gw, Param<T>& gb, FeatureMap<T>* dx) {
  const int cout = w.shape[0];
  const int cin = w.shape[1];
  const int k = cin * kernel * kernel;
  const int ncols = dz.batch * dz.height * dz.width;
  linalg::gemm<T>(false, true, cout, k, ncols, T(1), dz.data.data(), cols.data(), T(1), gw.data());
  for (int c = 0; c < cout; ++c) {
    const T* src = dz.data.data() + static_cast<std::size_t>(c) * ncols;
    T s = 0;
    for (int i = 0; i < ncols; ++i) s += src[i];
    gb[static_cast<std::size_t>(c)] += s;
  }
  if (dx) {
    *dx = FeatureMap<T>(cin, dz.batch, dz.height, dz.width);
    if (kernel == 1) {
      linalg::gemm<T>(true, false, k, ncols, cout, T(1), w.data(), dz.data.data(), T(0), dx->data.data());
    } else {
      std::vector<T> dcols(static_cast<std::size_t>(k) * ncols);
      linalg::gemm<T>(true, false, k, ncols, cout, T(1), w.data(), dz.data.data(), T(0), dcols.data());
      linalg::col2im(dcols, kernel, *dx);
    }
  }
}

template <class T>
FeatureMap<T> avg_pool2(const FeatureMap<T>& x) {
  FeatureMap<T> out(x.channels, x.batch, x.height / 2, x.width / 2);
  for (int c = 0; c < x.channels; ++c)
    for (int n = 0; n < x.batch; ++n) {
      const T* s = x.plane_ptr(c, n);
      T* d = out.plane_ptr(c, n);
      for (int y = 0; y < out.height; ++y)
        for (int xx = 0; xx < out.width; ++xx) {
          const std::size_t i0 = static_cast<std::size_t>(2 * y) * x.width + 2 * xx;
          d[static_cast<std::size_t>(y) * out.width + xx] =
              T(0.25) * (s[i0] + s[i0 + 1] + s[i0 + x.width] + s[i0 + x.width + 1]);
        }
    }
  return out;
}

template <class T>
FeatureMap<T> avg_pool2_backward(const FeatureMap<T>& d_out, int in_h, int in_w) {
  FeatureMap<T> dx(d_out.channels, d_out.batch, in_h, in_w);
  for (int c = 0; c < d_out.channels; ++c)
    for (int n = 0; n < d_out.batch; ++n) {
      const T* s = d_out.plane_ptr(c, n);
      T* d = dx.plane_ptr(c, n);
      for (int y = 0; y < d_out.height; ++y)
        for (int xx = 0; xx < d_out.width; ++xx) {
          const T g = T(0.25) * s[static_cast<std::size_t>(y) * d_out.width + xx];
          const std::size_t i0 = static_cast<std::size_t>(2 * y) * in_w + 2 * xx;
          d[i0] += g;
          d[i0 + 1] += g;
          d[i0 + in_w] += g;
          d[i0 + in_w + 1] += g;
        }
    }
  return dx;
}

}  // namespace detail

// conv -> instance norm (learnable gamma, beta) -> relu -> 2x2 average pool -> DRLM.
template <class T>
BlockTrace<T> block_forward(const FeatureMap<T>& x, const BlockParams<T>& p, double eps) {
  require(x.channels == p.in_channels(), "block_forward: input has " + std::to_string(x.channels) +
                                             " channels, block expects " + std::to_string(p.in_channels()));
  require(x.height >= 2 && x.width >= 2, "block_forward: spatial size too small to pool");
  const int c = p.out_channels(), n = x.batch;
  BlockTrace<T> t;
  t.in_height = x.height;
  t.in_width = x.width;
  FeatureMap<T> z(c, n, x.height, x.width);
  detail::conv_forward(x, p.conv.weight, p.conv.bias, 3, t.cols, z);
  t.normalized = FeatureMap<T>(c, n, x.height, x.width);
  t.activated = FeatureMap<T>(c, n, x.height, x.width);
  t.inv_std.resize(static_cast<std::size_t>(c) * n);
  const std::size_t area = z.plane();
  const T inv_area = T(1) / static_cast<T>(area);
  for (int ch = 0; ch < c; ++ch) {
    const T g = p.conv.gamma[static_cast<std::size_t>(ch)], b = p.conv.beta[static_cast<std::size_t>(ch)];
    for (int i = 0; i < n; ++i) {
      const T* src = z.plane_ptr(ch, i);
      T mean = 0;
      for (std::size_t k = 0; k < area; ++k) mean += src[k];
      mean *= inv_area;
      T var = 0;
      for (std::size_t k = 0; k < area; ++k) var += (src[k] - mean) * (src[k] - mean);
      var *= inv_area;
      const T istd = T(1) / std::sqrt(var + static_cast<T>(eps));
      t.inv_std[static_cast<std::size_t>(ch) * n + i] = istd;
      T* nr = t.normalized.plane_ptr(ch, i);
      T* act = t.activated.plane_ptr(ch, i);
      for (std::size_t k = 0; k < area; ++k) {
        nr[k] = (src[k] - mean) * istd;
        const T y = g * nr[k] + b;
        act[k] = y > T(0) ? y : T(0);
      }
    }
  }
  t.pooled = detail::avg_pool2(t.activated);
  t.drlm = drlm_forward(t.pooled, p.drlm);
  return t;
}

// d_pooled is the gradient w.r.t. F (pre-DRLM). Writes dx when non-null.
template <class T>
void conv_block_backward(const BlockTrace<T>& t, const BlockParams<T>& p, const FeatureMap<T>& d_pooled,
                         BlockParams<T>& grad, FeatureMap<T>* dx) {
  const int c = p.out_channels(), n = d_pooled.batch;
  FeatureMap<T> d_act = detail::avg_pool2_backward(d_pooled, t.in_height, t.in_width);
  const std::size_t area = d_act.plane();
  const T inv_area = T(1) / static_cast<T>(area);
  FeatureMap<T> dz(c, n, t.in_height, t.in_width);
  for (int ch = 0; ch < c; ++ch) {
    const T g = p.conv.gamma[static_cast<std::size_t>(ch)];
    T dgamma = 0, dbeta = 0;
    for (int i = 0; i < n; ++i) {
      const T* act = t.activated.plane_ptr(ch, i);
      const T* nr = t.normalized.plane_ptr(ch, i);
      T* da = d_act.plane_ptr(ch, i);
      T sum_dn = 0, sum_dn_n = 0;
      for (std::size_t k = 0; k < area; ++k) {
        const T dy = act[k] > T(0) ? da[k] : T(0);
        dgamma += dy * nr[k];
        dbeta += dy;
        da[k] = g * dy;  // now d normalized
        sum_dn += da[k];
        sum_dn_n += da[k] * nr[k];
      }
      const T mean_dn = sum_dn * inv_area, mean_dn_n = sum_dn_n * inv_area;
      const T istd = t.inv_std[static_cast<std::size_t>(ch) * n + i];
      T* d = dz.plane_ptr(ch, i);
      for (std::size_t k = 0; k < area; ++k) d[k] = istd * (da[k] - mean_dn - nr[k] * mean_dn_n);
    }
    grad.conv.gamma[static_cast<std::size_t>(ch)] += dgamma;
    grad.conv.beta[static_cast<std::size_t>(ch)] += dbeta;
  }
  detail::conv_backward(dz, t.cols, p.conv.weight, 3, grad.conv.weight, grad.conv.bias, dx);
}

// --- extractor ------------------------------------------------------------------

template <class T>
struct ExtractorTrace {
  std::array<BlockTrace<T>, 3> blocks;
  Matrix<T> embedding;  // gap of block-3 F+, N x C3

  const FeatureMap<T>& fplus(int j) const { return blocks[static_cast<std::size_t>(j)].drlm.fplus; }
  const FeatureMap<T>& fminus(int j) const { return blocks[static_cast<std::size_t>(j)].drlm.fminus; }
  const Matrix<T>& attention(int j) const { return blocks[static_cast<std::size_t>(j)].drlm.attention; }
};

template <class T>
ExtractorTrace<T> extractor_forward(const ExtractorParams<T>& p, const FeatureMap<T>& input, double eps) {
  ExtractorTrace<T> t;
  const FeatureMap<T>* x = &input;
  for (std::size_t j = 0; j < 3; ++j) {
    t.blocks[j] = block_forward(*x, p.blocks[j], eps);
    if (!all_finite(t.blocks[j].drlm.fplus.data) || !all_finite(t.blocks[j].drlm.fminus.data))
      throw NumericError("extractor_forward: non-finite activation in block " + std::to_string(j + 1));
    x = &t.blocks[j].drlm.fplus;
  }
  const FeatureMap<T>& last = t.blocks[2].drlm.fplus;
  t.embedding = Matrix<T>(last.batch, last.channels);
  const T inv_area = T(1) / static_cast<T>(last.plane());
  for (int c = 0; c < last.channels; ++c)
    for (int i = 0; i < last.batch; ++i) {
      const T* s = last.plane_ptr(c, i);
      T acc = 0;
      for (std::size_t k = 0; k < last.plane(); ++k) acc += s[k];
      t.embedding(i, c) = acc * inv_area;
    }
  return t;
}

// Gradients arriving at the extractor's outputs. Empty maps mean "no gradient".
template <class T>
struct ExtractorUpstream {
  Matrix<T> d_embedding;
  std::array<FeatureMap<T>, 3> d_fplus;
  std::array<FeatureMap<T>, 3> d_fminus;
};

template <class T>
void extractor_backward(const ExtractorParams<T>& p, const ExtractorTrace<T>& t, const ExtractorUpstream<T>& up,
                        ExtractorParams<T>& grad) {
  FeatureMap<T> d_next;  // gradient w.r.t. the current block's F+ from downstream
  {
    const FeatureMap<T>& last = t.blocks[2].drlm.fplus;
    d_next = FeatureMap<T>(last.channels, last.batch, last.height, last.width);
    if (!up.d_embedding.data.empty()) {
      require(up.d_embedding.rows == last.batch && up.d_embedding.cols == last.channels,
              "extractor_backward: embedding gradient shape mismatch");
      const T inv_area = T(1) / static_cast<T>(last.plane());
      for (int c = 0; c < last.channels; ++c)
        for (int i = 0; i < last.batch; ++i) {
          const T g = up.d_embedding(i, c) * inv_area;
          T* d = d_next.plane_ptr(c, i);
          for (std::size_t k = 0; k < last.plane(); ++k) d[k] = g;
        }
    }
  }
  for (int j = 2; j >= 0; --j) {
    const auto& bt = t.blocks[static_cast<std::size_t>(j)];
    const auto& extra_p = up.d_fplus[static_cast<std::size_t>(j)];
    if (!extra_p.data.empty()) {
      require(extra_p.same_shape(d_next), "extractor_backward: F+ gradient shape mismatch at block " + std::to_string(j + 1));
      for (std::size_t k = 0; k < d_next.size(); ++k) d_next.data[k] += extra_p.data[k];
    }
    const auto& dm = up.d_fminus[static_cast<std::size_t>(j)];
    if (!dm.data.empty())
      require(dm.same_shape(bt.drlm.fminus), "extractor_backward: F- gradient shape mismatch at block " + std::to_string(j + 1));
    FeatureMap<T> d_pooled;
    drlm_backward(bt.pooled, bt.drlm, p.blocks[static_cast<std::size_t>(j)].drlm, &d_next,
                  dm.data.empty() ? nullptr : &dm, d_pooled, grad.blocks[static_cast<std::size_t>(j)].drlm);
    FeatureMap<T> dx;
    conv_block_backward(bt, p.blocks[static_cast<std::size_t>(j)], d_pooled, grad.blocks[static_cast<std::size_t>(j)],
                        j > 0 ? &dx : nullptr);
    d_next = std::move(dx);
  }
}

// --- meta learner -----------------------------------------------------------------

template <class T>
struct MetaTrace {
  Matrix<T> pre;  // adaptation pre-activation
  Matrix<T> h;    // adaptation features, relu(pre)
  std::vector<T> logit;
  std::vector<T> prob;
};

// h = relu(W_h e + b_h); p = sigmoid(w_o . h + b_o).
template <class T>
MetaTrace<T> meta_learner_forward(const Matrix<T>& e, const MetaLearnerParams<T>& m) {
  const int dh = m.hid_w.shape[0], d = m.hid_w.shape[1];
  require(e.cols == d, "meta_learner_forward: embedding width " + std::to_string(e.cols) +
                           " does not match meta learner input " + std::to_string(d));
  MetaTrace<T> t{Matrix<T>(e.rows, dh), Matrix<T>(e.rows, dh), std::vector<T>(static_cast<std::size_t>(e.rows)),
                 std::vector<T>(static_cast<std::size_t>(e.rows))};
  for (int i = 0; i < e.rows; ++i) {
    const T* x = e.row(i);
    T z = m.out_b[0];
    for (int k = 0; k < dh; ++k) {
      T s = m.hid_b[static_cast<std::size_t>(k)];
      const T* w = m.hid_w.data() + static_cast<std::size_t>(k) * d;
      for (int c = 0; c < d; ++c) s += w[c] * x[c];
      t.pre(i, k) = s;
      t.h(i, k) = s > T(0) ? s : T(0);
      z += m.out_w[static_cast<std::size_t>(k)] * t.h(i, k);
    }
    t.logit[static_cast<std::size_t>(i)] = z;
    t.prob[static_cast<std::size_t>(i)] = sigmoid(z);
  }
  return t;
}

// d_h (may be null) is the gradient on adaptation features; d_prob on probabilities.
// Accumulates into grad and, when non-null, d_e.
template <class T>
void meta_learner_backward(const Matrix<T>& e, const MetaLearnerParams<T>& m, const MetaTrace<T>& t,
                           const Matrix<T>* d_h, std::span<const T> d_prob, MetaLearnerParams<T>& grad,
                           Matrix<T>* d_e) {
  const int dh = m.hid_w.shape[0], d = m.hid_w.shape[1];
  require(d_prob.size() == static_cast<std::size_t>(e.rows), "meta_learner_backward: d_prob size mismatch");
  if (d_e) require(d_e->rows == e.rows && d_e->cols == d, "meta_learner_backward: d_e shape mismatch");
  std::vector<T> dpre(static_cast<std::size_t>(dh));
  for (int i = 0; i < e.rows; ++i) {
    const T p = t.prob[static_cast<std::size_t>(i)];
    const T dz = d_prob[static_cast<std::size_t>(i)] * p * (T(1) - p);
    grad.out_b[0] += dz;
    for (int k = 0; k < dh; ++k) {
      grad.out_w[static_cast<std::size_t>(k)] += dz * t.h(i, k);
      T dhk = dz * m.out_w[static_cast<std::size_t>(k)];
      if (d_h) dhk += (*d_h)(i, k);
      dpre[static_cast<std::size_t>(k)] = t.pre(i, k) > T(0) ? dhk : T(0);
    }
    const T* x = e.row(i);
    for (int k = 0; k < dh; ++k) {
      const T g = dpre[static_cast<std::size_t>(k)];
      if (g == T(0)) continue;
      grad.hid_b[static_cast<std::size_t>(k)] += g;
      T* gw = grad.hid_w.data() + static_cast<std::size_t>(k) * d;
      const T* w = m.hid_w.data() + static_cast<std::size_t>(k) * d;
      for (int c = 0; c < d; ++c) gw[c] += g * x[c];
      if (d_e) {
        T* de = d_e->row(i);
        for (int c = 0; c < d; ++c) de[c] += g * w[c];
      }
    }
  }
}

// --- depth head -------------------------------------------------------------------

template <class T>
struct DepthTrace {
  std::vector<T> cols1;
  FeatureMap<T> hidden;  // relu(conv1)
  std::vector<T> cols2;
  FeatureMap<T> map;     // conv2 output before resizing, 1 channel
  Matrix<T> out;         // N x (Dh * Dw)
  int out_h = 0, out_w = 0;
};

namespace detail {
// PyTorch-style adaptive average pooling bins.
inline std::pair<int, int> adaptive_bin(int i, int in, int out) {
  const int lo = (i * in) / out;
  const int hi = ((i + 1) * in + out - 1) / out;
  return {lo, hi};
}
}  // namespace detail

// conv3x3 -> relu -> conv1x1 -> adaptive average pool to (out_h, out_w).
template <class T>
DepthTrace<T> depth_forward(const FeatureMap<T>& f2, const DepthParams<T>& p, int out_h, int out_w) {
  require(p.conv1_w.shape[1] == f2.channels, "depth_forward: feature map has " + std::to_string(f2.channels) +
                                                 " channels, depth head expects " + std::to_string(p.conv1_w.shape[1]));
  const int hd = p.conv1_w.shape[0], n = f2.batch;
  DepthTrace<T> t;
  t.out_h = out_h;
  t.out_w = out_w;
  t.hidden = FeatureMap<T>(hd, n, f2.height, f2.width);
  detail::conv_forward(f2, p.conv1_w, p.conv1_b, 3, t.cols1, t.hidden);
  for (auto& v : t.hidden.data) v = v > T(0) ? v : T(0);
  t.map = FeatureMap<T>(1, n, f2.height, f2.width);
  detail::conv_forward(t.hidden, p.conv2_w, p.conv2_b, 1, t.cols2, t.map);
  t.out = Matrix<T>(n, out_h * out_w);
  for (int i = 0; i < n; ++i) {
    const T* s = t.map.plane_ptr(0, i);
    for (int y = 0; y < out_h; ++y) {
      const auto [y0, y1] = detail::adaptive_bin(y, f2.height, out_h);
      for (int x = 0; x < out_w; ++x) {
        const auto [x0, x1] = detail::adaptive_bin(x, f2.width, out_w);
        T acc = 0;
        for (int yy = y0; yy < y1; ++yy)
          for (int xx = x0; xx < x1; ++xx) acc += s[static_cast<std::size_t>(yy) * f2.width + xx];
        t.out(i, y * out_w + x) = acc / static_cast<T>((y1 - y0) * (x1 - x0));
      }
    }
  }
  return t;
}

template <class T>
void depth_backward(const FeatureMap<T>& f2, const DepthParams<T>& p, const DepthTrace<T>& t, const Matrix<T>& d_out,
                    DepthParams<T>& grad, FeatureMap<T>& d_f2) {
  require(d_out.same_shape(t.out), "depth_backward: gradient shape mismatch");
  const int n = f2.batch;
  FeatureMap<T> d_map(1, n, f2.height, f2.width);
  for (int i = 0; i < n; ++i) {
    T* d = d_map.plane_ptr(0, i);
    for (int y = 0; y < t.out_h; ++y) {
      const auto [y0, y1] = detail::adaptive_bin(y, f2.height, t.out_h);
      for (int x = 0; x < t.out_w; ++x) {
        const auto [x0, x1] = detail::adaptive_bin(x, f2.width, t.out_w);
        const T g = d_out(i, y * t.out_w + x) / static_cast<T>((y1 - y0) * (x1 - x0));
        for (int yy = y0; yy < y1; ++yy)
          for (int xx = x0; xx < x1; ++xx) d[static_cast<std::size_t>(yy) * f2.width + xx] += g;
      }
    }
  }
  FeatureMap<T> d_hidden;
  detail::conv_backward(d_map, t.cols2, p.conv2_w, 1, grad.conv2_w, grad.conv2_b, &d_hidden);
  for (std::size_t k = 0; k < d_hidden.size(); ++k)
    if (!(t.hidden.data[k] > T(0))) d_hidden.data[k] = T(0);
  detail::conv_backward(d_hidden, t.cols1, p.conv1_w, 3, grad.conv1_w, grad.conv1_b, &d_f2);
}

// --- whole model ------------------------------------------------------------------

template <class T>
struct ForwardTrace {
  ExtractorTrace<T> extractor;
  MetaTrace<T> meta;
  DepthTrace<T> depth;
};

template <class T>
ForwardTrace<T> model_forward(const ModelParams<T>& m, const ModelConfig& cfg, const FeatureMap<T>& input) {
  ForwardTrace<T> t;
  t.extractor = extractor_forward(m.extractor, input, cfg.eps);
  t.meta = meta_learner_forward(t.extractor.embedding, m.meta);
  t.depth = depth_forward(t.extractor.fplus(1), m.depth, cfg.depth_height, cfg.depth_width);
  return t;
}

}  // namespace d2am
