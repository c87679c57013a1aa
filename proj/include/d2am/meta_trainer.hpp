#pragma once

// Episodic meta-training with per-epoch pseudo-domain reassignment.
//
// One iteration draws an episode: K-1 meta-train batches, each from a single
// pseudo domain, and one meta-test batch from the remaining domain. All batches
// share one extractor pass. The outer objective is
//
//   J = w_d [L_dep(B_t) + sum_i L_dep(B_i)]
//     + sum_i ( w_c L_cls(B_i) + l_m L_mmd(B_i)
//             + w_c L_cls(B_t; M'_i) + l_m L_mmd(B_t; M'_i)
//             + l_p sum_j L_P^j(B_i) )
//
// with M'_i = M - alpha grad_M (L_cls + l_m L_mmd)(B_i). Its gradients with
// respect to M, E and D are the three outer updates, applied with Adam.
// First-order mode treats grad_M(...)(B_i) as a constant; second-order mode
// differentiates through it using dual numbers on the meta learner.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "d2am/checkpoint.hpp"
#include "d2am/clustering.hpp"
#include "d2am/config.hpp"
#include "d2am/data_synth.hpp"
#include "d2am/domain_repr.hpp"
#include "d2am/dual.hpp"
#include "d2am/error.hpp"
#include "d2am/losses.hpp"
#include "d2am/metrics.hpp"
#include "d2am/model.hpp"
#include "d2am/optim.hpp"
#include "d2am/rng.hpp"

namespace d2am {

// --- batch plumbing -----------------------------------------------------------------

template <class T>
Matrix<T> slice_rows(const Matrix<T>& m, int start, int count) {
  require(start >= 0 && count >= 0 && start + count <= m.rows, "slice_rows: range out of bounds");
  Matrix<T> out(count, m.cols);
  std::copy(m.row(start), m.row(start) + static_cast<std::size_t>(count) * m.cols, out.data.begin());
  return out;
}

template <class T>
void add_rows(Matrix<T>& dst, const Matrix<T>& src, int start) {
  require(src.cols == dst.cols && start + src.rows <= dst.rows, "add_rows: range out of bounds");
  T* d = dst.row(start);
  for (std::size_t k = 0; k < src.data.size(); ++k) d[k] += src.data[k];
}

template <class T>
FeatureMap<T> slice_batch(const FeatureMap<T>& f, int start, int count) {
  require(start >= 0 && count >= 0 && start + count <= f.batch, "slice_batch: range out of bounds");
  FeatureMap<T> out(f.channels, count, f.height, f.width);
  for (int c = 0; c < f.channels; ++c)
    std::copy(f.plane_ptr(c, start), f.plane_ptr(c, start) + static_cast<std::size_t>(count) * f.plane(),
              out.plane_ptr(c, 0));
  return out;
}

// dst[:, start:start+src.batch] = scale * src
template <class T>
void place_batch(FeatureMap<T>& dst, const FeatureMap<T>& src, int start, T scale) {
  for (int c = 0; c < src.channels; ++c) {
    const T* s = src.plane_ptr(c, 0);
    T* d = dst.plane_ptr(c, start);
    for (std::size_t k = 0; k < static_cast<std::size_t>(src.batch) * src.plane(); ++k) d[k] = scale * s[k];
  }
}

template <class T>
Matrix<Dual<T>> lift(const Matrix<T>& m) {
  Matrix<Dual<T>> out(m.rows, m.cols);
  for (std::size_t k = 0; k < m.data.size(); ++k) out.data[k] = Dual<T>(m.data[k]);
  return out;
}

// One episode's tensors. Batches are stored back to back: meta-train batches
// 0..num_train-1, then the meta-test batch. In ERM mode the same layout is one
// pooled batch.
template <class T>
struct EpisodeBatch {
  int batch_size = 0;
  int num_train = 0;
  FeatureMap<T> images;
  Matrix<T> depth;
  std::vector<int> labels;
  std::vector<Matrix<T>> priors;  // one per batch, batch_size x adaptation width

  int num_batches() const { return num_train + 1; }
  int test_start() const { return num_train * batch_size; }
  std::span<const int> labels_of(int batch) const {
    return std::span<const int>(labels).subspan(static_cast<std::size_t>(batch) * batch_size,
                                                static_cast<std::size_t>(batch_size));
  }
};

template <class T>
EpisodeBatch<T> make_episode_batch(const Dataset& ds, const std::vector<std::vector<std::size_t>>& batches,
                                   int adaptation_width, Rng& prior_rng) {
  require(batches.size() >= 2, "make_episode_batch: need at least one meta-train and one meta-test batch");
  EpisodeBatch<T> b;
  b.batch_size = static_cast<int>(batches.front().size());
  b.num_train = static_cast<int>(batches.size()) - 1;
  std::vector<std::size_t> all;
  for (const auto& part : batches) {
    require(static_cast<int>(part.size()) == b.batch_size, "make_episode_batch: batches must have equal size");
    all.insert(all.end(), part.begin(), part.end());
  }
  b.images = make_image_batch<T>(ds, all);
  b.depth = make_depth_batch<T>(ds, all);
  for (auto i : all) b.labels.push_back(ds.samples[i].label);
  for (std::size_t k = 0; k < batches.size(); ++k) b.priors.push_back(draw_prior<T>(b.batch_size, adaptation_width, prior_rng));
  return b;
}

// --- the meta learner objective on one batch -------------------------------------------

template <class T>
struct HeadLosses {
  T cls{};
  T mmd{};
};

// w_cls * L_cls + w_mmd * L_mmd for one batch through meta learner m. Accumulates the
// gradient into grad and the embedding gradient into d_e (each optional; d_e must be
// sized like e).
template <class T>
HeadLosses<T> head_objective(const Matrix<T>& e, std::span<const int> y, const Matrix<T>& prior,
                             const MetaLearnerParams<T>& m, double w_cls, double w_mmd, MetaLearnerParams<T>* grad,
                             Matrix<T>* d_e) {
  const auto t = meta_learner_forward(e, m);
  const bool backward = grad != nullptr || d_e != nullptr;
  std::vector<T> d_p(static_cast<std::size_t>(e.rows));
  HeadLosses<T> out;
  out.cls = bce_loss<T>(t.prob, y, backward ? std::span<T>(d_p) : std::span<T>());
  Matrix<T> d_h;
  out.mmd = mmd_to_prior_median(t.h, prior, backward ? &d_h : nullptr);
  if (!backward) return out;
  for (auto& v : d_p) v *= T(w_cls);
  for (auto& v : d_h.data) v *= T(w_mmd);
  MetaLearnerParams<T> scratch;
  if (!grad) scratch = zeros_like(m);
  meta_learner_backward<T>(e, m, t, &d_h, d_p, grad ? *grad : scratch, d_e);
  return out;
}

// theta' = theta - alpha * grad. Copy semantics: theta is not modified.
template <class T>
MetaLearnerParams<T> inner_update(const MetaLearnerParams<T>& theta, const MetaLearnerParams<T>& grad, double alpha) {
  MetaLearnerParams<T> out = theta;
  auto dst = list_params(out);
  const auto g = list_params(grad);
  require(dst.size() == g.size(), "inner_update: gradient structure mismatch");
  for (std::size_t k = 0; k < dst.size(); ++k) {
    require(dst[k].second->size() == g[k].second->size(), "inner_update: shape mismatch in " + dst[k].first);
    if (!all_finite(g[k].second->value)) throw NumericError("inner_update: non-finite gradient in " + g[k].first);
    for (std::size_t i = 0; i < dst[k].second->size(); ++i) (*dst[k].second)[i] -= T(alpha) * (*g[k].second)[i];
  }
  return out;
}

// Per-iteration loss values. cls/mmd are means over the meta-train batches (raw,
// unweighted); dep sums the per-batch depth losses; lp[j] is block j's entropy loss on
// the meta-train samples; meta_test is the mean meta-test classification loss under
// the adapted learners (NaN for ERM); total is the objective J.
struct LossBreakdown {
  double cls = 0, mmd = 0, dep = 0;
  std::array<double, 3> lp{};
  double meta_test = 0, meta_test_mmd = 0;
  double total = 0;

  bool finite() const {
    return std::isfinite(cls) && std::isfinite(mmd) && std::isfinite(dep) && std::isfinite(lp[0]) &&
           std::isfinite(lp[1]) && std::isfinite(lp[2]) && std::isfinite(total);
  }
  std::string describe() const {
    return "cls=" + std::to_string(cls) + " mmd=" + std::to_string(mmd) + " dep=" + std::to_string(dep) +
           " lp=(" + std::to_string(lp[0]) + "," + std::to_string(lp[1]) + "," + std::to_string(lp[2]) +
           ") meta_test=" + std::to_string(meta_test) + " total=" + std::to_string(total);
  }
};

// Evaluates J on one episode and, when grad is given, accumulates its gradient.
// frozen_inner replaces the inner gradients (first-order surrogate for checks);
// inner_out receives the inner gradients that were used.
template <class T>
LossBreakdown episode_objective(const ModelParams<T>& params, const ModelConfig& cfg, const HyperParams& hp,
                                const EpisodeBatch<T>& batch, std::type_identity_t<ModelParams<T>>* grad = nullptr,
                                const std::type_identity_t<std::vector<MetaLearnerParams<T>>>* frozen_inner = nullptr,
                                std::type_identity_t<std::vector<MetaLearnerParams<T>>>* inner_out = nullptr) {
  const int b = batch.batch_size, nt = batch.num_train, nb = batch.num_batches();
  require(batch.images.batch == nb * b && static_cast<int>(batch.priors.size()) == nb,
          "episode_objective: malformed episode batch");
  if (frozen_inner) require(static_cast<int>(frozen_inner->size()) == nt, "episode_objective: need one frozen gradient per meta-train batch");
  LossBreakdown out;
  const auto ft = extractor_forward(params.extractor, batch.images, cfg.eps);
  ExtractorUpstream<T> up;
  if (grad) up.d_embedding = Matrix<T>(ft.embedding.rows, ft.embedding.cols);

  // Depth on every batch: the sum of per-batch means is nb times the pooled mean.
  const auto dt = depth_forward(ft.fplus(1), params.depth, cfg.depth_height, cfg.depth_width);
  Matrix<T> d_pred;
  out.dep = value_of(depth_loss(dt.out, batch.depth, grad ? &d_pred : nullptr)) * nb;
  out.total += hp.depth_weight * out.dep;
  if (grad) {
    for (auto& v : d_pred.data) v *= static_cast<T>(hp.depth_weight * nb);
    depth_backward(ft.fplus(1), params.depth, dt, d_pred, grad->depth, up.d_fplus[1]);
  }

  // Entropy loss on the domain branch of the meta-train samples (all samples for ERM,
  // where it is logged only).
  const int lp_count = hp.meta_learning ? nt * b : nb * b;
  const double lp_scale = hp.meta_learning ? hp.lambda_p * nt : 0.0;
  for (int j = 0; j < 3; ++j) {
    const auto& fm = ft.fminus(j);
    const auto part = lp_count == fm.batch ? fm : slice_batch(fm, 0, lp_count);
    const bool need = grad && lp_scale != 0.0;
    FeatureMap<T> d_part;
    Param<T> d_w(params.extractor.blocks[static_cast<std::size_t>(j)].drlm.ent_w.shape);
    const T lp = domain_entropy_loss(part, params.extractor.blocks[static_cast<std::size_t>(j)].drlm.ent_w,
                                     hp.entropy_form, need ? &d_part : nullptr, need ? &d_w : nullptr);
    out.lp[static_cast<std::size_t>(j)] = value_of(lp);
    out.total += lp_scale * value_of(lp);
    if (!need) continue;
    auto& dst = up.d_fminus[static_cast<std::size_t>(j)];
    dst = FeatureMap<T>(fm.channels, fm.batch, fm.height, fm.width);
    place_batch(dst, d_part, 0, static_cast<T>(lp_scale));
    auto& gw = grad->extractor.blocks[static_cast<std::size_t>(j)].drlm.ent_w;
    for (std::size_t k = 0; k < gw.size(); ++k) gw[k] += static_cast<T>(lp_scale) * d_w[k];
  }

  if (!hp.meta_learning) {
    // Plain ERM: classification on every batch, MMD computed for the log only.
    for (int k = 0; k < nb; ++k) {
      const auto e = slice_rows(ft.embedding, k * b, b);
      Matrix<T> d_e(b, e.cols);
      const auto l = head_objective(e, batch.labels_of(k), batch.priors[static_cast<std::size_t>(k)], params.meta,
                                    hp.cls_weight, 0.0, grad ? &grad->meta : nullptr, grad ? &d_e : nullptr);
      out.cls += value_of(l.cls) / nb;
      out.mmd += value_of(l.mmd) / nb;
      out.total += hp.cls_weight * value_of(l.cls);
      if (grad) add_rows(up.d_embedding, d_e, k * b);
    }
    out.meta_test = out.meta_test_mmd = std::numeric_limits<double>::quiet_NaN();
  } else {
    const auto e_t = slice_rows(ft.embedding, batch.test_start(), b);
    const auto& prior_t = batch.priors.back();
    const auto y_t = batch.labels_of(nt);
    if (inner_out) inner_out->clear();
    for (int i = 0; i < nt; ++i) {
      const auto e_i = slice_rows(ft.embedding, i * b, b);
      const auto y_i = batch.labels_of(i);
      const auto& prior_i = batch.priors[static_cast<std::size_t>(i)];
      Matrix<T> d_e_i(b, e_i.cols);
      const auto l_i = head_objective(e_i, y_i, prior_i, params.meta, hp.cls_weight, hp.lambda_m,
                                      grad ? &grad->meta : nullptr, grad ? &d_e_i : nullptr);
      out.cls += value_of(l_i.cls) / nt;
      out.mmd += value_of(l_i.mmd) / nt;
      out.total += hp.cls_weight * value_of(l_i.cls) + hp.lambda_m * value_of(l_i.mmd);

      MetaLearnerParams<T> g_i;
      if (frozen_inner) {
        g_i = (*frozen_inner)[static_cast<std::size_t>(i)];
      } else {
        g_i = zeros_like(params.meta);
        head_objective(e_i, y_i, prior_i, params.meta, 1.0, hp.lambda_m, &g_i, static_cast<Matrix<T>*>(nullptr));
      }
      const auto adapted = inner_update(params.meta, g_i, hp.alpha);
      if (inner_out) inner_out->push_back(g_i);

      MetaLearnerParams<T> v = zeros_like(params.meta);
      Matrix<T> d_e_t(b, e_t.cols);
      const auto l_t = head_objective(e_t, y_t, prior_t, adapted, hp.cls_weight, hp.lambda_m, grad ? &v : nullptr,
                                      grad ? &d_e_t : nullptr);
      out.meta_test += value_of(l_t.cls) / nt;
      out.meta_test_mmd += value_of(l_t.mmd) / nt;
      out.total += hp.cls_weight * value_of(l_t.cls) + hp.lambda_m * value_of(l_t.mmd);
      if (!grad) continue;

      // dM'/dM = I - alpha H_i (second order) or I (first order).
      auto gm = list_params(grad->meta);
      const auto vl = list_params(v);
      for (std::size_t k = 0; k < gm.size(); ++k)
        for (std::size_t q = 0; q < gm[k].second->size(); ++q) (*gm[k].second)[q] += (*vl[k].second)[q];
      add_rows(up.d_embedding, d_e_t, batch.test_start());
      add_rows(up.d_embedding, d_e_i, i * b);

      if (!hp.first_order && !frozen_inner) {
        // Forward-mode pass along v through the inner gradient: tangents give H_i v and
        // grad_e (v . g_i).
        MetaLearnerParams<Dual<T>> md = cast_params<Dual<T>>(params.meta);
        auto mdl = list_params(md);
        for (std::size_t k = 0; k < mdl.size(); ++k)
          for (std::size_t q = 0; q < mdl[k].second->size(); ++q) (*mdl[k].second)[q].d = (*vl[k].second)[q];
        MetaLearnerParams<Dual<T>> gd = zeros_like(md);
        Matrix<Dual<T>> de(b, e_i.cols);
        head_objective(lift(e_i), y_i, lift(prior_i), md, 1.0, hp.lambda_m, &gd, &de);
        const auto gdl = list_params(gd);
        for (std::size_t k = 0; k < gm.size(); ++k)
          for (std::size_t q = 0; q < gm[k].second->size(); ++q)
            (*gm[k].second)[q] -= static_cast<T>(hp.alpha) * (*gdl[k].second)[q].d;
        T* dst = up.d_embedding.row(i * b);
        for (std::size_t q = 0; q < de.data.size(); ++q) dst[q] -= static_cast<T>(hp.alpha) * de.data[q].d;
      }
    }
  }
  if (grad) extractor_backward(params.extractor, ft, up, grad->extractor);
  return out;
}

// --- episodes ------------------------------------------------------------------------------

struct MetaSplit {
  std::vector<int> train_domains;  // ascending, 1-based
  int test_domain = 0;
};

// Holds out one uniformly chosen domain. domain_sizes[d-1] is the size of domain d.
inline MetaSplit split_meta_domains(std::span<const std::size_t> domain_sizes, Rng& rng) {
  const int k = static_cast<int>(domain_sizes.size());
  if (k < 2) throw ContractError("split_meta_domains: need at least two domains");
  for (int d = 0; d < k; ++d)
    if (domain_sizes[static_cast<std::size_t>(d)] == 0)
      throw ContractError("split_meta_domains: domain " + std::to_string(d + 1) + " is empty");
  MetaSplit s;
  s.test_domain = static_cast<int>(rng.below(static_cast<std::uint64_t>(k))) + 1;
  for (int d = 1; d <= k; ++d)
    if (d != s.test_domain) s.train_domains.push_back(d);
  return s;
}

// b indices from pool: without replacement when the pool is large enough, otherwise with.
inline std::vector<std::size_t> draw_batch(const std::vector<std::size_t>& pool, int b, Rng& rng) {
  require(!pool.empty(), "draw_batch: empty pool");
  std::vector<std::size_t> out;
  out.reserve(static_cast<std::size_t>(b));
  if (pool.size() >= static_cast<std::size_t>(b)) {
    std::vector<std::size_t> tmp = pool;
    for (int i = 0; i < b; ++i) {
      const auto j = static_cast<std::size_t>(i) + rng.below(tmp.size() - static_cast<std::size_t>(i));
      std::swap(tmp[static_cast<std::size_t>(i)], tmp[j]);
      out.push_back(tmp[static_cast<std::size_t>(i)]);
    }
  } else {
    for (int i = 0; i < b; ++i) out.push_back(pool[rng.below(pool.size())]);
  }
  return out;
}

// --- scoring -----------------------------------------------------------------------------

template <class T>
std::vector<double> predict_live_scores(const ModelParams<T>& params, const ModelConfig& cfg, const Dataset& ds,
                                        std::span<const std::size_t> indices, std::size_t chunk = 128) {
  std::vector<double> scores;
  scores.reserve(indices.size());
  for (std::size_t start = 0; start < indices.size(); start += chunk) {
    const auto part = indices.subspan(start, std::min(chunk, indices.size() - start));
    const auto ft = extractor_forward(params.extractor, make_image_batch<T>(ds, part), cfg.eps);
    const auto mt = meta_learner_forward(ft.embedding, params.meta);
    for (const auto& p : mt.prob) scores.push_back(value_of(p));
  }
  return scores;
}

inline std::vector<int> labels_of(const Dataset& ds, std::span<const std::size_t> indices) {
  std::vector<int> y;
  y.reserve(indices.size());
  for (auto i : indices) y.push_back(ds.samples[i].label);
  return y;
}

// Deterministic source train/validation split.
struct SourceSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

inline SourceSplit split_sources(const Dataset& ds, double val_fraction, std::uint64_t seed) {
  auto src = ds.indices(false);
  Rng rng(stream_seed(seed, {stream::kSplit}));
  rng.shuffle(src.begin(), src.end());
  const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(src.size())));
  SourceSplit s;
  s.val.assign(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(n_val));
  s.train.assign(src.begin() + static_cast<std::ptrdiff_t>(n_val), src.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

// --- training state and loop --------------------------------------------------------------

struct TrainState {
  ModelConfig cfg;
  HyperParams hp;
  ModelParams<float> params;
  Adam<ModelParams<float>> adam;
  int epoch = 0;
  int iteration = 0;

  TrainState(const ModelConfig& c, const HyperParams& h)
      : cfg(c),
        hp(h),
        params(init_model_params<float>(c, h.seed)),
        adam(params, AdamConfig{h.beta, h.adam_beta1, h.adam_beta2, h.adam_eps}) {
    c.validate();
    h.validate();
  }
};

// One outer update. Throws NumericError with the per-term breakdown on a non-finite loss.
inline LossBreakdown meta_step(TrainState& state, const EpisodeBatch<float>& batch) {
  ModelParams<float> grad = zeros_like(state.params);
  const LossBreakdown loss = episode_objective(state.params, state.cfg, state.hp, batch, &grad);
  if (!loss.finite()) throw NumericError("meta_step: non-finite loss at iteration " + std::to_string(state.iteration) + ": " + loss.describe());
  for (const auto& [name, p] : list_params(grad))
    if (!all_finite(p->value)) throw NumericError("meta_step: non-finite gradient in " + name + " (" + loss.describe() + ")");
  state.adam.step(state.params, grad);
  ++state.iteration;
  return loss;
}

struct TrainLogRow {
  int iteration = 0;
  int epoch = 0;
  int test_domain = 0;  // 0 for ERM
  LossBreakdown loss;
};

struct EpochClusterStats {
  int epoch = 0;
  int k = 0;
  double nmi_gt = 0;
  double nmi_prev = std::numeric_limits<double>::quiet_NaN();
  double changed_fraction = 1.0;
  double inertia_pos = 0, inertia_neg = 0;
  bool fallback = false;
  double mmd_pseudo = std::numeric_limits<double>::quiet_NaN();
  double mmd_gt = std::numeric_limits<double>::quiet_NaN();
  double val_auc = std::numeric_limits<double>::quiet_NaN();
  double val_hter = std::numeric_limits<double>::quiet_NaN();
  double eer_threshold = std::numeric_limits<double>::quiet_NaN();
};

struct TrainOptions {
  std::filesystem::path rundir;  // empty: nothing written
  bool write_checkpoints = true;
  bool diagnostics = true;  // inter-domain MMD per epoch
  std::function<void(const EpochClusterStats&, double seconds)> on_epoch;
};

inline const char* kTrainLogHeader = "iteration,epoch,test_domain,l_cls,l_mmd,l_dep,l_p1,l_p2,l_p3,l_meta_test";
inline const char* kClustersHeader =
    "epoch,k,nmi_gt,nmi_prev,changed_fraction,inertia_pos,inertia_neg,fallback,mmd_pseudo,mmd_gt,val_auc,val_hter,"
    "eer_threshold";

namespace detail {
inline std::string csv_num(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os.precision(9);
  os << v;
  return os.str();
}
}  // namespace detail

class Trainer {
 public:
  Trainer(Dataset& ds, const ModelConfig& cfg, const HyperParams& hp, TrainOptions opt = {})
      : ds_(ds), state_(cfg, hp), opt_(std::move(opt)), split_(split_sources(ds, hp.val_fraction, hp.seed)) {
    if (split_.train.empty()) throw ValidationError("train: no source samples to train on");
    if (hp.domains == DomainMode::ground_truth && hp.k != ds.spec.num_latent_domains)
      throw ValidationError("HyperParams.k must equal num_latent_domains when domains = ground_truth");
    for (auto i : ds_.indices(false)) ds_.samples[i].pseudo_domain = 0;
    if (!opt_.rundir.empty()) {
      std::filesystem::create_directories(opt_.rundir);
      log_.open(opt_.rundir / "train_log.csv");
      log_ << kTrainLogHeader << '\n';
      clusters_.open(opt_.rundir / "clusters.csv");
      clusters_ << kClustersHeader << '\n';
      labels_.open(opt_.rundir / "cluster_labels.csv");
      labels_ << "epoch,sample_id,latent_domain,pseudo_domain\n";
    }
  }

  const TrainState& state() const { return state_; }
  TrainState& state() { return state_; }
  const SourceSplit& split() const { return split_; }
  const std::vector<TrainLogRow>& log() const { return rows_; }
  const std::vector<EpochClusterStats>& cluster_history() const { return history_; }
  const std::vector<std::vector<int>>& label_history() const { return label_history_; }

  int iterations_per_epoch() const {
    const auto per = static_cast<std::size_t>(state_.hp.k) * static_cast<std::size_t>(state_.hp.batch_size);
    return static_cast<int>((split_.train.size() + per - 1) / per);
  }

  // Reassigns pseudo domains, then runs one epoch of episodes.
  void train_epoch() {
    const auto t0 = std::chrono::steady_clock::now();
    const int epoch = state_.epoch + 1;
    EpochClusterStats stats = reassign_domains(epoch);
    const auto& hp = state_.hp;
    std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(hp.k));
    for (auto i : split_.train) members[static_cast<std::size_t>(ds_.samples[i].pseudo_domain - 1)].push_back(i);
    std::vector<std::size_t> sizes;
    for (const auto& m : members) sizes.push_back(m.size());

    const int iters = iterations_per_epoch();
    for (int it = 0; it < iters; ++it) {
      Rng ep_rng(stream_seed(hp.seed, {stream::kEpisode, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(it)}));
      Rng prior_rng(stream_seed(hp.seed, {stream::kPrior, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(it)}));
      std::vector<std::vector<std::size_t>> batches;
      int test_domain = 0;
      if (hp.meta_learning) {
        const MetaSplit s = split_meta_domains(sizes, ep_rng);
        for (int d : s.train_domains) batches.push_back(draw_batch(members[static_cast<std::size_t>(d - 1)], hp.batch_size, ep_rng));
        batches.push_back(draw_batch(members[static_cast<std::size_t>(s.test_domain - 1)], hp.batch_size, ep_rng));
        test_domain = s.test_domain;
      } else {
        const auto pooled = draw_batch(split_.train, hp.k * hp.batch_size, ep_rng);
        for (int k = 0; k < hp.k; ++k)
          batches.emplace_back(pooled.begin() + k * hp.batch_size, pooled.begin() + (k + 1) * hp.batch_size);
      }
      const auto batch = make_episode_batch<float>(ds_, batches, state_.cfg.adaptation_width, prior_rng);
      TrainLogRow row{state_.iteration, epoch, test_domain, meta_step(state_, batch)};
      if (log_.is_open()) {
        const auto& l = row.loss;
        log_ << row.iteration << ',' << row.epoch << ',' << row.test_domain << ',' << detail::csv_num(l.cls) << ','
             << detail::csv_num(l.mmd) << ',' << detail::csv_num(l.dep) << ',' << detail::csv_num(l.lp[0]) << ','
             << detail::csv_num(l.lp[1]) << ',' << detail::csv_num(l.lp[2]) << ',' << detail::csv_num(l.meta_test)
             << '\n';
      }
      rows_.push_back(row);
    }
    state_.epoch = epoch;

    // Validation threshold for this epoch's parameters.
    if (!split_.val.empty()) {
      const auto yv = labels_of(ds_, split_.val);
      if (std::count(yv.begin(), yv.end(), 1) > 0 && std::count(yv.begin(), yv.end(), 0) > 0) {
        const auto sv = predict_live_scores(state_.params, state_.cfg, ds_, split_.val);
        stats.eer_threshold = eer_threshold(sv, yv);
        stats.val_auc = roc_and_auc(sv, yv).auc;
        stats.val_hter = hter(sv, yv, stats.eer_threshold);
      }
    }
    history_.push_back(stats);
    if (clusters_.is_open()) {
      clusters_ << stats.epoch << ',' << stats.k << ',' << detail::csv_num(stats.nmi_gt) << ','
                << detail::csv_num(stats.nmi_prev) << ',' << detail::csv_num(stats.changed_fraction) << ','
                << detail::csv_num(stats.inertia_pos) << ',' << detail::csv_num(stats.inertia_neg) << ','
                << (stats.fallback ? 1 : 0) << ',' << detail::csv_num(stats.mmd_pseudo) << ','
                << detail::csv_num(stats.mmd_gt) << ',' << detail::csv_num(stats.val_auc) << ','
                << detail::csv_num(stats.val_hter) << ',' << detail::csv_num(stats.eer_threshold) << '\n';
      clusters_.flush();
      log_.flush();
    }
    if (!opt_.rundir.empty() && opt_.write_checkpoints) save_checkpoint(checkpoint(), checkpoint_dir(epoch));
    if (opt_.on_epoch)
      opt_.on_epoch(stats, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }

  void run() {
    while (state_.epoch < state_.hp.epochs) train_epoch();
  }

  Checkpoint checkpoint() const {
    Checkpoint ck{state_.cfg, state_.hp, state_.params, state_.epoch, std::nullopt};
    if (!history_.empty() && !std::isnan(history_.back().eer_threshold)) ck.eer_threshold = history_.back().eer_threshold;
    return ck;
  }

  std::filesystem::path checkpoint_dir(int epoch) const {
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%03d", epoch);
    return opt_.rundir / "checkpoints" / name;
  }

 private:
  EpochClusterStats reassign_domains(int epoch) {
    const auto& hp = state_.hp;
    const auto& train = split_.train;
    EpochClusterStats stats;
    stats.epoch = epoch;
    stats.k = hp.k;

    Matrix<double> emb;
    std::vector<std::vector<double>> df;
    if (epoch == 1) {
      const auto ref = ReferenceExtractor::make(state_.cfg, hp.seed);
      if (hp.domains == DomainMode::clustered)
        df = extract_domain_features(ref.params, ref.eps, ds_, train, hp.select_channels);
      if (opt_.diagnostics)
        extract_domain_features(state_.params.extractor, state_.cfg.eps, ds_, train, hp.select_channels, &emb);
    } else if (hp.domains == DomainMode::clustered || opt_.diagnostics) {
      df = extract_domain_features(state_.params.extractor, state_.cfg.eps, ds_, train, hp.select_channels,
                                   opt_.diagnostics ? &emb : nullptr);
    }

    std::vector<int> task = labels_of(ds_, train);
    std::vector<int> gt;
    for (auto i : train) gt.push_back(ds_.samples[i].latent_domain);
    std::vector<int> labels(train.size());
    switch (hp.domains) {
      case DomainMode::clustered: {
        const auto z = ZScoreNormalizer().fit_transform(df);
        KMeansOptions ko;
        ko.n_init = hp.kmeans_restarts;
        const auto a = assign_pseudo_domains(z, task, hp.k, prev_ ? &*prev_ : nullptr,
                                             stream_seed(hp.seed, {stream::kCluster}), epoch, ko);
        labels = a.labels;
        stats.inertia_pos = a.inertia_pos;
        stats.inertia_neg = a.inertia_neg;
        stats.fallback = a.fallback_fired;
        prev_ = a;
        break;
      }
      case DomainMode::ground_truth:
        for (std::size_t i = 0; i < gt.size(); ++i) labels[i] = gt[i] + 1;
        break;
      case DomainMode::random: {
        Rng rng(stream_seed(hp.seed, {stream::kRandomDomains, static_cast<std::uint64_t>(epoch)}));
        for (auto& l : labels) l = static_cast<int>(rng.below(static_cast<std::uint64_t>(hp.k))) + 1;
        // Same both-classes guarantee as clustering; with no geometry the lowest indices move.
        detail::repair_empty_domains(Points(labels.size(), std::vector<double>{0.0}), task, hp.k, labels);
        break;
      }
    }
    stats.nmi_gt = nmi(labels, gt);
    if (!label_history_.empty()) {
      const auto& prev = label_history_.back();
      stats.nmi_prev = nmi(labels, prev);
      std::size_t changed = 0;
      for (std::size_t i = 0; i < labels.size(); ++i) changed += labels[i] != prev[i];
      stats.changed_fraction = static_cast<double>(changed) / static_cast<double>(labels.size());
    }
    for (std::size_t i = 0; i < train.size(); ++i) ds_.samples[train[i]].pseudo_domain = labels[i];
    if (opt_.diagnostics && emb.rows > 0) {
      const auto cap = static_cast<std::size_t>(hp.diagnostics_cap);
      const auto aseed = stream_seed(hp.seed, {static_cast<std::uint64_t>(epoch)});
      stats.mmd_pseudo = inter_domain_mmd(emb, labels, cap, aseed).mean_off_diagonal;
      stats.mmd_gt = inter_domain_mmd(emb, gt, cap, aseed).mean_off_diagonal;
    }
    if (labels_.is_open())
      for (std::size_t i = 0; i < train.size(); ++i)
        labels_ << epoch << ',' << train[i] << ',' << gt[i] << ',' << labels[i] << '\n';
    label_history_.push_back(labels);
    return stats;
  }

  Dataset& ds_;
  TrainState state_;
  TrainOptions opt_;
  SourceSplit split_;
  std::optional<ClusterAssignment> prev_;
  std::vector<TrainLogRow> rows_;
  std::vector<EpochClusterStats> history_;
  std::vector<std::vector<int>> label_history_;
  std::ofstream log_, clusters_, labels_;
};

}  // namespace d2am
