// Acceptance suite. Prints one PASS/FAIL line per criterion and writes every measured
// number to <out>/acceptance.json. Exit status is the number of failed criteria.
//
// Criteria 1-3 are oracle and property checks (seconds). Criteria 4-8 share one set of
// training runs: {full, wo_domains, erm, wo_select, wo_lp, wo_mmd} x 3 seeds on the
// default desk spec, plus one repeat of full seed 0 for the determinism check.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "d2am/clustering.hpp"
#include "d2am/harness.hpp"
#include "../fd_util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace d2am;
using namespace d2am::testing;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  Outcome(int i, bool p, std::string t) : id(i), pass(p), title(std::move(t)) {}
  int id = 0;
  bool pass = false;
  std::string title;
  std::string summary;
  json detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// --- 1. gradient suite -------------------------------------------------------

constexpr double kFdStep = 1e-5;
constexpr double kFdTol = 1e-4;
constexpr int kFdCoords = 20;

struct GradLedger {
  double worst = 0.0;
  std::string worst_name;
  int tensors = 0, min_coords = 1 << 30;
  json rows = json::array();

  void add(const std::string& group, const GradReport& r, std::size_t size) {
    ++tensors;
    min_coords = std::min(min_coords, r.checked);
    if (r.worst > worst) {
      worst = r.worst;
      worst_name = group + ":" + r.name;
    }
    rows.push_back({{"group", group},
                    {"tensor", r.name},
                    {"size", size},
                    {"coords", r.checked},
                    {"worst_rel_error", r.worst},
                    {"analytic", r.worst_analytic},
                    {"numeric", r.worst_numeric}});
  }
};

// Smallest |input| over every ReLU evaluated by the objective; central differences
// are only valid where no unit crosses its kink within the step.
double relu_margin(const ModelParams<double>& m, const ModelConfig& cfg, const HyperParams& hp,
                   const EpisodeBatch<double>& batch) {
  double margin = std::numeric_limits<double>::infinity();
  auto scan = [&](const std::vector<double>& v) {
    for (double x : v) margin = std::min(margin, std::abs(x));
  };
  const auto ft = extractor_forward(m.extractor, batch.images, cfg.eps);
  for (int j = 0; j < 3; ++j) {
    const auto& bt = ft.blocks[static_cast<std::size_t>(j)];
    const auto& conv = m.extractor.blocks[static_cast<std::size_t>(j)].conv;
    for (int c = 0; c < bt.normalized.channels; ++c)
      for (int n = 0; n < bt.normalized.batch; ++n) {
        const double* nr = bt.normalized.plane_ptr(c, n);
        for (std::size_t k = 0; k < bt.normalized.plane(); ++k)
          margin = std::min(margin, std::abs(conv.gamma[static_cast<std::size_t>(c)] * nr[k] +
                                             conv.beta[static_cast<std::size_t>(c)]));
      }
    scan(bt.drlm.hidden.data);
  }
  const auto& f2 = ft.fplus(1);
  FeatureMap<double> hidden(m.depth.conv1_w.shape[0], f2.batch, f2.height, f2.width);
  std::vector<double> cols;
  detail::conv_forward(f2, m.depth.conv1_w, m.depth.conv1_b, 3, cols, hidden);
  scan(hidden.data);
  scan(meta_learner_forward(ft.embedding, m.meta).pre.data);
  std::vector<MetaLearnerParams<double>> inner;
  episode_objective(m, cfg, hp, batch, nullptr, nullptr, &inner);
  const auto e_t = slice_rows(ft.embedding, batch.test_start(), batch.batch_size);
  for (const auto& g : inner) scan(meta_learner_forward(e_t, inner_update(m.meta, g, hp.alpha)).pre.data);
  return margin;
}

// A perturbed double model and a 3-domain episode, redrawn until every ReLU input is
// at least 100 steps from zero. The depth output layer is scaled down so J is O(10):
// at J ~ 200 a 1e-5 step leaves ~2e-8 of rounding noise in the quotient, which would
// swamp the exactly-zero gradient of conv biases feeding instance norm.
struct EpisodeFixture {
  Dataset ds;
  ModelConfig cfg;
  ModelParams<double> params;
  EpisodeBatch<double> batch;
  double margin = 0.0;
  std::uint64_t seed = 0;

  explicit EpisodeFixture(const HyperParams& hp) {
    auto spec = default_dataset_spec();
    spec.samples_per_domain = 20;
    spec.held_out_samples_per_domain = 4;
    spec.image_height = spec.image_width = 16;
    ds = generate_dataset(spec);
    std::vector<std::vector<std::size_t>> parts;
    for (int d = 0; d < 3; ++d) {
      std::vector<std::size_t> part;
      for (int i = 0; i < 4; ++i) part.push_back(static_cast<std::size_t>(d * 20 + 2 * i + (i % 2)));
      parts.push_back(part);
    }
    for (seed = 7;; ++seed) {
      params = init_model_params<double>(cfg, 5);
      Rng rng(seed);
      for (auto& [name, p] : list_params(params))
        for (auto& v : p->value) v += 0.05 * rng.normal();
      for (auto& blk : params.extractor.blocks)
        for (auto& v : blk.conv.beta.value) v += 3.0;
      for (auto& v : params.depth.conv2_w.value) v *= 0.1;
      params.depth.conv2_b[0] = 0.2;
      batch = make_episode_batch<double>(ds, parts, cfg.adaptation_width, rng);
      margin = relu_margin(params, cfg, hp, batch);
      if (margin >= 100.0 * kFdStep) break;
      if (seed > 500) throw std::runtime_error("no perturbation clears the ReLU margin");
    }
  }
};

void composed_gradients(const std::string& group, const HyperParams& hp, GradLedger& ledger, json& info) {
  EpisodeFixture f(hp);
  auto grad = zeros_like(f.params);
  std::vector<MetaLearnerParams<double>> inner;
  const auto lb = episode_objective(f.params, f.cfg, hp, f.batch, &grad, nullptr, &inner);
  // First order: the analytic gradient is exact for J with the inner steps held fixed.
  const auto* frozen = hp.first_order ? &inner : nullptr;
  auto objective = [&] { return episode_objective(f.params, f.cfg, hp, f.batch, nullptr, frozen).total; };
  Rng rng(21);
  auto vals = list_params(f.params);
  const auto grads = list_params(std::as_const(grad));
  for (std::size_t k = 0; k < vals.size(); ++k)
    ledger.add(group, fd_check(vals[k].first, vals[k].second->value, grads[k].second->value, objective, kFdCoords, rng, kFdStep),
               vals[k].second->size());
  info[group] = {{"objective", lb.total}, {"relu_margin", f.margin}, {"perturbation_seed", f.seed}};
}

Outcome criterion_gradients() {
  const auto t0 = Clock::now();
  GradLedger ledger;
  json info;
  Rng rng(101);

  {  // classification loss
    std::vector<double> p(32), g(32);
    std::vector<int> y(32);
    fill_uniform(p, rng, 0.05, 0.95);
    for (auto& v : y) v = static_cast<int>(rng.below(2));
    bce_loss<double>(p, y, g);
    ledger.add("L_cls", fd_check("p", p, g, [&] { return bce_loss<double>(p, y); }, kFdCoords, rng, kFdStep), p.size());
  }
  {  // MMD to the prior, median-heuristic kernel (bandwidth differentiated)
    auto h = random_matrix(8, 16, rng);
    const auto t = random_matrix(8, 16, rng);
    Matrix<double> g;
    mmd_to_prior_median(h, t, &g);
    ledger.add("L_mmd", fd_check("h", h.data, g.data, [&] { return mmd_to_prior_median(h, t); }, kFdCoords, rng, kFdStep),
               h.data.size());
  }
  {  // depth loss
    auto p = random_matrix(4, 64, rng);
    const auto t = random_matrix(4, 64, rng);
    Matrix<double> g;
    depth_loss(p, t, &g);
    ledger.add("L_dep", fd_check("pred", p.data, g.data, [&] { return depth_loss(p, t); }, kFdCoords, rng, kFdStep),
               p.data.size());
  }
  {  // domain enhancement entropy loss
    auto f = random_map(32, 4, 3, 3, rng);
    Param<double> w({32});
    fill_uniform(w.value, rng, -0.5, 0.5);
    FeatureMap<double> df;
    Param<double> dw({32});
    domain_entropy_loss(f, w, EntropyForm::symmetric, &df, &dw);
    auto obj = [&] { return domain_entropy_loss(f, w); };
    ledger.add("L_p", fd_check("ent_w", w.value, dw.value, obj, kFdCoords, rng, kFdStep), w.size());
    ledger.add("L_p", fd_check("fminus", f.data, df.data, obj, kFdCoords, rng, kFdStep), f.data.size());
  }
  HyperParams fo;
  fo.alpha = 0.5;  // large enough for the inner step to matter
  composed_gradients("J_first_order", fo, ledger, info);
  HyperParams so = fo;
  so.first_order = false;
  composed_gradients("J_second_order", so, ledger, info);

  const double sec = seconds_since(t0);
  Outcome o{1, ledger.worst < kFdTol && sec < 60.0, "gradient suite"};
  o.summary = fmt("worst rel err %.2e (%s) over %d tensors, >= %d coords each (all coords if smaller), %.1fs",
                  ledger.worst, ledger.worst_name.c_str(), ledger.tensors, std::min(ledger.min_coords, kFdCoords), sec);
  o.detail = {{"worst", ledger.worst}, {"seconds", sec}, {"step", kFdStep}, {"tolerance", kFdTol},
              {"tensors", ledger.rows}, {"fixtures", info}};
  return o;
}

// --- 2. algebraic invariants -----------------------------------------------

Outcome criterion_invariants() {
  Rng rng(202);
  json d;
  // F+ + F- = F
  double split_err = 0.0;
  auto drlm = init_model_params<double>(ModelConfig{}, 3).extractor.blocks[1].drlm;
  for (auto& v : drlm.w1.value) v = 0.5 * rng.normal();
  for (auto& v : drlm.w2.value) v = 0.5 * rng.normal();
  for (int t = 0; t < 20; ++t) {
    const auto f = random_map(static_cast<int>(drlm.w2.shape[0]), 4, 6, 6, rng, 3.0);
    const auto out = drlm_forward(f, drlm);
    for (std::size_t k = 0; k < f.data.size(); ++k)
      split_err = std::max(split_err, std::abs(out.fplus.data[k] + out.fminus.data[k] - f.data[k]));
  }
  d["split_max_error"] = split_err;

  // MMD(X, X) = 0 and MMD >= 0
  double self_mmd = 0.0, min_mmd = std::numeric_limits<double>::infinity();
  for (int t = 0; t < 100; ++t) {
    const auto x = random_matrix(8, 6, rng);
    const auto y = random_matrix(8, 6, rng, 1.0 + rng.uniform());
    self_mmd = std::max(self_mmd, std::abs(mmd_to_prior_median(x, x)));
    min_mmd = std::min(min_mmd, mmd_to_prior_median(x, y));
  }
  d["mmd_self_max"] = self_mmd;
  d["mmd_pairs_min"] = min_mmd;

  // Symmetric entropy loss: minimum at p = 1/2 with zero gradient there.
  auto fminus = random_map(4, 1, 2, 2, rng);
  for (auto& v : fminus.data) v = std::abs(v) + 0.1;
  Param<double> w({4});
  fill_uniform(w.value, rng);
  // Project w so the pooled logit is exactly zero: shift along the first channel.
  auto pooled = [&](int c) {
    double s = 0;
    for (int k = 0; k < 4; ++k) s += fminus.plane_ptr(c, 0)[k];
    return s / 4.0;
  };
  double z = 0;
  for (int c = 1; c < 4; ++c) z += w[static_cast<std::size_t>(c)] * pooled(c);
  w[0] = -z / pooled(0);
  FeatureMap<double> dfm;
  Param<double> dw({4});
  const double at_half = domain_entropy_loss(fminus, w, EntropyForm::symmetric, &dfm, &dw);
  double grad_max = 0;
  for (double g : dw.value) grad_max = std::max(grad_max, std::abs(g));
  for (double g : dfm.data) grad_max = std::max(grad_max, std::abs(g));
  double min_elsewhere = std::numeric_limits<double>::infinity();
  const double w0 = w[0];
  for (double shift = -4.0; shift <= 4.0; shift += 0.25) {
    if (shift == 0.0) continue;
    w[0] = w0 + shift / pooled(0);
    min_elsewhere = std::min(min_elsewhere, domain_entropy_loss(fminus, w));
  }
  d["entropy_at_half"] = at_half;
  d["entropy_min_elsewhere"] = min_elsewhere;
  d["entropy_grad_at_half"] = grad_max;

  // AUC invariant under strictly increasing transforms.
  double auc_gap = 0;
  for (int t = 0; t < 50; ++t) {
    std::vector<double> s, tr;
    std::vector<int> y;
    for (int i = 0; i < 80; ++i) {
      y.push_back(i % 2 == 0 ? 1 : static_cast<int>(rng.below(2)));
      s.push_back(std::round(rng.normal() * 4.0) / 4.0 + 0.5 * y.back());
      tr.push_back(std::atan(s.back()) * 3.0 + std::exp(0.2 * s.back()));
    }
    auc_gap = std::max(auc_gap, std::abs(roc_and_auc(s, y).auc - roc_and_auc(tr, y).auc));
  }
  d["auc_transform_max_gap"] = auc_gap;

  const bool pass = split_err <= 1e-6 && self_mmd <= 1e-10 && min_mmd >= 0.0 && at_half < min_elsewhere &&
                    grad_max <= 1e-12 && auc_gap == 0.0;
  Outcome o{2, pass, "algebraic invariants"};
  o.summary = fmt("|F+ + F- - F| %.1e; MMD(X,X) %.1e, min MMD %.2e over 100 pairs; entropy %.4f at p=1/2 "
                  "(grad %.1e) < %.4f elsewhere; AUC transform gap %.1e over 50 sets",
                  split_err, self_mmd, min_mmd, at_half, grad_max, min_elsewhere, auc_gap);
  o.detail = d;
  return o;
}

// --- 3. oracle equivalence -------------------------------------------------

double brute_force_assignment(const std::vector<std::vector<double>>& c) {
  std::vector<int> perm(c.size());
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0;
    for (std::size_t i = 0; i < c.size(); ++i) s += c[i][static_cast<std::size_t>(perm[i])];
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

double lloyd_restarts(const Points& pts, int k, int restarts, Rng& rng) {
  const std::size_t n = pts.size(), dim = pts.front().size();
  double best = std::numeric_limits<double>::infinity();
  for (int r = 0; r < restarts; ++r) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    rng.shuffle(idx.begin(), idx.end());
    Points cent;
    for (int c = 0; c < k; ++c) cent.push_back(pts[idx[static_cast<std::size_t>(c)]]);
    std::vector<int> lab(n, -1);
    for (int it = 0; it < 300; ++it) {
      bool moved = false;
      for (std::size_t i = 0; i < n; ++i) {
        int arg = 0;
        for (int c = 1; c < k; ++c)
          if (sq_dist(pts[i], cent[static_cast<std::size_t>(c)]) < sq_dist(pts[i], cent[static_cast<std::size_t>(arg)]))
            arg = c;
        moved |= lab[i] != arg;
        lab[i] = arg;
      }
      if (!moved) break;
      for (int c = 0; c < k; ++c) {
        std::vector<double> m(dim, 0.0);
        int cnt = 0;
        for (std::size_t i = 0; i < n; ++i)
          if (lab[i] == c) {
            for (std::size_t j = 0; j < dim; ++j) m[j] += pts[i][j];
            ++cnt;
          }
        if (cnt == 0) continue;
        for (auto& v : m) v /= cnt;
        cent[static_cast<std::size_t>(c)] = m;
      }
    }
    double in = 0;
    for (std::size_t i = 0; i < n; ++i) in += sq_dist(pts[i], cent[static_cast<std::size_t>(lab[i])]);
    best = std::min(best, in);
  }
  return best;
}

// NMI with arithmetic-mean normalisation, from an explicit contingency table.
double nmi_oracle(const std::vector<int>& a, const std::vector<int>& b, int ka, int kb) {
  const double n = static_cast<double>(a.size());
  std::vector<std::vector<double>> t(static_cast<std::size_t>(ka), std::vector<double>(static_cast<std::size_t>(kb)));
  for (std::size_t i = 0; i < a.size(); ++i) t[static_cast<std::size_t>(a[i])][static_cast<std::size_t>(b[i])] += 1;
  std::vector<double> ra(static_cast<std::size_t>(ka)), rb(static_cast<std::size_t>(kb));
  for (int i = 0; i < ka; ++i)
    for (int j = 0; j < kb; ++j) {
      ra[static_cast<std::size_t>(i)] += t[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      rb[static_cast<std::size_t>(j)] += t[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    }
  double mi = 0, ha = 0, hb = 0;
  for (int i = 0; i < ka; ++i)
    for (int j = 0; j < kb; ++j) {
      const double nij = t[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      if (nij > 0) mi += nij / n * std::log(n * nij / (ra[static_cast<std::size_t>(i)] * rb[static_cast<std::size_t>(j)]));
    }
  for (double v : ra)
    if (v > 0) ha -= v / n * std::log(v / n);
  for (double v : rb)
    if (v > 0) hb -= v / n * std::log(v / n);
  return mi / (0.5 * (ha + hb));
}

Outcome criterion_oracles() {
  Rng rng(303);
  json d;
  // Kuhn-Munkres vs brute force.
  int km_bad = 0;
  double km_gap = 0;
  for (int n : {5, 6})
    for (int t = 0; t < 100; ++t) {
      std::vector<std::vector<double>> c(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(n)));
      for (auto& row : c)
        for (auto& v : row) v = rng.uniform(0, 100);
      const double gap = std::abs(assignment_cost(c, kuhn_munkres(c)) - brute_force_assignment(c));
      km_gap = std::max(km_gap, gap);
      km_bad += gap > 1e-9;
    }
  d["kuhn_munkres"] = {{"instances", 200}, {"mismatches", km_bad}, {"max_gap", km_gap}};

  // K-means vs 50-restart Lloyd. Mixture instances must agree both ways; on
  // structureless uniform instances the oracle itself often stalls, so there the
  // implementation must simply never be worse.
  auto instance = [&](bool mixture, int& k) {
    const int n = 20 + static_cast<int>(rng.below(41));
    const int dim = 2 + static_cast<int>(rng.below(7));
    k = 2 + static_cast<int>(rng.below(3));
    Points p;
    if (mixture) {
      Points c(static_cast<std::size_t>(k), std::vector<double>(static_cast<std::size_t>(dim)));
      for (auto& x : c) fill_uniform(x, rng, -3, 3);
      for (int i = 0; i < n; ++i) {
        auto x = c[static_cast<std::size_t>(i % k)];
        const double s = rng.uniform(0.2, 1.0);
        for (auto& v : x) v += s * rng.normal();
        p.push_back(x);
      }
    } else {
      p.assign(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(dim)));
      for (auto& x : p) fill_uniform(x, rng);
    }
    return p;
  };
  int mix_bad = 0, uni_worse = 0, uni_better = 0;
  double mix_gap = 0;
  json mix_rows = json::array();
  for (int t = 0; t < 20; ++t) {
    int k = 0;
    const auto p = instance(true, k);
    const double ours = kmeans(p, k, static_cast<std::uint64_t>(t)).inertia;
    const double oracle = lloyd_restarts(p, k, 50, rng);
    mix_gap = std::max(mix_gap, std::abs(ours - oracle));
    mix_bad += std::abs(ours - oracle) > 1e-9;
    mix_rows.push_back({{"n", p.size()}, {"d", p.front().size()}, {"k", k}, {"ours", ours}, {"oracle", oracle}});
  }
  for (int t = 0; t < 20; ++t) {
    int k = 0;
    const auto p = instance(false, k);
    const double ours = kmeans(p, k, static_cast<std::uint64_t>(t)).inertia;
    const double oracle = lloyd_restarts(p, k, 50, rng);
    uni_worse += ours > oracle + 1e-9;
    uni_better += ours < oracle - 1e-9;
  }
  d["kmeans_mixture"] = {{"instances", 20}, {"outside_1e-9", mix_bad}, {"max_gap", mix_gap}, {"rows", mix_rows}};
  d["kmeans_uniform"] = {{"instances", 20}, {"worse", uni_worse}, {"better", uni_better}};

  // NMI vs contingency-table formula.
  double nmi_gap = 0;
  for (int t = 0; t < 100; ++t) {
    const int ka = 2 + static_cast<int>(rng.below(4)), kb = 2 + static_cast<int>(rng.below(4));
    std::vector<int> a(200), b(200);
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] = static_cast<int>(rng.below(static_cast<std::uint64_t>(ka)));
      b[i] = rng.uniform() < 0.6 ? a[i] % kb : static_cast<int>(rng.below(static_cast<std::uint64_t>(kb)));
    }
    nmi_gap = std::max(nmi_gap, std::abs(nmi(a, b) - nmi_oracle(a, b, ka, kb)));
  }
  d["nmi_max_gap"] = nmi_gap;

  Outcome o{3, km_bad == 0 && mix_bad == 0 && uni_worse == 0 && nmi_gap <= 1e-10, "oracle equivalence"};
  o.summary = fmt("Kuhn-Munkres %d/200 mismatches; k-means mixture %d/20 outside 1e-9 (max %.1e), uniform %d/20 "
                  "worse (%d better); NMI max gap %.1e",
                  km_bad, mix_bad, mix_gap, uni_worse, uni_better, nmi_gap);
  o.detail = d;
  return o;
}

// --- training runs ---------------------------------------------------------

struct RunRecord {
  std::string variant;
  std::uint64_t seed = 0;
  fs::path dir;
  double hter = 0, auc = 0, seconds = 0;
  std::vector<EpochClusterStats> history;
};

RunRecord train_variant(Variant v, std::uint64_t seed, const fs::path& root, const std::string& suffix = "") {
  auto spec = default_dataset_spec(seed);
  HyperParams hp;
  hp.seed = seed;
  RunRecord rec;
  rec.variant = to_string(v);
  rec.seed = seed;
  rec.dir = root / (rec.variant + "_seed" + std::to_string(seed) + suffix);
  fs::remove_all(rec.dir);
  TrainOptions opt;
  opt.rundir = rec.dir;
  opt.write_checkpoints = false;
  opt.diagnostics = v == Variant::full;
  const auto r = run_ablation(v, spec, hp, {}, opt);
  rec.hter = r.metrics.hter;
  rec.auc = r.metrics.auc;
  rec.seconds = r.seconds;
  rec.history = r.history;
  std::printf("  run %-10s seed %llu%s: hter %.4f auc %.4f (%.0fs)\n", rec.variant.c_str(),
              static_cast<unsigned long long>(seed), suffix.c_str(), rec.hter, rec.auc, rec.seconds);
  std::fflush(stdout);
  return rec;
}

struct Summary {
  double mean_hter = 0, sd_hter = 0, mean_auc = 0, max_seconds = 0;
};

Summary summarise(const std::vector<RunRecord>& runs) {
  Summary s;
  const double n = static_cast<double>(runs.size());
  for (const auto& r : runs) {
    s.mean_hter += r.hter / n;
    s.mean_auc += r.auc / n;
    s.max_seconds = std::max(s.max_seconds, r.seconds);
  }
  for (const auto& r : runs) s.sd_hter += (r.hter - s.mean_hter) * (r.hter - s.mean_hter);
  s.sd_hter = runs.size() > 1 ? std::sqrt(s.sd_hter / (n - 1.0)) : 0.0;  // sample sd
  return s;
}

json runs_json(const std::vector<RunRecord>& runs) {
  json j = json::array();
  for (const auto& r : runs)
    j.push_back({{"seed", r.seed}, {"hter", r.hter}, {"auc", r.auc}, {"seconds", r.seconds}, {"dir", r.dir.string()}});
  return j;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// --- 4. clustering recovery ------------------------------------------------

Outcome criterion_recovery(const std::vector<RunRecord>& full) {
  json per = json::array();
  for (const auto& r : full) per.push_back({{"seed", r.seed}, {"epoch1_nmi_gt", r.history.at(0).nmi_gt}});
  const double nmi0 = full.at(0).history.at(0).nmi_gt;
  Outcome o{4, nmi0 >= 0.6, "clustering recovery"};
  std::string others;
  for (std::size_t i = 1; i < full.size(); ++i) others += fmt(" seed%llu %.3f", static_cast<unsigned long long>(full[i].seed), full[i].history.at(0).nmi_gt);
  o.summary = fmt("epoch-1 NMI vs ground truth %.3f on the default spec (>= 0.6); other seeds:%s", nmi0, others.c_str());
  o.detail = {{"per_seed", per}, {"threshold", 0.6}};
  return o;
}

// --- 5. directional generalisation -----------------------------------------

Outcome criterion_direction(const std::map<std::string, std::vector<RunRecord>>& runs) {
  const auto full = summarise(runs.at("full"));
  const auto rnd = summarise(runs.at("wo_domains"));
  const auto erm = summarise(runs.at("erm"));
  const double rel_rnd = 1.0 - full.mean_hter / rnd.mean_hter;
  const double rel_erm = 1.0 - full.mean_hter / erm.mean_hter;
  const double max_sec = std::max({full.max_seconds, rnd.max_seconds, erm.max_seconds});
  const bool pass = full.mean_hter <= 0.9 * rnd.mean_hter && full.mean_hter <= 0.9 * erm.mean_hter &&
                    full.mean_auc > rnd.mean_auc && full.mean_auc > erm.mean_auc && max_sec < 900.0;
  Outcome o{5, pass, "directional generalisation"};
  o.summary = fmt("mean HTER full %.4f vs wo_domains %.4f (%.1f%% lower) vs erm %.4f (%.1f%% lower), need >= 10%%; "
                  "AUC %.4f vs %.4f vs %.4f; slowest run %.0fs",
                  full.mean_hter, rnd.mean_hter, 100 * rel_rnd, erm.mean_hter, 100 * rel_erm, full.mean_auc,
                  rnd.mean_auc, erm.mean_auc, max_sec);
  o.detail = {{"full", runs_json(runs.at("full"))},
              {"wo_domains", runs_json(runs.at("wo_domains"))},
              {"erm", runs_json(runs.at("erm"))},
              {"relative_hter_reduction", {{"wo_domains", rel_rnd}, {"erm", rel_erm}}},
              {"required_reduction", 0.10}};
  return o;
}

// --- 6. ablation sensitivity -----------------------------------------------

Outcome criterion_ablation(const std::map<std::string, std::vector<RunRecord>>& runs) {
  const auto full = summarise(runs.at("full"));
  const double floor = full.mean_hter - full.sd_hter;
  bool pass = true;
  std::string parts;
  json d{{"full_mean", full.mean_hter}, {"full_sd", full.sd_hter}, {"floor", floor}};
  for (const char* v : {"wo_select", "wo_lp", "wo_mmd"}) {
    const auto s = summarise(runs.at(v));
    pass &= s.mean_hter >= floor;
    parts += fmt(" %s %.4f", v, s.mean_hter);
    d[v] = {{"mean_hter", s.mean_hter}, {"sd_hter", s.sd_hter}, {"mean_auc", s.mean_auc}, {"runs", runs_json(runs.at(v))}};
  }
  Outcome o{6, pass, "ablation sensitivity"};
  o.summary = fmt("floor = full mean %.4f - sd %.4f = %.4f; variant means:%s", full.mean_hter, full.sd_hter, floor,
                  parts.c_str());
  o.detail = d;
  return o;
}

// --- 7. determinism --------------------------------------------------------

Outcome criterion_determinism(const RunRecord& a, const RunRecord& b) {
  int files = 0, differ = 0;
  json diffs = json::array();
  auto compare = [&](const fs::path& pa, const fs::path& pb) {
    ++files;
    if (!fs::exists(pb) || slurp(pa) != slurp(pb)) {
      ++differ;
      diffs.push_back(pa.filename().string());
    }
  };
  for (const auto& e : fs::directory_iterator(a.dir / "checkpoints" / "final"))
    compare(e.path(), b.dir / "checkpoints" / "final" / e.path().filename());
  compare(a.dir / "metrics.json", b.dir / "metrics.json");
  Outcome o{7, differ == 0 && files > 1, "determinism"};
  o.summary = fmt("%d/%d files bitwise identical (final checkpoint tensors, manifest, metrics.json)", files - differ, files);
  o.detail = {{"files", files}, {"different", diffs}};
  return o;
}

// --- 8. dynamic adjustment ---------------------------------------------------

Outcome criterion_dynamics(const RunRecord& full0, int epochs) {
  std::ifstream in(full0.dir / "clusters.csv");
  std::string header, line;
  std::getline(in, header);
  std::vector<std::string> cols;
  {
    std::stringstream ss(header);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(c);
  }
  auto col = [&](const std::string& name) {
    const auto it = std::find(cols.begin(), cols.end(), name);
    return it == cols.end() ? -1 : static_cast<int>(it - cols.begin());
  };
  const int c_nmi = col("nmi_prev"), c_mp = col("mmd_pseudo"), c_mg = col("mmd_gt"), c_ep = col("epoch");
  const bool schema = c_nmi >= 0 && c_mp >= 0 && c_mg >= 0 && c_ep >= 0;
  int rows = 0, logged = 0, changed = 0, mmd_ge = 0, mmd_rows = 0;
  double min_nmi = 1.0;
  json trace = json::array();
  while (schema && std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    ++rows;
    auto val = [&](int k) { return cells[static_cast<std::size_t>(k)] == "nan" ? std::nan("") : std::stod(cells[static_cast<std::size_t>(k)]); };
    const double np = val(c_nmi), mp = val(c_mp), mg = val(c_mg);
    if (std::isfinite(np)) {
      ++logged;
      changed += np < 1.0;
      min_nmi = std::min(min_nmi, np);
    }
    if (std::isfinite(mp) && std::isfinite(mg)) {
      ++mmd_rows;
      mmd_ge += mp >= mg;
    }
    trace.push_back({{"epoch", std::stoi(cells[static_cast<std::size_t>(c_ep)])}, {"nmi_prev", np}, {"mmd_pseudo", mp}, {"mmd_gt", mg}});
  }
  // Epoch 1 has no previous labelling; every later epoch must log NMI vs previous.
  const bool pass = schema && rows == epochs && logged == epochs - 1 && changed >= 1;
  Outcome o{8, pass, "dynamic adjustment"};
  o.summary = fmt("%d/%d epochs logged, NMI vs previous < 1 in %d epochs (min %.3f); pseudo-domain MMD >= "
                  "ground-truth MMD in %d/%d epochs (reported)",
                  rows, epochs, changed, min_nmi, mmd_ge, mmd_rows);
  o.detail = {{"rows", rows}, {"epochs_label_change", changed}, {"min_nmi_prev", min_nmi},
              {"epochs_mmd_pseudo_ge_gt", mmd_ge}, {"epochs_with_mmd", mmd_rows}, {"trace", trace}};
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"D2AM acceptance suite"};
  std::string out = "acceptance_runs";
  int seeds = 3;
  std::vector<int> only;
  app.add_option("--out", out, "Directory for run outputs and acceptance.json");
  app.add_option("--seeds", seeds, "Seeds per variant for criteria 4-8")->check(CLI::Range(2, 10));
  app.add_option("--only", only, "Run only these criteria (development aid)")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  quiet_warnings() = true;

  auto wanted = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };
  const auto t0 = Clock::now();
  fs::create_directories(out);
  std::vector<Outcome> outcomes;
  auto report = [&](Outcome o) {
    std::printf("CRITERION %d %s: %s: %s\n", o.id, o.pass ? "PASS" : "FAIL", o.title.c_str(), o.summary.c_str());
    std::fflush(stdout);
    outcomes.push_back(std::move(o));
  };

  if (wanted(1)) report(criterion_gradients());
  if (wanted(2)) report(criterion_invariants());
  if (wanted(3)) report(criterion_oracles());

  if (wanted(4) || wanted(5) || wanted(6) || wanted(7) || wanted(8)) {
    const fs::path root = fs::path(out) / "runs";
    std::map<std::string, std::vector<RunRecord>> runs;
    std::vector<Variant> variants{Variant::full};
    if (wanted(5)) variants.insert(variants.end(), {Variant::wo_domains, Variant::erm});
    if (wanted(6)) variants.insert(variants.end(), {Variant::wo_select, Variant::wo_lp, Variant::wo_mmd});
    const bool need_seeds = wanted(5) || wanted(6) || wanted(4);
    for (Variant v : variants)
      for (int s = 0; s < (need_seeds ? seeds : 1); ++s)
        runs[to_string(v)].push_back(train_variant(v, static_cast<std::uint64_t>(s), root));
    if (wanted(4)) report(criterion_recovery(runs.at("full")));
    if (wanted(5)) report(criterion_direction(runs));
    if (wanted(6)) report(criterion_ablation(runs));
    if (wanted(7)) report(criterion_determinism(runs.at("full").front(), train_variant(Variant::full, 0, root, "_repeat")));
    if (wanted(8)) report(criterion_dynamics(runs.at("full").front(), HyperParams{}.epochs));
  }

  int failed = 0;
  json results = json::array();
  for (const auto& o : outcomes) {
    failed += !o.pass;
    results.push_back({{"criterion", o.id}, {"title", o.title}, {"pass", o.pass}, {"summary", o.summary}, {"detail", o.detail}});
  }
  std::ofstream(fs::path(out) / "acceptance.json")
      << json{{"results", results}, {"seconds", seconds_since(t0)}, {"version", kVersion}}.dump(1) << '\n';
  std::printf("%zu criteria run, %d failed (%.0fs); details in %s\n", outcomes.size(), failed, seconds_since(t0),
              (fs::path(out) / "acceptance.json").string().c_str());
  return failed;
}
