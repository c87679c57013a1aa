#pragma once

// End-to-end runs: train a variant, evaluate on the held-out domain, and write
// the machine-readable outputs.
//
//   metrics.json   {"auc", "hter", "eer_threshold", "far", "frr", "num_samples",
//                   "per_domain": [{"domain", "n", "mean_score_live", "mean_score_spoof"}]}
//   roc.csv        far,tpr (one row per threshold, (0,0) first)
//   manifest.json  command, variant, seed, version, full hyperparameters and spec

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "d2am/checkpoint.hpp"
#include "d2am/config.hpp"
#include "d2am/data_synth.hpp"
#include "d2am/dataset_io.hpp"
#include "d2am/meta_trainer.hpp"
#include "d2am/metrics.hpp"

namespace d2am {

inline constexpr const char* kVersion = "0.1.0";

enum class Variant { full, gt_domains, wo_domains, wo_select, wo_lp, wo_mmd, erm };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::gt_domains: return "gt_domains";
    case Variant::wo_domains: return "wo_domains";
    case Variant::wo_select: return "wo_select";
    case Variant::wo_lp: return "wo_lp";
    case Variant::wo_mmd: return "wo_mmd";
    case Variant::erm: return "erm";
  }
  return "full";
}

inline const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v{Variant::full,      Variant::gt_domains, Variant::wo_domains, Variant::wo_select,
                                      Variant::wo_lp,     Variant::wo_mmd,     Variant::erm};
  return v;
}

inline Variant variant_from_string(const std::string& s) {
  for (Variant v : all_variants())
    if (to_string(v) == s) return v;
  throw ValidationError("unknown variant '" + s + "' (expected full|gt_domains|wo_domains|wo_select|wo_lp|wo_mmd|erm)");
}

// The wiring each variant changes; everything else is inherited from base.
inline HyperParams apply_variant(Variant v, HyperParams hp, const DatasetSpec& spec) {
  switch (v) {
    case Variant::full: break;
    case Variant::gt_domains:
      hp.domains = DomainMode::ground_truth;
      hp.k = spec.num_latent_domains;
      break;
    case Variant::wo_domains: hp.domains = DomainMode::random; break;
    case Variant::wo_select: hp.select_channels = false; break;
    case Variant::wo_lp: hp.lambda_p = 0.0; break;
    case Variant::wo_mmd: hp.lambda_m = 0.0; break;
    case Variant::erm: hp.meta_learning = false; break;
  }
  return hp;
}

struct DomainScoreSummary {
  int domain = 0;
  std::size_t n = 0;
  double mean_score_live = 0.0;
  double mean_score_spoof = 0.0;
};

struct MetricsReport {
  RocCurve roc;
  double auc = 0.0;
  double eer_threshold = 0.0;
  double hter = 0.0;
  ErrorRates rates;
  std::size_t num_samples = 0;
  std::vector<DomainScoreSummary> per_domain;
};

inline MetricsReport evaluate_scores(std::span<const double> scores, std::span<const int> labels,
                                     std::span<const int> domains, double threshold) {
  MetricsReport r;
  r.roc = roc_and_auc(scores, labels);
  r.auc = r.roc.auc;
  r.eer_threshold = threshold;
  r.rates = error_rates(scores, labels, threshold);
  r.hter = r.rates.hter();
  r.num_samples = scores.size();
  std::map<int, std::array<double, 4>> acc;  // sum live, n live, sum spoof, n spoof
  for (std::size_t i = 0; i < scores.size(); ++i) {
    auto& a = acc[domains[i]];
    const std::size_t o = labels[i] == 1 ? 0 : 2;
    a[o] += scores[i];
    a[o + 1] += 1.0;
  }
  for (const auto& [d, a] : acc)
    r.per_domain.push_back({d, static_cast<std::size_t>(a[1] + a[3]), a[1] > 0 ? a[0] / a[1] : 0.0,
                            a[3] > 0 ? a[2] / a[3] : 0.0});
  return r;
}

// Scores the held-out samples of ds at the given threshold.
inline MetricsReport evaluate_held_out(const ModelParams<float>& params, const ModelConfig& cfg, const Dataset& ds,
                                       double threshold) {
  const auto idx = ds.indices(true);
  if (idx.empty()) throw ValidationError("evaluate: dataset has no held-out samples");
  const auto scores = predict_live_scores(params, cfg, ds, idx);
  const auto y = labels_of(ds, idx);
  std::vector<int> dom;
  for (auto i : idx) dom.push_back(ds.samples[i].latent_domain);
  return evaluate_scores(scores, y, dom, threshold);
}

// Validation EER threshold for params, recomputed from the deterministic source split.
inline double validation_threshold(const ModelParams<float>& params, const ModelConfig& cfg, const HyperParams& hp,
                                   const Dataset& ds) {
  const auto split = split_sources(ds, hp.val_fraction, hp.seed);
  if (split.val.empty()) throw ValidationError("no validation split (val_fraction = 0); cannot pick a threshold");
  return eer_threshold(predict_live_scores(params, cfg, ds, split.val), labels_of(ds, split.val));
}

inline nlohmann::json metrics_to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["auc"] = r.auc;
  j["hter"] = r.hter;
  j["eer_threshold"] = r.eer_threshold;
  j["far"] = r.rates.far;
  j["frr"] = r.rates.frr;
  j["num_samples"] = r.num_samples;
  j["per_domain"] = nlohmann::json::array();
  for (const auto& d : r.per_domain)
    j["per_domain"].push_back({{"domain", d.domain},
                               {"n", d.n},
                               {"mean_score_live", d.mean_score_live},
                               {"mean_score_spoof", d.mean_score_spoof}});
  return j;
}

inline void write_metrics(const MetricsReport& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "metrics.json") << metrics_to_json(r).dump(1) << '\n';
  std::ofstream roc(dir / "roc.csv");
  roc << "far,tpr\n";
  roc.precision(9);
  for (const auto& p : r.roc.points) roc << p.far << ',' << p.tpr << '\n';
}

inline void write_run_manifest(const std::filesystem::path& dir, const std::string& command,
                               const HyperParams& hp, const DatasetSpec& spec, const nlohmann::json& extra = {}) {
  std::filesystem::create_directories(dir);
  nlohmann::json m;
  m["command"] = command;
  m["version"] = kVersion;
  m["seed"] = hp.seed;
  m["hyper"] = hyper_to_json(hp);
  m["dataset_spec"] = spec_to_json(spec);
  if (!extra.is_null())
    for (const auto& [k, v] : extra.items()) m[k] = v;
  std::ofstream(dir / "manifest.json") << m.dump(1) << '\n';
}

struct RunResult {
  Variant variant = Variant::full;
  HyperParams hyper;
  MetricsReport metrics;
  Checkpoint final;
  std::vector<EpochClusterStats> history;
  double seconds = 0.0;
};

// Trains on the sources of ds and evaluates on its held-out domain. Writes the run
// directory when opt.rundir is set (final checkpoint under checkpoints/final).
inline RunResult run_experiment(Dataset ds, const ModelConfig& cfg, const HyperParams& hp, TrainOptions opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  Trainer trainer(ds, cfg, hp, opt);
  trainer.run();
  RunResult r;
  r.hyper = hp;
  r.final = trainer.checkpoint();
  const double thr = r.final.eer_threshold ? *r.final.eer_threshold : validation_threshold(r.final.params, cfg, hp, ds);
  r.final.eer_threshold = thr;
  r.metrics = evaluate_held_out(r.final.params, cfg, ds, thr);
  r.history = trainer.cluster_history();
  if (!opt.rundir.empty()) {
    save_checkpoint(r.final, opt.rundir / "checkpoints" / "final");
    write_metrics(r.metrics, opt.rundir);
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

// One ablation row: the variant's wiring applied to base, then a full run.
inline RunResult run_ablation(Variant v, const DatasetSpec& spec, const HyperParams& base, const ModelConfig& cfg = {},
                              TrainOptions opt = {}) {
  const HyperParams hp = apply_variant(v, base, spec);
  if (!opt.rundir.empty()) write_run_manifest(opt.rundir, "ablate", hp, spec, {{"variant", to_string(v)}});
  RunResult r = run_experiment(generate_dataset(spec), cfg, hp, std::move(opt));
  r.variant = v;
  return r;
}

}  // namespace d2am
