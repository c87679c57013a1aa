// d2am command line: synthesise data, train, evaluate, run ablations, and export
// diagnostics. Every subcommand writes a manifest next to its outputs.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "d2am/clustering.hpp"
#include "d2am/harness.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace d2am;

namespace {

struct HyperArgs {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config, "Hyperparameter file (key = value lines)")->check(CLI::ExistingFile);
    cmd->add_option("--set", sets, "Override one key, e.g. --set k=4 (repeatable)");
    cmd->add_option("--seed", seed, "Training seed (overrides the config)");
  }

  HyperParams resolve() const {
    HyperParams hp = config.empty() ? HyperParams{} : load_config_file(config);
    for (const auto& s : sets) apply_override(hp, s);
    if (seed) hp.seed = *seed;
    hp.validate();
    return hp;
  }
};

struct DataArgs {
  std::string data, spec;
  int samples_per_domain = 0, held_out = 0, image_size = 0;

  void attach(CLI::App* cmd, bool allow_spec) {
    cmd->add_option("--data", data, "Dataset directory written by synth")->check(CLI::ExistingDirectory);
    if (!allow_spec) return;
    cmd->add_option("--spec", spec, "Dataset spec JSON (generated in memory)")->check(CLI::ExistingFile);
    cmd->add_option("--samples-per-domain", samples_per_domain, "Override samples per source domain");
    cmd->add_option("--held-out", held_out, "Override held-out samples");
    cmd->add_option("--image-size", image_size, "Override square image size");
  }

  DatasetSpec spec_or_default() const {
    auto s = spec.empty() ? default_dataset_spec() : load_spec_file(spec);
    if (samples_per_domain > 0) s.samples_per_domain = samples_per_domain;
    if (held_out > 0) s.held_out_samples_per_domain = held_out;
    if (image_size > 0) s.image_height = s.image_width = image_size;
    return s;
  }

  Dataset load(std::optional<std::uint64_t> spec_seed = {}) const {
    if (!data.empty()) return load_dataset(data);
    auto s = spec_or_default();
    if (spec_seed) s.seed = *spec_seed;
    s.validate();
    return generate_dataset(s);
  }
};

void print_metrics(const std::string& tag, const MetricsReport& m) {
  std::printf("%s  auc=%.4f  hter=%.4f  far=%.4f  frr=%.4f  threshold=%.6f  n=%zu\n", tag.c_str(), m.auc, m.hter,
              m.rates.far, m.rates.frr, m.eer_threshold, m.num_samples);
}

TrainOptions progress_options(const fs::path& rundir, int epochs) {
  TrainOptions opt;
  opt.rundir = rundir;
  opt.on_epoch = [epochs](const EpochClusterStats& s, double sec) {
    std::fprintf(stderr, "epoch %d/%d  nmi_gt=%.3f  nmi_prev=%.3f  changed=%.3f  val_auc=%.4f  (%.1fs)\n", s.epoch,
                 epochs, s.nmi_gt, s.nmi_prev, s.changed_fraction, s.val_auc, sec);
  };
  return opt;
}

// --- synth -----------------------------------------------------------------

int cmd_synth(const DataArgs& a, std::optional<std::uint64_t> seed, const std::string& out) {
  auto spec = a.spec_or_default();
  if (seed) spec.seed = *seed;
  spec.validate();
  const auto ds = generate_dataset(spec);
  save_dataset(ds, out);
  // The dataset manifest doubles as the run manifest; loaders ignore extra keys.
  json m;
  std::ifstream(fs::path(out) / "manifest.json") >> m;
  m["command"] = "synth";
  m["code_version"] = kVersion;
  std::ofstream(fs::path(out) / "manifest.json") << m.dump(1) << '\n';
  std::printf("wrote %zu samples (%zu held out) to %s\n", ds.samples.size(), ds.indices(true).size(), out.c_str());
  return 0;
}

// --- train -----------------------------------------------------------------

int cmd_train(const DataArgs& a, const HyperArgs& h, const std::string& out) {
  const auto hp = h.resolve();
  auto ds = a.load();
  write_run_manifest(out, "train", hp, ds.spec, {{"data", a.data}});
  auto opt = progress_options(out, hp.epochs);
  if (ds.indices(true).empty()) {
    Trainer t(ds, ModelConfig{}, hp, opt);
    t.run();
    save_checkpoint(t.checkpoint(), fs::path(out) / "checkpoints" / "final");
    std::printf("trained %d epochs; no held-out samples to evaluate\n", hp.epochs);
    return 0;
  }
  const auto r = run_experiment(std::move(ds), ModelConfig{}, hp, opt);
  print_metrics("held-out", r.metrics);
  std::printf("run written to %s (%.1fs)\n", out.c_str(), r.seconds);
  return 0;
}

// --- eval ------------------------------------------------------------------

int cmd_eval(const std::string& ckpt_dir, const std::string& data, std::string out, std::optional<double> thr) {
  const auto ck = load_checkpoint(ckpt_dir);
  const auto ds = load_dataset(data);
  if (out.empty()) out = (fs::path(ckpt_dir) / "eval").string();
  double threshold = 0.0;
  std::string source;
  if (thr) {
    threshold = *thr;
    source = "flag";
  } else if (ck.eer_threshold) {
    threshold = *ck.eer_threshold;
    source = "checkpoint";
  } else {
    threshold = validation_threshold(ck.params, ck.model, ck.hyper, ds);
    source = "validation";
  }
  const auto report = evaluate_held_out(ck.params, ck.model, ds, threshold);
  write_metrics(report, out);
  write_run_manifest(out, "eval", ck.hyper, ds.spec,
                     {{"checkpoint", ckpt_dir}, {"data", data}, {"threshold_source", source}, {"epoch", ck.epoch}});
  print_metrics("held-out", report);
  return 0;
}

// --- ablate ----------------------------------------------------------------

int cmd_ablate(const DataArgs& a, const HyperArgs& h, const std::vector<std::string>& variants,
               const std::string& out_root) {
  const auto base = h.resolve();
  for (const auto& name : variants) {
    const Variant v = variant_from_string(name);
    const auto rundir = fs::path(out_root) / (name + "_seed" + std::to_string(base.seed));
    RunResult r;
    if (a.data.empty()) {
      // Dataset seed follows the training seed so each seed is an independent draw.
      auto spec = a.spec_or_default();
      spec.seed = base.seed;
      r = run_ablation(v, spec, base, {}, progress_options(rundir, base.epochs));
    } else {
      auto ds = load_dataset(a.data);
      const auto hp = apply_variant(v, base, ds.spec);
      write_run_manifest(rundir, "ablate", hp, ds.spec, {{"variant", name}, {"data", a.data}});
      r = run_experiment(std::move(ds), ModelConfig{}, hp, progress_options(rundir, hp.epochs));
    }
    print_metrics(name, r.metrics);
    std::printf("  -> %s (%.1fs)\n", rundir.string().c_str(), r.seconds);
  }
  return 0;
}

// --- analyze ---------------------------------------------------------------

std::vector<std::map<std::string, std::string>> read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path.string());
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    return cells;
  };
  std::string line;
  std::getline(in, line);
  const auto header = split(line);
  std::vector<std::map<std::string, std::string>> rows;
  while (std::getline(in, line)) {
    const auto cells = split(line);
    if (cells.size() != header.size()) throw LoadError(path.string() + ": ragged row '" + line + "'");
    auto& row = rows.emplace_back();
    for (std::size_t k = 0; k < cells.size(); ++k) row[header[k]] = cells[k];
  }
  return rows;
}

double num(const std::string& s) { return s == "nan" || s.empty() ? std::nan("") : std::stod(s); }

int cmd_clusters(const std::string& run, std::string out) {
  if (out.empty()) out = run;
  const auto rows = read_csv(fs::path(run) / "clusters.csv");
  if (rows.empty()) throw LoadError("clusters.csv has no epochs");
  std::printf("%5s %3s %7s %8s %8s %10s %10s %8s\n", "epoch", "k", "nmi_gt", "nmi_prev", "changed", "mmd_pseudo",
              "mmd_gt", "val_auc");
  json epochs = json::array();
  int changed_epochs = 0, mmd_ge = 0, mmd_n = 0;
  for (const auto& r : rows) {
    const double nmi_prev = num(r.at("nmi_prev")), mp = num(r.at("mmd_pseudo")), mg = num(r.at("mmd_gt"));
    std::printf("%5s %3s %7.4f %8.4f %8.4f %10.5f %10.5f %8.4f\n", r.at("epoch").c_str(), r.at("k").c_str(),
                num(r.at("nmi_gt")), nmi_prev, num(r.at("changed_fraction")), mp, mg, num(r.at("val_auc")));
    if (std::isfinite(nmi_prev) && nmi_prev < 1.0) ++changed_epochs;
    if (std::isfinite(mp) && std::isfinite(mg)) {
      ++mmd_n;
      mmd_ge += mp >= mg;
    }
    epochs.push_back({{"epoch", std::stoi(r.at("epoch"))}, {"nmi_gt", num(r.at("nmi_gt"))}, {"nmi_prev", nmi_prev}});
  }
  json summary{{"epochs", rows.size()},
               {"epoch1_nmi_gt", num(rows.front().at("nmi_gt"))},
               {"epochs_with_label_change", changed_epochs},
               {"epochs_mmd_pseudo_ge_gt", mmd_ge},
               {"epochs_with_mmd", mmd_n},
               {"trace", epochs}};
  fs::create_directories(out);
  std::ofstream(fs::path(out) / "clusters_summary.json") << summary.dump(1) << '\n';
  std::printf("labels changed in %d epoch(s); pseudo MMD >= ground-truth MMD in %d of %d\n", changed_epochs, mmd_ge,
              mmd_n);
  std::ofstream(fs::path(out) / "analyze_manifest.json")
      << json{{"command", "analyze clusters"}, {"version", kVersion}, {"run", run}}.dump(1) << '\n';
  return 0;
}

// Extractor from a checkpoint, or the frozen epoch-1 reference when none is given.
std::pair<ExtractorParams<float>, double> pick_extractor(const std::string& ckpt, std::uint64_t seed,
                                                         json& provenance) {
  if (!ckpt.empty()) {
    auto ck = load_checkpoint(ckpt);
    provenance["checkpoint"] = ckpt;
    provenance["hyper"] = hyper_to_json(ck.hyper);
    return {ck.params.extractor, ck.model.eps};
  }
  const auto ref = ReferenceExtractor::make(ModelConfig{}, seed);
  provenance["extractor"] = "reference";
  provenance["seed"] = seed;
  return {ref.params, ref.eps};
}

int cmd_export_df(const std::string& data, const std::string& ckpt, std::uint64_t seed, bool all_channels,
                  const std::string& out) {
  const auto ds = load_dataset(data);
  json prov{{"command", "analyze export-df"}, {"version", kVersion}, {"data", data}, {"select_channels", !all_channels}};
  const auto [ext, eps] = pick_extractor(ckpt, seed, prov);
  std::vector<std::size_t> idx(ds.samples.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const auto df = extract_domain_features(ext, eps, ds, idx, !all_channels);
  fs::create_directories(out);
  std::ofstream f(fs::path(out) / "df.csv");
  f << "sample_id,label,latent_domain,held_out";
  for (std::size_t j = 0; j < df.front().size(); ++j) f << ",f" << j;
  f << '\n';
  f.precision(9);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& s = ds.samples[i];
    f << i << ',' << s.label << ',' << s.latent_domain << ',' << (s.held_out ? 1 : 0);
    for (double v : df[i]) f << ',' << v;
    f << '\n';
  }
  std::ofstream(fs::path(out) / "manifest.json") << prov.dump(1) << '\n';
  std::printf("wrote %zu x %zu domain features to %s\n", df.size(), df.front().size(),
              (fs::path(out) / "df.csv").string().c_str());
  return 0;
}

json mmd_json(const DomainMmdReport& r) {
  json pair = json::array();
  for (const auto& row : r.pair) {
    json jr = json::array();
    for (double v : row) jr.push_back(std::isfinite(v) ? json(v) : json(nullptr));
    pair.push_back(jr);
  }
  return {{"domains", r.domains},
          {"pair", pair},
          {"mean_off_diagonal", std::isfinite(r.mean_off_diagonal) ? json(r.mean_off_diagonal) : json(nullptr)}};
}

int cmd_mmd_report(const std::string& data, const std::string& ckpt, const std::string& labels_csv, int epoch,
                   std::size_t cap, std::uint64_t seed, const std::string& out) {
  const auto ds = load_dataset(data);
  json prov{{"command", "analyze mmd-report"}, {"version", kVersion}, {"data", data}, {"cap", cap}};
  const auto [ext, eps] = pick_extractor(ckpt, seed, prov);

  std::vector<std::size_t> idx;
  std::vector<int> pseudo;
  if (!labels_csv.empty()) {
    const auto rows = read_csv(labels_csv);
    if (rows.empty()) throw LoadError(labels_csv + " has no rows");
    if (epoch <= 0) epoch = std::stoi(rows.back().at("epoch"));
    for (const auto& r : rows)
      if (std::stoi(r.at("epoch")) == epoch) {
        const auto id = std::stoull(r.at("sample_id"));
        if (id >= ds.samples.size()) throw LoadError("sample_id " + r.at("sample_id") + " outside the dataset");
        idx.push_back(id);
        pseudo.push_back(std::stoi(r.at("pseudo_domain")));
      }
    if (idx.empty()) throw ValidationError("no rows for epoch " + std::to_string(epoch) + " in " + labels_csv);
    prov["labels"] = labels_csv;
    prov["epoch"] = epoch;
  } else {
    idx = ds.indices(false);
  }
  Matrix<double> emb;
  extract_domain_features(ext, eps, ds, idx, true, &emb);
  std::vector<int> gt;
  for (auto i : idx) gt.push_back(ds.samples[i].latent_domain);

  json report;
  const auto r_gt = inter_domain_mmd(emb, gt, cap, seed);
  report["ground_truth"] = mmd_json(r_gt);
  std::printf("ground-truth domains: mean pairwise MMD %.5f\n", r_gt.mean_off_diagonal);
  if (!pseudo.empty()) {
    const auto r_ps = inter_domain_mmd(emb, pseudo, cap, seed);
    report["pseudo"] = mmd_json(r_ps);
    std::printf("pseudo domains (epoch %d): mean pairwise MMD %.5f\n", epoch, r_ps.mean_off_diagonal);
  }
  fs::create_directories(out);
  std::ofstream(fs::path(out) / "mmd_report.json") << report.dump(1) << '\n';
  std::ofstream(fs::path(out) / "manifest.json") << prov.dump(1) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"D2AM: latent-domain meta-learning for face anti-spoofing (desk scale)", "d2am"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  DataArgs data;
  HyperArgs hyper;
  std::string out, ckpt;
  std::optional<std::uint64_t> seed;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset directory");
  data.attach(synth, true);
  synth->add_option("--seed", seed, "Dataset seed (overrides the spec)");
  synth->add_option("--out", out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train on the source domains and evaluate on the held-out one");
  data.attach(train, true);
  hyper.attach(train);
  train->add_option("--out", out, "Run directory")->required();

  std::optional<double> threshold;
  auto* eval = app.add_subcommand("eval", "Score the held-out domain of a dataset with a checkpoint");
  eval->add_option("--ckpt", ckpt, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--data", data.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--threshold", threshold, "Decision threshold (default: the checkpoint's validation EER)");
  eval->add_option("--out", out, "Output directory (default: <ckpt>/eval)");

  std::vector<std::string> variants{"full"};
  auto* ablate = app.add_subcommand("ablate", "Train one or more ablation variants");
  data.attach(ablate, true);
  hyper.attach(ablate);
  ablate->add_option("--variant", variants, "full|gt_domains|wo_domains|wo_select|wo_lp|wo_mmd|erm (repeatable)");
  ablate->add_option("--out", out, "Root directory; each run goes to <variant>_seed<seed>")->required();

  auto* analyze = app.add_subcommand("analyze", "Diagnostics over runs and datasets");
  analyze->require_subcommand(1);
  std::string run, labels;
  int epoch = 0;
  std::size_t cap = 200;
  std::uint64_t ref_seed = 0;
  bool all_channels = false;

  auto* clusters = analyze->add_subcommand("clusters", "Summarise clusters.csv of a run");
  clusters->add_option("--run", run, "Run directory")->required()->check(CLI::ExistingDirectory);
  clusters->add_option("--out", out, "Output directory (default: the run)");

  auto* export_df = analyze->add_subcommand("export-df", "Write per-sample domain features to df.csv");
  export_df->add_option("--data", data.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  export_df->add_option("--ckpt", ckpt, "Checkpoint (default: frozen reference extractor)");
  export_df->add_option("--seed", ref_seed, "Reference extractor seed");
  export_df->add_flag("--all-channels", all_channels, "Use every channel of F- instead of the selected half");
  export_df->add_option("--out", out, "Output directory")->required();

  auto* mmd = analyze->add_subcommand("mmd-report", "Pairwise inter-domain MMD of embeddings");
  mmd->add_option("--data", data.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  mmd->add_option("--ckpt", ckpt, "Checkpoint (default: frozen reference extractor)");
  mmd->add_option("--labels", labels, "cluster_labels.csv from a run, for pseudo-domain MMD")->check(CLI::ExistingFile);
  mmd->add_option("--epoch", epoch, "Epoch of --labels to use (default: last)");
  mmd->add_option("--cap", cap, "Max samples per domain");
  mmd->add_option("--seed", ref_seed, "Subsampling and reference extractor seed");
  mmd->add_option("--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*synth) return cmd_synth(data, seed, out);
    if (*train) return cmd_train(data, hyper, out);
    if (*eval) return cmd_eval(ckpt, data.data, out, threshold);
    if (*ablate) return cmd_ablate(data, hyper, variants, out);
    if (*clusters) return cmd_clusters(run, out);
    if (*export_df) return cmd_export_df(data.data, ckpt, ref_seed, all_channels, out);
    if (*mmd) return cmd_mmd_report(data.data, ckpt, labels, epoch, cap, ref_seed, out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
