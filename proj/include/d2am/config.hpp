#pragma once

// Training hyperparameters and the key/value config format shared by the CLI,
// checkpoints and run manifests.
//
// Config files are TOML-flavoured: one `key = value` per line, `#` starts a
// comment, strings may be quoted, and a `[section]` header prefixes the keys
// that follow with "section.". Unknown keys are rejected.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "d2am/domain_repr.hpp"
#include "d2am/error.hpp"
#include "d2am/model.hpp"

namespace d2am {

// Where the per-epoch domain labels come from.
enum class DomainMode {
  clustered,     // D2AM: reference extractor at epoch 1, model features afterwards
  ground_truth,  // latent domain labels of the generator
  random,        // uniform random labels, redrawn every epoch
};

inline std::string to_string(DomainMode m) {
  switch (m) {
    case DomainMode::clustered: return "clustered";
    case DomainMode::ground_truth: return "ground_truth";
    case DomainMode::random: return "random";
  }
  return "clustered";
}

inline DomainMode domain_mode_from_string(const std::string& s) {
  if (s == "clustered") return DomainMode::clustered;
  if (s == "ground_truth") return DomainMode::ground_truth;
  if (s == "random") return DomainMode::random;
  throw ValidationError("domains: expected clustered|ground_truth|random, got '" + s + "'");
}

inline std::string to_string(EntropyForm f) { return f == EntropyForm::symmetric ? "symmetric" : "literal"; }

inline EntropyForm entropy_form_from_string(const std::string& s) {
  if (s == "symmetric") return EntropyForm::symmetric;
  if (s == "literal") return EntropyForm::literal;
  throw ValidationError("entropy_form: expected symmetric|literal, got '" + s + "'");
}

struct HyperParams {
  double alpha = 1e-3;     // inner (meta-train) SGD rate
  double beta = 1e-4;      // outer Adam rate
  double lambda_p = 0.1;   // domain enhancement entropy weight
  double lambda_m = 0.05;  // MMD-to-prior weight
  int k = 3;               // pseudo domains
  int batch_size = 8;      // per domain batch
  int epochs = 20;
  bool first_order = true;
  double cls_weight = 1.0;
  double depth_weight = 1.0;
  std::uint64_t seed = 0;
  EntropyForm entropy_form = EntropyForm::symmetric;
  double val_fraction = 0.1;  // source samples held back for the EER threshold
  DomainMode domains = DomainMode::clustered;
  bool select_channels = true;  // false: cluster on every F- channel
  bool meta_learning = true;    // false: plain ERM on pooled batches
  int kmeans_restarts = 16;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int diagnostics_cap = 200;  // samples per domain for inter-domain MMD (0 = all)

  void validate() const {
    auto fail = [](const std::string& key, const std::string& why) {
      throw ValidationError("HyperParams." + key + ": " + why);
    };
    if (!(alpha > 0.0)) fail("alpha", "must be > 0");
    if (!(beta >= 0.0)) fail("beta", "must be >= 0");
    if (!(lambda_p >= 0.0)) fail("lambda_p", "must be >= 0");
    if (!(lambda_m >= 0.0)) fail("lambda_m", "must be >= 0");
    if (!(cls_weight >= 0.0)) fail("cls_weight", "must be >= 0");
    if (!(depth_weight >= 0.0)) fail("depth_weight", "must be >= 0");
    if (k < 2) fail("k", "must be >= 2");
    if (batch_size < 1) fail("batch_size", "must be >= 1");
    if (epochs < 0) fail("epochs", "must be >= 0");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) fail("val_fraction", "must be in [0,1)");
    if (kmeans_restarts < 1) fail("kmeans_restarts", "must be >= 1");
    if (diagnostics_cap < 0) fail("diagnostics_cap", "must be >= 0");
  }
};

// --- key/value access ---------------------------------------------------------------

namespace detail {

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ValidationError(key + ": expected true|false, got '" + v + "'");
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing characters");
    return d;
  } catch (const std::exception&) {
    throw ValidationError(key + ": expected a number, got '" + v + "'");
  }
}

inline long long parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long i = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing characters");
    return i;
  } catch (const std::exception&) {
    throw ValidationError(key + ": expected an integer, got '" + v + "'");
  }
}

inline std::string fmt_double(double d) {
  std::ostringstream os;
  os.precision(17);
  os << d;
  return os.str();
}

struct Field {
  std::function<void(HyperParams&, const std::string&)> set;
  std::function<std::string(const HyperParams&)> get;
};

inline const std::map<std::string, Field>& hyper_fields() {
  static const std::map<std::string, Field> fields = [] {
    std::map<std::string, Field> f;
    auto real = [&f](const std::string& key, double HyperParams::*m) {
      f[key] = {[key, m](HyperParams& h, const std::string& v) { h.*m = parse_double(key, v); },
                [m](const HyperParams& h) { return fmt_double(h.*m); }};
    };
    auto integer = [&f](const std::string& key, int HyperParams::*m) {
      f[key] = {[key, m](HyperParams& h, const std::string& v) { h.*m = static_cast<int>(parse_int(key, v)); },
                [m](const HyperParams& h) { return std::to_string(h.*m); }};
    };
    auto flag = [&f](const std::string& key, bool HyperParams::*m) {
      f[key] = {[key, m](HyperParams& h, const std::string& v) { h.*m = parse_bool(key, v); },
                [m](const HyperParams& h) { return std::string(h.*m ? "true" : "false"); }};
    };
    real("alpha", &HyperParams::alpha);
    real("beta", &HyperParams::beta);
    real("lambda_p", &HyperParams::lambda_p);
    real("lambda_m", &HyperParams::lambda_m);
    integer("k", &HyperParams::k);
    integer("batch_size", &HyperParams::batch_size);
    integer("epochs", &HyperParams::epochs);
    flag("first_order", &HyperParams::first_order);
    real("cls_weight", &HyperParams::cls_weight);
    real("depth_weight", &HyperParams::depth_weight);
    f["seed"] = {[](HyperParams& h, const std::string& v) {
                   h.seed = static_cast<std::uint64_t>(parse_int("seed", v));
                 },
                 [](const HyperParams& h) { return std::to_string(h.seed); }};
    f["entropy_form"] = {[](HyperParams& h, const std::string& v) { h.entropy_form = entropy_form_from_string(v); },
                         [](const HyperParams& h) { return to_string(h.entropy_form); }};
    real("val_fraction", &HyperParams::val_fraction);
    f["domains"] = {[](HyperParams& h, const std::string& v) { h.domains = domain_mode_from_string(v); },
                    [](const HyperParams& h) { return to_string(h.domains); }};
    flag("select_channels", &HyperParams::select_channels);
    flag("meta_learning", &HyperParams::meta_learning);
    integer("kmeans_restarts", &HyperParams::kmeans_restarts);
    real("adam_beta1", &HyperParams::adam_beta1);
    real("adam_beta2", &HyperParams::adam_beta2);
    real("adam_eps", &HyperParams::adam_eps);
    integer("diagnostics_cap", &HyperParams::diagnostics_cap);
    return f;
  }();
  return fields;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

inline std::vector<std::string> hyper_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, f] : detail::hyper_fields()) keys.push_back(k);
  return keys;
}

inline void set_hyper(HyperParams& h, const std::string& key, const std::string& value) {
  const auto& fields = detail::hyper_fields();
  const auto it = fields.find(key);
  if (it == fields.end()) throw ValidationError("unknown config key '" + key + "'");
  it->second.set(h, value);
}

inline std::string get_hyper(const HyperParams& h, const std::string& key) {
  const auto& fields = detail::hyper_fields();
  const auto it = fields.find(key);
  if (it == fields.end()) throw ValidationError("unknown config key '" + key + "'");
  return it->second.get(h);
}

// Applies "key=value" (an override flag) to h.
inline void apply_override(HyperParams& h, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ValidationError("override '" + assignment + "' is not key=value");
  set_hyper(h, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
}

// Parses config text; `[train]` sections are accepted and stripped, since every key
// here belongs to training.
inline HyperParams parse_config(const std::string& text, HyperParams base = {}) {
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line.resize(i);
        break;
      }
    }
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ValidationError("config line " + std::to_string(lineno) + ": bad section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError("config line " + std::to_string(lineno) + ": expected key = value");
    std::string key = detail::trim(line.substr(0, eq));
    std::string value = detail::trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    if (!section.empty() && section != "train") key = section + "." + key;
    try {
      set_hyper(base, key, value);
    } catch (const ValidationError& e) {
      throw ValidationError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

inline HyperParams load_config_file(const std::filesystem::path& path, HyperParams base = {}) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), base);
}

// Every key with its current value, one per line, in a form parse_config accepts.
inline std::string format_config(const HyperParams& h) {
  std::string out;
  for (const auto& key : hyper_keys()) {
    std::string v = get_hyper(h, key);
    if (key == "entropy_form" || key == "domains") v = "\"" + v + "\"";
    out += key + " = " + v + "\n";
  }
  return out;
}

inline nlohmann::json hyper_to_json(const HyperParams& h) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& key : hyper_keys()) j[key] = get_hyper(h, key);
  return j;
}

inline HyperParams hyper_from_json(const nlohmann::json& j) {
  HyperParams h;
  for (const auto& [key, value] : j.items())
    set_hyper(h, key, value.is_string() ? value.get<std::string>() : value.dump());
  return h;
}

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"in_channels", c.in_channels},   {"widths", c.widths},
          {"reduction", c.reduction},       {"adaptation_width", c.adaptation_width},
          {"depth_hidden", c.depth_hidden}, {"depth_size", {c.depth_height, c.depth_width}},
          {"eps", c.eps}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.in_channels = j.value("in_channels", c.in_channels);
  if (j.contains("widths")) c.widths = j["widths"].get<std::array<int, 3>>();
  c.reduction = j.value("reduction", c.reduction);
  c.adaptation_width = j.value("adaptation_width", c.adaptation_width);
  c.depth_hidden = j.value("depth_hidden", c.depth_hidden);
  if (j.contains("depth_size")) {
    c.depth_height = j["depth_size"].at(0).get<int>();
    c.depth_width = j["depth_size"].at(1).get<int>();
  }
  c.eps = j.value("eps", c.eps);
  c.validate();
  return c;
}

}  // namespace d2am
