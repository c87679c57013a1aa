#pragma once

// On-disk dataset layout (all blobs little-endian, densely packed, no header):
//
//   manifest.json  format/version, spec, shapes, per-sample metadata
//   images.f32     N x H x W x 6 float32; sample i starts at byte i*H*W*6*4
//   depth.f32      N x Dh x Dw float32;  sample i starts at byte i*Dh*Dw*4
//   labels.u8      N bytes, task label per sample (0 spoof, 1 live)
//
// Unknown manifest keys are ignored on load.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "d2am/data_synth.hpp"
#include "d2am/error.hpp"

namespace d2am {

using json = nlohmann::json;

inline json style_to_json(const DomainStyle& s) {
  return {{"hue_shift", s.hue_shift},
          {"brightness_gain", s.brightness_gain},
          {"background_frequency", to_string(s.background_frequency)},
          {"noise_sigma", s.noise_sigma},
          {"cue_frequency", s.cue_frequency},
          {"cue_amplitude", s.cue_amplitude}};
}

inline DomainStyle style_from_json(const json& j) {
  DomainStyle s;
  s.hue_shift = j.value("hue_shift", s.hue_shift);
  s.brightness_gain = j.value("brightness_gain", s.brightness_gain);
  s.background_frequency = background_from_string(j.value("background_frequency", std::string("low")));
  s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
  s.cue_frequency = j.value("cue_frequency", s.cue_frequency);
  s.cue_amplitude = j.value("cue_amplitude", s.cue_amplitude);
  return s;
}

inline json spec_to_json(const DatasetSpec& spec) {
  json j;
  j["num_latent_domains"] = spec.num_latent_domains;
  j["samples_per_domain"] = spec.samples_per_domain;
  j["image_size"] = {spec.image_height, spec.image_width};
  j["depth_size"] = {spec.depth_height, spec.depth_width};
  j["held_out_samples_per_domain"] = spec.held_out_samples_per_domain;
  j["hue_jitter"] = spec.hue_jitter;
  j["gain_jitter"] = spec.gain_jitter;
  j["seed"] = spec.seed;
  j["domain_styles"] = json::array();
  for (const auto& s : spec.domain_styles) j["domain_styles"].push_back(style_to_json(s));
  j["held_out_domain_styles"] = json::array();
  for (const auto& s : spec.held_out_domain_styles) j["held_out_domain_styles"].push_back(style_to_json(s));
  return j;
}

// Missing keys fall back to the default desk spec.
inline DatasetSpec spec_from_json(const json& j) {
  DatasetSpec spec = default_dataset_spec();
  try {
    spec.num_latent_domains = j.value("num_latent_domains", spec.num_latent_domains);
    spec.samples_per_domain = j.value("samples_per_domain", spec.samples_per_domain);
    if (j.contains("image_size")) {
      spec.image_height = j["image_size"].at(0).get<int>();
      spec.image_width = j["image_size"].at(1).get<int>();
    }
    if (j.contains("depth_size")) {
      spec.depth_height = j["depth_size"].at(0).get<int>();
      spec.depth_width = j["depth_size"].at(1).get<int>();
    }
    spec.held_out_samples_per_domain = j.value("held_out_samples_per_domain", spec.held_out_samples_per_domain);
    spec.hue_jitter = j.value("hue_jitter", spec.hue_jitter);
    spec.gain_jitter = j.value("gain_jitter", spec.gain_jitter);
    spec.seed = j.value("seed", spec.seed);
    if (j.contains("domain_styles")) {
      spec.domain_styles.clear();
      for (const auto& s : j["domain_styles"]) spec.domain_styles.push_back(style_from_json(s));
    }
    if (j.contains("held_out_domain_styles")) {
      spec.held_out_domain_styles.clear();
      for (const auto& s : j["held_out_domain_styles"]) spec.held_out_domain_styles.push_back(style_from_json(s));
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("DatasetSpec: malformed JSON field: ") + e.what());
  }
  return spec;
}

inline DatasetSpec load_spec_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open spec file " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ValidationError("spec file " + path.string() + ": " + e.what());
  }
  return spec_from_json(j);
}

namespace io {

inline void write_f32(std::ofstream& out, const std::vector<float>& v) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
  } else {
    for (float f : v) {
      auto u = std::bit_cast<std::uint32_t>(f);
      u = (u >> 24) | ((u >> 8) & 0xff00u) | ((u << 8) & 0xff0000u) | (u << 24);
      out.write(reinterpret_cast<const char*>(&u), 4);
    }
  }
}

inline void read_f32(const char* bytes, std::size_t count, float* dst) {
  std::memcpy(dst, bytes, count * sizeof(float));
  if constexpr (std::endian::native != std::endian::little) {
    for (std::size_t i = 0; i < count; ++i) {
      auto u = std::bit_cast<std::uint32_t>(dst[i]);
      u = (u >> 24) | ((u >> 8) & 0xff00u) | ((u << 8) & 0xff0000u) | (u << 24);
      dst[i] = std::bit_cast<float>(u);
    }
  }
}

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

// Throws LoadError naming the first sample whose bytes are missing.
inline void check_blob_size(const std::string& name, std::size_t actual, std::size_t per_sample, std::size_t n) {
  const std::size_t expected = per_sample * n;
  if (actual == expected) return;
  std::string msg = name + ": expected " + std::to_string(expected) + " bytes, got " + std::to_string(actual);
  if (actual < expected && per_sample > 0) msg += " (sample " + std::to_string(actual / per_sample) + " incomplete)";
  throw LoadError(msg);
}

}  // namespace io

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::size_t n = ds.samples.size();
  json manifest;
  manifest["format"] = "d2am-dataset";
  manifest["version"] = 1;
  manifest["spec"] = spec_to_json(ds.spec);
  manifest["image"] = {{"height", ds.height}, {"width", ds.width}, {"channels", Dataset::kChannels}};
  manifest["depth"] = {{"height", ds.depth_height}, {"width", ds.depth_width}};
  manifest["num_samples"] = n;
  manifest["blobs"] = {
      {"images.f32", {{"dtype", "f32le"}, {"shape", {n, ds.height, ds.width, Dataset::kChannels}}}},
      {"depth.f32", {{"dtype", "f32le"}, {"shape", {n, ds.depth_height, ds.depth_width}}}},
      {"labels.u8", {{"dtype", "u8"}, {"shape", {n}}}}};
  json samples = json::array();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = ds.samples[i];
    samples.push_back({{"id", i},
                       {"label", s.label},
                       {"latent_domain", s.latent_domain},
                       {"pseudo_domain", s.pseudo_domain},
                       {"held_out", s.held_out}});
  }
  manifest["samples"] = std::move(samples);

  std::ofstream images(dir / "images.f32", std::ios::binary);
  std::ofstream depth(dir / "depth.f32", std::ios::binary);
  std::ofstream labels(dir / "labels.u8", std::ios::binary);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = ds.samples[i];
    require(s.image.size() == ds.image_size() && s.depth.size() == ds.depth_size(),
            "save_dataset: sample " + std::to_string(i) + " has inconsistent tensor sizes");
    io::write_f32(images, s.image);
    io::write_f32(depth, s.depth);
    const auto lab = static_cast<std::uint8_t>(s.label);
    labels.write(reinterpret_cast<const char*>(&lab), 1);
  }
  std::ofstream(dir / "manifest.json") << manifest.dump(1) << '\n';
  if (!images || !depth || !labels) throw LoadError("save_dataset: write failed under " + dir.string());
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  json manifest;
  {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw LoadError("cannot open " + (dir / "manifest.json").string());
    try {
      in >> manifest;
    } catch (const json::exception& e) {
      throw LoadError("manifest.json: " + std::string(e.what()));
    }
  }
  Dataset ds;
  std::size_t n = 0;
  try {
    if (manifest.value("format", std::string()) != "d2am-dataset") throw LoadError("manifest.json: not a d2am dataset");
    ds.spec = spec_from_json(manifest.at("spec"));
    ds.height = manifest.at("image").at("height").get<int>();
    ds.width = manifest.at("image").at("width").get<int>();
    ds.depth_height = manifest.at("depth").at("height").get<int>();
    ds.depth_width = manifest.at("depth").at("width").get<int>();
    n = manifest.at("num_samples").get<std::size_t>();
    if (manifest.at("samples").size() != n)
      throw LoadError("manifest.json: num_samples=" + std::to_string(n) + " but " +
                      std::to_string(manifest.at("samples").size()) + " sample records");
  } catch (const json::exception& e) {
    throw LoadError("manifest.json: " + std::string(e.what()));
  }

  const auto images = io::read_file(dir / "images.f32");
  const auto depth = io::read_file(dir / "depth.f32");
  const auto labels = io::read_file(dir / "labels.u8");
  io::check_blob_size("images.f32", images.size(), ds.image_size() * sizeof(float), n);
  io::check_blob_size("depth.f32", depth.size(), ds.depth_size() * sizeof(float), n);
  io::check_blob_size("labels.u8", labels.size(), 1, n);

  ds.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& s = ds.samples[i];
    const json& meta = manifest["samples"][i];
    try {
      s.latent_domain = meta.at("latent_domain").get<int>();
      s.pseudo_domain = meta.value("pseudo_domain", 0);
      s.held_out = meta.value("held_out", false);
      if (meta.contains("label") && meta["label"].get<int>() != static_cast<int>(labels[i]))
        throw LoadError("sample " + std::to_string(i) + ": label in manifest disagrees with labels.u8");
    } catch (const json::exception& e) {
      throw LoadError("sample " + std::to_string(i) + ": " + e.what());
    }
    s.label = static_cast<std::uint8_t>(labels[i]);
    if (s.label != 0 && s.label != 1)
      throw LoadError("sample " + std::to_string(i) + ": label " + std::to_string(s.label) + " not in {0,1}");
    s.image.resize(ds.image_size());
    s.depth.resize(ds.depth_size());
    io::read_f32(images.data() + i * ds.image_size() * sizeof(float), ds.image_size(), s.image.data());
    io::read_f32(depth.data() + i * ds.depth_size() * sizeof(float), ds.depth_size(), s.depth.data());
  }
  return ds;
}

}  // namespace d2am
