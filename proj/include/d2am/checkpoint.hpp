#pragma once

// A checkpoint is a directory:
//
//   manifest.json          format/version, epoch, seed, model config, hyperparameters,
//                          validation EER threshold, and one entry per tensor
//                          {name, shape, file}
//   <tensor name>.f32      flat little-endian float32, row-major in the listed shape
//
// Round trips are bit-exact.

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "d2am/config.hpp"
#include "d2am/dataset_io.hpp"
#include "d2am/error.hpp"
#include "d2am/model.hpp"

namespace d2am {

struct Checkpoint {
  ModelConfig model;
  HyperParams hyper;
  ModelParams<float> params;
  int epoch = 0;
  std::optional<double> eer_threshold;
};

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json m;
  m["format"] = "d2am-checkpoint";
  m["version"] = 1;
  m["epoch"] = ck.epoch;
  m["seed"] = ck.hyper.seed;
  m["model"] = model_config_to_json(ck.model);
  m["hyper"] = hyper_to_json(ck.hyper);
  if (ck.eer_threshold) {
    // Stored as its exact bit pattern as well, since JSON decimals are not guaranteed exact.
    m["eer_threshold"] = *ck.eer_threshold;
    m["eer_threshold_bits"] = std::bit_cast<std::uint64_t>(*ck.eer_threshold);
  }
  m["tensors"] = nlohmann::json::array();
  for (const auto& [name, p] : list_params(ck.params)) {
    const std::string file = name + ".f32";
    std::ofstream out(dir / file, std::ios::binary);
    io::write_f32(out, p->value);
    if (!out) throw LoadError("save_checkpoint: cannot write " + (dir / file).string());
    m["tensors"].push_back({{"name", name}, {"shape", p->shape}, {"file", file}});
  }
  std::ofstream(dir / "manifest.json") << m.dump(1) << '\n';
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  nlohmann::json m;
  {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw LoadError("cannot open checkpoint manifest " + (dir / "manifest.json").string());
    try {
      in >> m;
    } catch (const nlohmann::json::exception& e) {
      throw LoadError("checkpoint manifest: " + std::string(e.what()));
    }
  }
  if (m.value("format", std::string()) != "d2am-checkpoint") throw LoadError(dir.string() + " is not a d2am checkpoint");
  Checkpoint ck;
  try {
    ck.epoch = m.at("epoch").get<int>();
    ck.model = model_config_from_json(m.at("model"));
    ck.hyper = hyper_from_json(m.at("hyper"));
    if (m.contains("eer_threshold_bits"))
      ck.eer_threshold = std::bit_cast<double>(m["eer_threshold_bits"].get<std::uint64_t>());
    else if (m.contains("eer_threshold"))
      ck.eer_threshold = m["eer_threshold"].get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("checkpoint manifest: " + std::string(e.what()));
  }
  ck.params = init_model_params<float>(ck.model, 0);
  std::map<std::string, nlohmann::json> entries;
  for (const auto& t : m.at("tensors")) entries[t.at("name").get<std::string>()] = t;
  for (auto& [name, p] : list_params(ck.params)) {
    const auto it = entries.find(name);
    if (it == entries.end()) throw LoadError("checkpoint: missing tensor " + name);
    if (it->second.at("shape").get<std::vector<int>>() != p->shape)
      throw LoadError("checkpoint: tensor " + name + " has a shape that does not match the model config");
    const auto bytes = io::read_file(dir / it->second.at("file").get<std::string>());
    if (bytes.size() != p->size() * sizeof(float))
      throw LoadError("checkpoint: " + name + ": expected " + std::to_string(p->size() * sizeof(float)) +
                      " bytes, got " + std::to_string(bytes.size()));
    io::read_f32(bytes.data(), p->size(), p->data());
  }
  return ck;
}

}  // namespace d2am
