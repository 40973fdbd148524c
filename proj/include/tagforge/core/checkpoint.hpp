#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tagforge/core/error.hpp"
#include "tagforge/core/tensor.hpp"

namespace tagforge {

/// Checkpoint layout: a directory holding manifest.json plus one raw
/// little-endian float32 file per tensor, named "<tensor name>.f32". The
/// manifest records format tag, step count, the run config, and each tensor's
/// shape. Writing is deterministic: equal state produces byte-identical files.
inline constexpr const char* kCheckpointFormat = "tagforge-checkpoint-v1";

struct CheckpointData {
  std::uint64_t step_count = 0;
  nlohmann::json config;
  std::map<std::string, std::pair<Shape, std::vector<float>>> tensors;
};

template <typename T>
void save_checkpoint(const std::string& dir,
                     const std::vector<std::pair<std::string, Tensor<T>*>>& tensors,
                     std::uint64_t step_count, const nlohmann::json& config) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir))
    throw IoError("save_checkpoint: cannot create directory " + dir);

  nlohmann::json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["step_count"] = step_count;
  manifest["config"] = config;
  nlohmann::json tj;
  for (const auto& [name, tensor] : tensors) {
    check(tensor != nullptr && !tensor->empty(), "save_checkpoint: null tensor " + name);
    tj[name] = {{"shape", tensor->shape()}, {"file", name + ".f32"}};
    std::vector<float> buf(tensor->size());
    const T* p = tensor->data();
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = float(p[i]);
    std::ofstream f(fs::path(dir) / (name + ".f32"), std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("save_checkpoint: cannot write tensor " + name);
    f.write(reinterpret_cast<const char*>(buf.data()),
            std::streamsize(buf.size() * sizeof(float)));
    if (!f) throw IoError("save_checkpoint: short write for tensor " + name);
  }
  manifest["tensors"] = std::move(tj);
  std::ofstream mf(fs::path(dir) / "manifest.json", std::ios::trunc);
  if (!mf) throw IoError("save_checkpoint: cannot write manifest");
  mf << manifest.dump(2) << "\n";
}

inline CheckpointData load_checkpoint(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw IoError("load_checkpoint: no manifest in " + dir);
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("load_checkpoint: bad manifest: ") + e.what());
  }
  if (manifest.value("format", "") != kCheckpointFormat)
    throw IoError("load_checkpoint: unknown format tag");

  CheckpointData data;
  data.step_count = manifest.value("step_count", std::uint64_t(0));
  if (manifest.contains("config")) data.config = manifest["config"];
  for (const auto& [name, meta] : manifest.at("tensors").items()) {
    Shape shape = meta.at("shape").get<Shape>();
    const std::string file = meta.at("file").get<std::string>();
    std::ifstream f(fs::path(dir) / file, std::ios::binary);
    if (!f) throw IoError("load_checkpoint: missing tensor file " + file);
    std::vector<float> buf(shape_numel(shape));
    f.read(reinterpret_cast<char*>(buf.data()),
           std::streamsize(buf.size() * sizeof(float)));
    if (std::size_t(f.gcount()) != buf.size() * sizeof(float))
      throw IoError("load_checkpoint: short read for tensor " + name);
    data.tensors.emplace(name, std::make_pair(std::move(shape), std::move(buf)));
  }
  return data;
}

/// Copies checkpoint values into live tensors, matching by name and
/// validating shapes. Every requested tensor must be present.
template <typename T>
void load_into(const CheckpointData& data,
               const std::vector<std::pair<std::string, Tensor<T>*>>& tensors) {
  for (const auto& [name, tensor] : tensors) {
    auto it = data.tensors.find(name);
    if (it == data.tensors.end())
      throw IoError("checkpoint: missing tensor " + name);
    check(tensor != nullptr, "load_into: null tensor " + name);
    if (it->second.first != tensor->shape())
      throw IoError("checkpoint: shape mismatch for " + name);
    T* p = tensor->data();
    const std::vector<float>& buf = it->second.second;
    for (std::size_t i = 0; i < buf.size(); ++i) p[i] = T(buf[i]);
  }
}

}  // namespace tagforge
