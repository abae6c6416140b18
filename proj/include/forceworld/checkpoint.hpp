#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "forceworld/flow_matching.hpp"
#include "forceworld/net.hpp"
#include "json.hpp"

namespace forceworld::ckpt {

inline constexpr const char* kCodeVersion = "forceworld-0.3.0";

using NamedTensors = std::vector<std::pair<std::string, torch::Tensor>>;

/// Binary archive: 8-byte magic, u64 header length, JSON header describing
/// each tensor (name, dtype, shape, offset, nbytes), then raw little-endian
/// tensor bytes in header order. Written atomically.
void write_archive(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors read_archive(const std::filesystem::path& path);

/// Sidecar JSON lives next to the archive as <archive>.json.
std::filesystem::path sidecar_path(const std::filesystem::path& archive);

/// Parameters under "model/<name>", buffers under "buffer/<name>".
NamedTensors model_tensors(const torch::nn::Module& module);
/// Copy "model/" and "buffer/" entries into the module; every module tensor must be present.
void load_model_tensors(torch::nn::Module& module, const NamedTensors& tensors);

/// Inference-side view of a checkpoint.
struct ModelBundle {
  net::NetConfig net_cfg;
  flow::FlowMatchConfig flow_cfg;
  net::VectorFieldRegressor net{nullptr};
  nlohmann::json sidecar;
  /// Hash of archive bytes and sidecar text.
  std::string fingerprint;
};

ModelBundle load_model(const std::filesystem::path& archive);

/// Save an inference-only checkpoint (no optimizer state).
void save_model(const std::filesystem::path& archive, net::VectorFieldRegressor& net,
                const flow::FlowMatchConfig& flow_cfg, nlohmann::json extra_sidecar = nlohmann::json::object());

std::string file_fingerprint(const std::filesystem::path& archive);

}  // namespace forceworld::ckpt
