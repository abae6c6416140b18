#pragma once

#include <filesystem>

#include "forceworld/flow_matching.hpp"
#include "forceworld/net.hpp"
#include "forceworld/trainer.hpp"
#include "forceworld/world.hpp"
#include "json.hpp"

namespace forceworld {

/// Everything a training run depends on. Serialized as one JSON object with
/// optional "world", "net", "flow" and "train" sections.
struct RunConfig {
  world::WorldConfig world = world::WorldConfig::pusher();
  net::NetConfig net;
  flow::FlowMatchConfig flow;
  train::TrainConfig train;

  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& cfg);
void from_json(const nlohmann::json& j, RunConfig& cfg);

/// Stable identity of a training run: hash of the config and the dataset fingerprint.
std::string run_fingerprint(const RunConfig& cfg, const std::string& dataset_fingerprint);

/// Parse and validate a run config file; unknown top-level keys are errors.
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace forceworld
