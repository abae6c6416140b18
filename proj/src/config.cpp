#include "forceworld/config.hpp"

#include "forceworld/errors.hpp"
#include "forceworld/util.hpp"

namespace forceworld {

using nlohmann::json;

void RunConfig::validate() const {
  world.validate();
  net.validate();
  flow.validate();
  train.validate();
  if (world.height != net.height || world.width != net.width) {
    throw ConfigError("world and net resolutions differ");
  }
}

void to_json(json& j, const RunConfig& cfg) {
  j = json{{"world", cfg.world}, {"net", cfg.net}, {"flow", cfg.flow}, {"train", cfg.train}};
}

void from_json(const json& j, RunConfig& cfg) {
  cfg = RunConfig{};
  for (const auto& [key, value] : j.items()) {
    if (key != "world" && key != "net" && key != "flow" && key != "train") {
      throw ConfigError("unknown config section '" + key + "'");
    }
  }
  if (j.contains("world")) cfg.world = j.at("world").get<world::WorldConfig>();
  if (j.contains("net")) cfg.net = j.at("net").get<net::NetConfig>();
  if (j.contains("flow")) cfg.flow = j.at("flow").get<flow::FlowMatchConfig>();
  if (j.contains("train")) cfg.train = j.at("train").get<train::TrainConfig>();
}

std::string run_fingerprint(const RunConfig& cfg, const std::string& dataset_fingerprint) {
  return util::hex64(util::fnv1a(json{{"run", cfg}, {"dataset", dataset_fingerprint}}.dump()));
}

RunConfig load_run_config(const std::filesystem::path& path) {
  RunConfig cfg;
  try {
    cfg = json::parse(util::read_text(path)).get<RunConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  cfg.validate();
  return cfg;
}

}  // namespace forceworld
