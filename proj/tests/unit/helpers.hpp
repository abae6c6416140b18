#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <random>
#include <string>

#include "forceworld/net.hpp"

namespace fwtest {

// Small enough for fast CPU tests, still wired with long skips and two cross blocks.
inline forceworld::net::NetConfig tiny_net_config() {
  forceworld::net::NetConfig c;
  c.height = 16;
  c.width = 16;
  c.patch_size = 4;
  c.token_dim = 32;
  c.n_blocks = 4;
  c.n_heads = 2;
  c.mlp_ratio = 2;
  c.max_temporal_offset = 8;
  return c;
}

class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("fwtest_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace fwtest
