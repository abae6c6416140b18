#pragma once

#include <torch/nn/module.h>
#include <torch/nn/modules/batchnorm.h>
#include <torch/nn/modules/container/modulelist.h>
#include <torch/nn/modules/linear.h>

#include <cstdint>
#include <vector>

#include "forceworld/rng.hpp"
#include "json.hpp"

namespace forceworld::control {

/// Number of tiles per side of the control grid.
inline constexpr int kDefaultGridSize = 16;

/// One user or sampled control: a pixel (row i, column j) and the displacement
/// (di down, dj right) in pixels it should undergo toward the next frame.
struct ControlPoint {
  int i = 0;
  int j = 0;
  float di = 0.0f;
  float dj = 0.0f;

  friend bool operator==(const ControlPoint&, const ControlPoint&) = default;
};

void to_json(nlohmann::json& j, const ControlPoint& p);
void from_json(const nlohmann::json& j, ControlPoint& p);

struct SparseFlowControl {
  std::vector<ControlPoint> points;
  /// (3, H, W): binary mask, then the masked flow (di, dj).
  torch::Tensor raster;
};

/// Probability table (H, W), float64, proportional to the squared flow
/// magnitude. Uniform when the flow vanishes everywhere.
torch::Tensor flow_sampling_distribution(const torch::Tensor& flow);

/// Draw n_c distinct pixels from flow_sampling_distribution without
/// replacement and read their shifts from `flow` (2, H, W).
SparseFlowControl sample_control_pixels(const torch::Tensor& flow, int n_c, Rng& rng);

/// Rasterize control points into a (3, H, W) float tensor.
torch::Tensor build_sparse_raster(const std::vector<ControlPoint>& points, int height, int width);

SparseFlowControl make_control(std::vector<ControlPoint> points, int height, int width);

/// Standard-normal stand-in for switched-off control tokens.
torch::Tensor noise_control_tokens(at::IntArrayRef shape, Rng& rng);

struct ControlEncoderConfig {
  int grid_size = kDefaultGridSize;
  int tile_h = 2;
  int tile_w = 2;
  int d_ctrl = 256;
  int n_blocks = 5;

  int n_tokens() const { return grid_size * grid_size; }
};

/// Tile-local encoder: the raster is cut into grid_size x grid_size tiles, each
/// tile goes through the same MLP on its own, then a learned per-tile position
/// embedding is added. In eval mode token g depends only on tile g.
class ControlEncoderImpl : public torch::nn::Module {
 public:
  explicit ControlEncoderImpl(ControlEncoderConfig cfg);

  /// raster (B, 3, H, W) -> tokens (B, grid_size^2, d_ctrl).
  torch::Tensor forward(const torch::Tensor& raster);

  const ControlEncoderConfig& config() const { return cfg_; }

 private:
  ControlEncoderConfig cfg_;
  torch::nn::Linear input_proj_{nullptr};
  torch::nn::ModuleList norms_;
  torch::nn::ModuleList linears_;
  torch::Tensor pos_embed_;
};
TORCH_MODULE(ControlEncoder);

}  // namespace forceworld::control
