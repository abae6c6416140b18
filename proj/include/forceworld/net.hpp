#pragma once

#include <torch/nn/module.h>
#include <torch/nn/modules/container/modulelist.h>
#include <torch/nn/modules/embedding.h>
#include <torch/nn/modules/linear.h>
#include <torch/nn/modules/normalization.h>

#include <optional>
#include <vector>

#include "forceworld/control.hpp"
#include "json.hpp"

namespace forceworld::net {

struct NetConfig {
  int frame_channels = 3;
  int height = 32;
  int width = 32;
  int patch_size = 4;
  int token_dim = 128;
  /// Even; block k and block n_blocks-1-k are joined by a long skip.
  int n_blocks = 6;
  int n_heads = 4;
  int mlp_ratio = 4;
  /// Blocks whose self-attention is replaced by cross-attention to control
  /// tokens. Empty means the middle two blocks.
  std::vector<int> cross_attn_blocks;
  /// Largest frame offset between target and context; index 0 of the offset
  /// table is reserved for "no context".
  int max_temporal_offset = 16;
  int control_grid = control::kDefaultGridSize;
  int control_blocks = 5;
  bool long_skips = true;

  void validate() const;
  std::vector<int> resolved_cross_blocks() const;
  int grid_h() const { return height / patch_size; }
  int grid_w() const { return width / patch_size; }
  int n_visual_tokens() const { return grid_h() * grid_w(); }
  int n_control_tokens() const { return control_grid * control_grid; }
  control::ControlEncoderConfig encoder_config() const;
};

void to_json(nlohmann::json& j, const NetConfig& cfg);
void from_json(const nlohmann::json& j, NetConfig& cfg);

/// Cross-attention weights captured from the last cross-attention layer, one
/// entry per forward call: (B, heads, n_queries, n_control_tokens). Query 0 is
/// the time token; queries 1.. are visual tokens in row-major patch order.
struct AttentionCapture {
  std::vector<torch::Tensor> weights;
};

enum class AttentionQuery {
  /// Attention that every visual token pays to the control token at the
  /// pixel: a map over the visual-token grid (the image).
  kControlToken,
  /// Attention row of the visual token at the pixel, over the control grid.
  kVisualToken,
};

struct AttentionMap {
  int grid_h = 0;
  int grid_w = 0;
  /// (grid_h, grid_w) float64, sums to 1.
  torch::Tensor weights;
};

/// Average the captured attention at `pixel` over heads and recorded steps,
/// then renormalize. Throws StateError when nothing was captured.
AttentionMap extract_cross_attention(const AttentionCapture& capture, const NetConfig& cfg, int i, int j,
                                     AttentionQuery query = AttentionQuery::kControlToken);

/// Sinusoidal features of t in [0, 1], width `dim`.
torch::Tensor timestep_features(const torch::Tensor& t, int dim);

class AttentionImpl : public torch::nn::Module {
 public:
  AttentionImpl(int dim, int n_heads, bool cross);
  /// Self-attention when `context` is undefined; otherwise x queries context.
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context, torch::Tensor* weights_out);

 private:
  int n_heads_;
  bool cross_;
  torch::nn::Linear q_{nullptr}, kv_{nullptr}, qkv_{nullptr}, proj_{nullptr};
};
TORCH_MODULE(Attention);

class BlockImpl : public torch::nn::Module {
 public:
  BlockImpl(int dim, int n_heads, int mlp_ratio, bool cross, bool has_skip);
  torch::Tensor forward(torch::Tensor x, const torch::Tensor& skip, const torch::Tensor& ctrl,
                        torch::Tensor* weights_out);
  bool is_cross() const { return cross_; }
  bool has_skip() const { return !skip_proj_.is_empty(); }

 private:
  bool cross_;
  torch::nn::LayerNorm norm1_{nullptr}, norm2_{nullptr};
  Attention attn_{nullptr};
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr}, skip_proj_{nullptr};
};
TORCH_MODULE(Block);

/// Conditional vector field v_t(x | x_ref, x_ctx, dt_ctx, controls).
class VectorFieldRegressorImpl : public torch::nn::Module {
 public:
  explicit VectorFieldRegressorImpl(NetConfig cfg);

  /// All frame tensors are (B, C, H, W) frame codes; dt_ctx (B) int64 in
  /// [0, max_temporal_offset]; t (B) in [0, 1]; ctrl_tokens (B, G^2, token_dim).
  torch::Tensor forward(const torch::Tensor& x_noisy, const torch::Tensor& x_ref, const torch::Tensor& x_ctx,
                        const torch::Tensor& dt_ctx, const torch::Tensor& t, const torch::Tensor& ctrl_tokens,
                        AttentionCapture* capture = nullptr);

  /// Encode (B, 3, H, W) control rasters into control tokens.
  torch::Tensor encode_controls(const torch::Tensor& raster);

  /// Number of long skip connections wired in forward.
  int n_skip_connections() const;

  const NetConfig& config() const { return cfg_; }
  control::ControlEncoder& encoder() { return encoder_; }
  torch::nn::Linear& output_head() { return head_; }

 private:
  torch::Tensor patchify(const torch::Tensor& x) const;
  torch::Tensor unpatchify(const torch::Tensor& tokens) const;

  NetConfig cfg_;
  control::ControlEncoder encoder_{nullptr};
  torch::nn::Linear patch_embed_{nullptr};
  torch::Tensor pos_embed_;
  torch::nn::Embedding offset_embed_{nullptr};
  torch::nn::Linear time_fc1_{nullptr}, time_fc2_{nullptr};
  torch::nn::ModuleList blocks_;
  torch::nn::LayerNorm final_norm_{nullptr};
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(VectorFieldRegressor);

/// Identity frame codec: pixel frames in [0, 1] map affinely to codes in [-1, 1].
struct FrameCodec {
  static torch::Tensor encode(const torch::Tensor& frames) { return frames * 2.0 - 1.0; }
  static torch::Tensor decode(const torch::Tensor& codes) { return ((codes + 1.0) * 0.5).clamp(0.0, 1.0); }
};

}  // namespace forceworld::net
