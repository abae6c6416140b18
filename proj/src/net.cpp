#include "forceworld/net.hpp"

#include <torch/torch.h>

#include <algorithm>
#include <cmath>

#include "forceworld/errors.hpp"

namespace forceworld::net {

void NetConfig::validate() const {
  if (frame_channels < 1) throw ConfigError("frame_channels must be positive");
  if (patch_size < 1 || height % patch_size != 0 || width % patch_size != 0) {
    throw ConfigError("frame size " + std::to_string(height) + "x" + std::to_string(width) +
                      " not divisible by patch_size " + std::to_string(patch_size));
  }
  if (control_grid < 1 || height % control_grid != 0 || width % control_grid != 0) {
    throw ConfigError("frame size not divisible by the control grid " + std::to_string(control_grid));
  }
  if (n_blocks < 2 || n_blocks % 2 != 0) throw ConfigError("n_blocks must be even and >= 2");
  if (n_heads < 1 || token_dim % n_heads != 0) throw ConfigError("token_dim must be divisible by n_heads");
  if (token_dim % 2 != 0) throw ConfigError("token_dim must be even");
  if (mlp_ratio < 1) throw ConfigError("mlp_ratio must be positive");
  if (max_temporal_offset < 1) throw ConfigError("max_temporal_offset must be >= 1");
  if (control_blocks < 1) throw ConfigError("control_blocks must be >= 1");
  const int lo = n_blocks / 4;
  const int hi = n_blocks - n_blocks / 4;
  for (int b : resolved_cross_blocks()) {
    if (b < lo || b >= hi) {
      throw ConfigError("cross-attention block " + std::to_string(b) + " outside the middle half [" +
                        std::to_string(lo) + ", " + std::to_string(hi) + ")");
    }
  }
}

std::vector<int> NetConfig::resolved_cross_blocks() const {
  if (!cross_attn_blocks.empty()) {
    auto out = cross_attn_blocks;
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }
  return {n_blocks / 2 - 1, n_blocks / 2};
}

control::ControlEncoderConfig NetConfig::encoder_config() const {
  control::ControlEncoderConfig enc;
  enc.grid_size = control_grid;
  enc.tile_h = height / control_grid;
  enc.tile_w = width / control_grid;
  enc.d_ctrl = token_dim;
  enc.n_blocks = control_blocks;
  return enc;
}

void to_json(nlohmann::json& j, const NetConfig& cfg) {
  j = nlohmann::json{{"frame_channels", cfg.frame_channels},
                     {"height", cfg.height},
                     {"width", cfg.width},
                     {"patch_size", cfg.patch_size},
                     {"token_dim", cfg.token_dim},
                     {"n_blocks", cfg.n_blocks},
                     {"n_heads", cfg.n_heads},
                     {"mlp_ratio", cfg.mlp_ratio},
                     {"cross_attn_blocks", cfg.resolved_cross_blocks()},
                     {"max_temporal_offset", cfg.max_temporal_offset},
                     {"control_grid", cfg.control_grid},
                     {"control_blocks", cfg.control_blocks},
                     {"long_skips", cfg.long_skips}};
}

void from_json(const nlohmann::json& j, NetConfig& cfg) {
  cfg = NetConfig{};
  cfg.frame_channels = j.value("frame_channels", cfg.frame_channels);
  cfg.height = j.value("height", cfg.height);
  cfg.width = j.value("width", cfg.width);
  cfg.patch_size = j.value("patch_size", cfg.patch_size);
  cfg.token_dim = j.value("token_dim", cfg.token_dim);
  cfg.n_blocks = j.value("n_blocks", cfg.n_blocks);
  cfg.n_heads = j.value("n_heads", cfg.n_heads);
  cfg.mlp_ratio = j.value("mlp_ratio", cfg.mlp_ratio);
  cfg.cross_attn_blocks = j.value("cross_attn_blocks", std::vector<int>{});
  cfg.max_temporal_offset = j.value("max_temporal_offset", cfg.max_temporal_offset);
  cfg.control_grid = j.value("control_grid", cfg.control_grid);
  cfg.control_blocks = j.value("control_blocks", cfg.control_blocks);
  cfg.long_skips = j.value("long_skips", cfg.long_skips);
}

AttentionMap extract_cross_attention(const AttentionCapture& capture, const NetConfig& cfg, int i, int j,
                                     AttentionQuery query) {
  if (capture.weights.empty()) throw StateError("no cross-attention weights were captured");
  if (i < 0 || i >= cfg.height || j < 0 || j >= cfg.width) throw DomainError("query pixel outside the frame");
  AttentionMap map;
  torch::Tensor acc;
  for (const auto& w : capture.weights) {
    // Batch entry 0, mean over heads: (n_queries, n_keys).
    auto per_head = w[0].to(torch::kFloat64).mean(0);
    torch::Tensor slice;
    if (query == AttentionQuery::kVisualToken) {
      const int q = 1 + (i / cfg.patch_size) * cfg.grid_w() + (j / cfg.patch_size);
      slice = per_head[q];
      map.grid_h = cfg.control_grid;
      map.grid_w = cfg.control_grid;
    } else {
      const int tile_h = cfg.height / cfg.control_grid;
      const int tile_w = cfg.width / cfg.control_grid;
      const int k = (i / tile_h) * cfg.control_grid + (j / tile_w);
      slice = per_head.index({torch::indexing::Slice(1), k});
      map.grid_h = cfg.grid_h();
      map.grid_w = cfg.grid_w();
    }
    acc = acc.defined() ? acc + slice : slice.clone();
  }
  acc = acc / static_cast<double>(capture.weights.size());
  const double total = acc.sum().item<double>();
  if (total > 0.0) acc = acc / total;
  map.weights = acc.reshape({map.grid_h, map.grid_w});
  return map;
}

torch::Tensor timestep_features(const torch::Tensor& t, int dim) {
  const int half = dim / 2;
  auto opts = torch::TensorOptions().dtype(t.scalar_type());
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, opts) / half);
  auto args = (t.reshape({-1, 1}) * 1000.0) * freqs.unsqueeze(0);
  return torch::cat({torch::cos(args), torch::sin(args)}, 1);
}

AttentionImpl::AttentionImpl(int dim, int n_heads, bool cross) : n_heads_(n_heads), cross_(cross) {
  if (cross_) {
    q_ = register_module("q", torch::nn::Linear(dim, dim));
    kv_ = register_module("kv", torch::nn::Linear(dim, 2 * dim));
  } else {
    qkv_ = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
  }
  proj_ = register_module("proj", torch::nn::Linear(dim, dim));
}

torch::Tensor AttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& context, torch::Tensor* weights_out) {
  const auto batch = x.size(0);
  const auto n = x.size(1);
  const auto dim = x.size(2);
  const auto head_dim = dim / n_heads_;
  torch::Tensor q, k, v;
  if (cross_) {
    const auto m = context.size(1);
    q = q_->forward(x).view({batch, n, n_heads_, head_dim}).transpose(1, 2);
    auto kv = kv_->forward(context).view({batch, m, 2, n_heads_, head_dim}).permute({2, 0, 3, 1, 4});
    k = kv[0];
    v = kv[1];
  } else {
    auto qkv = qkv_->forward(x).view({batch, n, 3, n_heads_, head_dim}).permute({2, 0, 3, 1, 4});
    q = qkv[0];
    k = qkv[1];
    v = qkv[2];
  }
  auto weights = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(head_dim)), -1);
  if (weights_out != nullptr) *weights_out = weights.detach();
  auto out = torch::matmul(weights, v).transpose(1, 2).reshape({batch, n, dim});
  return proj_->forward(out);
}

BlockImpl::BlockImpl(int dim, int n_heads, int mlp_ratio, bool cross, bool has_skip) : cross_(cross) {
  if (has_skip) skip_proj_ = register_module("skip_proj", torch::nn::Linear(2 * dim, dim));
  norm1_ = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  attn_ = register_module("attn", Attention(dim, n_heads, cross));
  norm2_ = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  fc1_ = register_module("fc1", torch::nn::Linear(dim, mlp_ratio * dim));
  fc2_ = register_module("fc2", torch::nn::Linear(mlp_ratio * dim, dim));
}

torch::Tensor BlockImpl::forward(torch::Tensor x, const torch::Tensor& skip, const torch::Tensor& ctrl,
                                 torch::Tensor* weights_out) {
  if (skip.defined() && !skip_proj_.is_empty()) x = skip_proj_->forward(torch::cat({x, skip}, -1));
  x = x + attn_->forward(norm1_->forward(x), cross_ ? ctrl : torch::Tensor(), weights_out);
  return x + fc2_->forward(torch::gelu(fc1_->forward(norm2_->forward(x))));
}

VectorFieldRegressorImpl::VectorFieldRegressorImpl(NetConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const int d = cfg_.token_dim;
  const int p = cfg_.patch_size;
  encoder_ = register_module("control_encoder", control::ControlEncoder(cfg_.encoder_config()));
  patch_embed_ = register_module("patch_embed", torch::nn::Linear(3 * cfg_.frame_channels * p * p, d));
  pos_embed_ = register_parameter("pos_embed", torch::randn({cfg_.n_visual_tokens(), d}) * 0.02);
  offset_embed_ = register_module("offset_embed", torch::nn::Embedding(cfg_.max_temporal_offset + 1, d));
  torch::NoGradGuard no_grad;
  offset_embed_->weight.normal_(0.0, 0.02);
  time_fc1_ = register_module("time_fc1", torch::nn::Linear(d, d));
  time_fc2_ = register_module("time_fc2", torch::nn::Linear(d, d));
  blocks_ = register_module("blocks", torch::nn::ModuleList());
  const auto cross = cfg_.resolved_cross_blocks();
  for (int b = 0; b < cfg_.n_blocks; ++b) {
    const bool is_cross = std::find(cross.begin(), cross.end(), b) != cross.end();
    blocks_->push_back(Block(d, cfg_.n_heads, cfg_.mlp_ratio, is_cross, b >= cfg_.n_blocks / 2));
  }
  final_norm_ = register_module("final_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
  head_ = register_module("head", torch::nn::Linear(d, cfg_.frame_channels * p * p));
  head_->weight.zero_();
  head_->bias.zero_();
}

torch::Tensor VectorFieldRegressorImpl::patchify(const torch::Tensor& x) const {
  const int p = cfg_.patch_size;
  const auto batch = x.size(0);
  const auto c = x.size(1);
  return x.view({batch, c, cfg_.grid_h(), p, cfg_.grid_w(), p})
      .permute({0, 2, 4, 1, 3, 5})
      .reshape({batch, cfg_.n_visual_tokens(), c * p * p});
}

torch::Tensor VectorFieldRegressorImpl::unpatchify(const torch::Tensor& tokens) const {
  const int p = cfg_.patch_size;
  const auto batch = tokens.size(0);
  const int c = cfg_.frame_channels;
  return tokens.view({batch, cfg_.grid_h(), cfg_.grid_w(), c, p, p})
      .permute({0, 3, 1, 4, 2, 5})
      .reshape({batch, c, cfg_.height, cfg_.width});
}

torch::Tensor VectorFieldRegressorImpl::encode_controls(const torch::Tensor& raster) {
  return encoder_->forward(raster);
}

int VectorFieldRegressorImpl::n_skip_connections() const { return cfg_.long_skips ? cfg_.n_blocks / 2 : 0; }

torch::Tensor VectorFieldRegressorImpl::forward(const torch::Tensor& x_noisy, const torch::Tensor& x_ref,
                                                const torch::Tensor& x_ctx, const torch::Tensor& dt_ctx,
                                                const torch::Tensor& t, const torch::Tensor& ctrl_tokens,
                                                AttentionCapture* capture) {
  const std::vector<int64_t> frame_shape{cfg_.frame_channels, cfg_.height, cfg_.width};
  if (x_noisy.dim() != 4 || x_noisy.sizes().slice(1) != c10::IntArrayRef(frame_shape)) {
    throw ShapeError("x_noisy has shape " + c10::str(x_noisy.sizes()) + ", expected (B, " +
                     c10::str(c10::IntArrayRef(frame_shape)) + ")");
  }
  if (!x_ref.sizes().equals(x_noisy.sizes()) || !x_ctx.sizes().equals(x_noisy.sizes())) {
    throw ShapeError("reference and context frames must match the noisy frame shape");
  }
  const auto batch = x_noisy.size(0);
  if (dt_ctx.dim() != 1 || dt_ctx.size(0) != batch || t.dim() != 1 || t.size(0) != batch) {
    throw ShapeError("dt_ctx and t must hold one entry per sample");
  }
  if (batch > 0) {
    const auto dt_min = dt_ctx.min().item<int64_t>();
    const auto dt_max = dt_ctx.max().item<int64_t>();
    if (dt_min < 0 || dt_max > cfg_.max_temporal_offset) {
      throw DomainError("dt_ctx outside [0, " + std::to_string(cfg_.max_temporal_offset) + "]");
    }
    if (t.min().item<double>() < 0.0 || t.max().item<double>() > 1.0) throw DomainError("t outside [0, 1]");
  }
  if (ctrl_tokens.dim() != 3 || ctrl_tokens.size(0) != batch || ctrl_tokens.size(1) != cfg_.n_control_tokens() ||
      ctrl_tokens.size(2) != cfg_.token_dim) {
    throw ShapeError("control tokens have shape " + c10::str(ctrl_tokens.sizes()));
  }

  auto visual = patch_embed_->forward(patchify(torch::cat({x_noisy, x_ref, x_ctx}, 1)));
  visual = visual + pos_embed_ + offset_embed_->forward(dt_ctx.to(torch::kLong)).unsqueeze(1);
  auto time_token = time_fc2_->forward(torch::silu(time_fc1_->forward(timestep_features(t.to(visual.scalar_type()),
                                                                                            cfg_.token_dim))));
  auto x = torch::cat({time_token.unsqueeze(1), visual}, 1);

  const auto cross = cfg_.resolved_cross_blocks();
  const int last_cross = cross.back();
  const int half = cfg_.n_blocks / 2;
  std::vector<torch::Tensor> skips;
  torch::Tensor captured;
  for (int b = 0; b < cfg_.n_blocks; ++b) {
    auto block = blocks_[b]->as<Block>();
    torch::Tensor skip;
    if (b >= half && cfg_.long_skips) {
      skip = skips.back();
      skips.pop_back();
    }
    torch::Tensor* weights_out = (capture != nullptr && b == last_cross) ? &captured : nullptr;
    x = block->forward(x, skip, ctrl_tokens, weights_out);
    if (b < half) skips.push_back(x);
  }
  if (capture != nullptr && captured.defined()) capture->weights.push_back(captured);

  auto out = head_->forward(final_norm_->forward(x));
  return unpatchify(out.index({torch::indexing::Slice(), torch::indexing::Slice(1)}));
}

}  // namespace forceworld::net
