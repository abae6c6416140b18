#include "forceworld/sampler.hpp"

#include <torch/torch.h>

#include "forceworld/errors.hpp"

namespace forceworld::sampler {

void validate_controls(const std::vector<control::ControlPoint>& controls, int height, int width) {
  // build_sparse_raster enforces bounds and uniqueness.
  (void)control::build_sparse_raster(controls, height, width);
}

GenerationSession::GenerationSession(net::VectorFieldRegressor net, SessionConfig cfg)
    : net_(std::move(net)), cfg_(cfg), rng_(0) {
  if (cfg_.max_history < 2) throw ConfigError("max_history must be >= 2");
  cfg_.flow.validate();
}

GenerationSession::GenerationSession(net::VectorFieldRegressor net, SessionConfig cfg, const torch::Tensor& first_frame,
                                     uint64_t seed)
    : GenerationSession(std::move(net), cfg) {
  const auto& nc = net_->config();
  if (first_frame.dim() != 3 || first_frame.size(0) != nc.frame_channels || first_frame.size(1) != nc.height ||
      first_frame.size(2) != nc.width) {
    throw ShapeError("first frame has shape " + c10::str(first_frame.sizes()) + ", model expects (" +
                     std::to_string(nc.frame_channels) + ", " + std::to_string(nc.height) + ", " +
                     std::to_string(nc.width) + ")");
  }
  auto frame = first_frame.to(torch::kFloat32).contiguous();
  if (!torch::isfinite(frame).all().item<bool>() || frame.min().item<float>() < 0.0f ||
      frame.max().item<float>() > 1.0f) {
    throw DomainError("first frame must be finite with values in [0, 1]");
  }
  rng_ = Rng(seed);
  frames_.push_back(frame.clone());
  codes_.push_back(net::FrameCodec::encode(frame));
}

torch::Tensor GenerationSession::control_tokens(const Controls& controls) {
  const auto& nc = net_->config();
  if (!controls || controls->empty()) {
    return control::noise_control_tokens({1, nc.n_control_tokens(), nc.token_dim}, rng_);
  }
  auto raster = control::build_sparse_raster(*controls, nc.height, nc.width);
  return net_->encode_controls(raster.unsqueeze(0));
}

torch::Tensor GenerationSession::step(const Controls& controls, bool capture_attention) {
  torch::NoGradGuard no_grad;
  const auto& nc = net_->config();
  auto tokens = control_tokens(controls);
  auto x_ref = codes_.back().unsqueeze(0);
  const int history = static_cast<int>(codes_.size());
  // Target index is history + 1; context indices run over 1..history-1.
  const int target = history + 1;
  const int lowest = std::max(1, target - nc.max_temporal_offset);

  net::AttentionCapture capture;
  torch::Tensor x_ctx;
  torch::Tensor dt_ctx = torch::zeros({1}, torch::kLong);
  auto on_step = [&](int, double) {
    if (history < 2) {
      x_ctx = rng_.randn(x_ref.sizes());
      dt_ctx.fill_(0);
      return;
    }
    const int c = static_cast<int>(rng_.uniform_int(lowest, history - 1));
    x_ctx = codes_[c - 1].unsqueeze(0);
    dt_ctx.fill_(target - c);
  };
  auto field = [&](const torch::Tensor& y, double t) {
    auto tt = torch::full({1}, t, torch::kFloat32);
    return net_->forward(y, x_ref, x_ctx, dt_ctx, tt, tokens, capture_attention ? &capture : nullptr);
  };
  auto y0 = rng_.randn(x_ref.sizes());
  auto code = flow::integrate_flow(field, y0, cfg_.flow, on_step).squeeze(0);

  auto frame = net::FrameCodec::decode(code).contiguous();
  // Keep the stored code consistent with the frame the caller sees.
  codes_.push_back(net::FrameCodec::encode(frame));
  frames_.push_back(frame);
  if (static_cast<int>(codes_.size()) > cfg_.max_history) {
    codes_.erase(codes_.begin());
    frames_.erase(frames_.begin());
  }
  ++frame_index_;
  attention_.reset();
  if (capture_attention) attention_ = std::move(capture);
  return frame;
}

std::vector<torch::Tensor> GenerationSession::rollout(int n_frames, const std::vector<Controls>& controls) {
  if (n_frames < 0) throw DomainError("n_frames must be >= 0");
  std::vector<torch::Tensor> out;
  out.reserve(n_frames);
  for (int k = 0; k < n_frames; ++k) {
    out.push_back(step(k < static_cast<int>(controls.size()) ? controls[k] : std::nullopt));
  }
  return out;
}

GenerationSession GenerationSession::clone() const {
  GenerationSession copy(net_, cfg_);
  for (const auto& c : codes_) copy.codes_.push_back(c.clone());
  for (const auto& f : frames_) copy.frames_.push_back(f.clone());
  copy.frame_index_ = frame_index_;
  copy.rng_.set_state(rng_.state());
  copy.attention_ = attention_;
  return copy;
}

std::vector<torch::Tensor> GenerationSession::frames() const { return frames_; }

}  // namespace forceworld::sampler
