#pragma once

#include <optional>
#include <vector>

#include "forceworld/control.hpp"
#include "forceworld/flow_matching.hpp"
#include "forceworld/net.hpp"
#include "forceworld/rng.hpp"

namespace forceworld::sampler {

struct SessionConfig {
  /// Oldest frames beyond this many are dropped from the history.
  int max_history = 16;
  flow::FlowMatchConfig flow;
};

using Controls = std::optional<std::vector<control::ControlPoint>>;

/// Autoregressive generation state for one video. The network is shared and
/// only read; everything mutable lives in the session.
class GenerationSession {
 public:
  /// `first_frame` is a (3, H, W) pixel frame in [0, 1].
  GenerationSession(net::VectorFieldRegressor net, SessionConfig cfg, const torch::Tensor& first_frame,
                    uint64_t seed);

  /// Generate the next frame. std::nullopt (or an empty list) means free
  /// dynamics: control tokens are replaced by noise. Returns the pixel frame.
  torch::Tensor step(const Controls& controls = std::nullopt, bool capture_attention = false);

  /// `controls[k]` drives step k; missing entries mean free dynamics.
  std::vector<torch::Tensor> rollout(int n_frames, const std::vector<Controls>& controls = {});

  /// Independent copy with the same history and RNG state.
  GenerationSession clone() const;

  /// Pixel frames in history order, (3, H, W) each.
  std::vector<torch::Tensor> frames() const;
  const torch::Tensor& current_frame() const { return frames_.back(); }
  /// Number of frames produced so far; the first frame has index 0.
  int frame_index() const { return frame_index_; }
  int history_length() const { return static_cast<int>(codes_.size()); }

  /// Attention captured during the most recent step, if requested.
  const std::optional<net::AttentionCapture>& last_attention() const { return attention_; }

  const net::NetConfig& net_config() const { return net_->config(); }
  const SessionConfig& config() const { return cfg_; }
  Rng& rng() { return rng_; }

 private:
  GenerationSession(net::VectorFieldRegressor net, SessionConfig cfg);

  torch::Tensor control_tokens(const Controls& controls);

  net::VectorFieldRegressor net_;
  SessionConfig cfg_;
  std::vector<torch::Tensor> codes_;
  std::vector<torch::Tensor> frames_;
  int frame_index_ = 0;
  Rng rng_;
  std::optional<net::AttentionCapture> attention_;
};

/// Validate controls against a frame size; throws DomainError on out-of-bounds
/// or duplicate pixels.
void validate_controls(const std::vector<control::ControlPoint>& controls, int height, int width);

}  // namespace forceworld::sampler
