#pragma once

#include <torch/optim/adamw.h>

#include <chrono>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "forceworld/checkpoint.hpp"
#include "forceworld/control.hpp"
#include "forceworld/flow_matching.hpp"
#include "forceworld/net.hpp"
#include "forceworld/rng.hpp"
#include "forceworld/world.hpp"
#include "json.hpp"

namespace forceworld::train {

struct TrainConfig {
  /// Probability of replacing the context frame, and independently the
  /// control tokens, with noise.
  double pi = 0.5;
  int n_c = 5;
  double lr = 1e-4;
  double weight_decay = 5e-6;
  int warmup_steps = 1000;
  int total_steps = 40000;
  int batch_size = 32;
  uint64_t seed = 0;
  /// Global gradient-norm clip; <= 0 disables clipping.
  double grad_clip = 1.0;
  int checkpoint_every = 1000;
  int log_every = 50;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& cfg);
void from_json(const nlohmann::json& j, TrainConfig& cfg);

/// Linear warmup to the base rate, then inverse square-root decay. step >= 1.
double learning_rate(const TrainConfig& cfg, int64_t step);

/// One training example. Frame tensors are codes (C, H, W).
struct TrainingTuple {
  int tau = 0;  // 1-based target index
  int c = 0;    // 1-based context index
  torch::Tensor x_tau;
  torch::Tensor x_ref;
  torch::Tensor x_ctx;
  /// tau - c, or 0 when the context was replaced by noise.
  int64_t dt_ctx = 0;
  bool ctx_dropped = false;
  bool ctrl_dropped = false;
  /// Controls sampled from the flow between x_ref and x_tau; always built.
  control::SparseFlowControl ctrl;
  /// (n_control_tokens, token_dim) standard-normal tokens when ctrl_dropped.
  torch::Tensor ctrl_noise;
  double t = 0.0;
  torch::Tensor x_noisy;
  torch::Tensor u_target;
};

TrainingTuple sample_training_tuple(const world::VideoClip& clip, Rng& rng, const TrainConfig& cfg,
                                    const flow::FlowMatchConfig& flow_cfg, const net::NetConfig& net_cfg);

struct Batch {
  torch::Tensor x_noisy, x_ref, x_ctx, dt_ctx, t, raster, ctrl_dropped, ctrl_noise, u_target;
};

Batch collate(const std::vector<TrainingTuple>& tuples, const net::NetConfig& net_cfg);

/// Encode the batch controls and substitute noise tokens where dropped.
torch::Tensor control_tokens(net::VectorFieldRegressor& net, const Batch& batch);

/// Flow-matching loss of `net` on a batch.
torch::Tensor batch_loss(net::VectorFieldRegressor& net, const Batch& batch);

struct StepLog {
  int64_t step;
  double loss;
  double lr;
  double wall_time_s;
};

class Trainer {
 public:
  Trainer(net::NetConfig net_cfg, flow::FlowMatchConfig flow_cfg, TrainConfig train_cfg,
          std::vector<world::VideoClip> clips, std::string dataset_fingerprint = "",
          std::optional<world::WorldConfig> world_cfg = std::nullopt);

  /// One optimizer update on a freshly sampled batch. Returns the loss.
  double train_step();

  /// Train until total_steps, logging JSON lines and checkpointing into out_dir.
  void run(const std::filesystem::path& out_dir, const std::function<void(const StepLog&)>& on_log = {});

  /// Full resume state: parameters, buffers, optimizer moments, RNG, step.
  void save_checkpoint(const std::filesystem::path& archive) const;
  void load_checkpoint(const std::filesystem::path& archive);

  nlohmann::json resolved_config() const;

  int64_t step() const { return step_; }
  net::VectorFieldRegressor& net() { return net_; }
  const TrainConfig& config() const { return train_cfg_; }
  Rng& rng() { return rng_; }

 private:
  net::NetConfig net_cfg_;
  flow::FlowMatchConfig flow_cfg_;
  TrainConfig train_cfg_;
  std::vector<world::VideoClip> clips_;
  std::string dataset_fingerprint_;
  std::optional<world::WorldConfig> world_cfg_;
  net::VectorFieldRegressor net_{nullptr};
  std::unique_ptr<torch::optim::AdamW> optimizer_;
  Rng rng_;
  int64_t step_ = 0;
  std::filesystem::path diagnostics_dir_;
};

}  // namespace forceworld::train
