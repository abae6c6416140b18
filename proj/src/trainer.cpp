#include "forceworld/trainer.hpp"

#include <torch/torch.h>

#include <cmath>
#include <fstream>
#include <map>

#include "forceworld/errors.hpp"
#include "forceworld/util.hpp"

namespace forceworld::train {

namespace fs = std::filesystem;
using nlohmann::json;

void TrainConfig::validate() const {
  if (!(pi >= 0.0 && pi <= 1.0)) throw ConfigError("pi must lie in [0, 1]");
  if (n_c < 0) throw ConfigError("n_c must be >= 0");
  if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (warmup_steps < 1) throw ConfigError("warmup_steps must be >= 1");
  if (total_steps < 0) throw ConfigError("total_steps must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (checkpoint_every < 1 || log_every < 1) throw ConfigError("checkpoint_every and log_every must be >= 1");
}

void to_json(json& j, const TrainConfig& cfg) {
  j = json{{"pi", cfg.pi},
           {"n_c", cfg.n_c},
           {"lr", cfg.lr},
           {"weight_decay", cfg.weight_decay},
           {"warmup_steps", cfg.warmup_steps},
           {"total_steps", cfg.total_steps},
           {"batch_size", cfg.batch_size},
           {"seed", cfg.seed},
           {"grad_clip", cfg.grad_clip},
           {"checkpoint_every", cfg.checkpoint_every},
           {"log_every", cfg.log_every}};
}

void from_json(const json& j, TrainConfig& cfg) {
  cfg = TrainConfig{};
  cfg.pi = j.value("pi", cfg.pi);
  cfg.n_c = j.value("n_c", cfg.n_c);
  cfg.lr = j.value("lr", cfg.lr);
  cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
  cfg.warmup_steps = j.value("warmup_steps", cfg.warmup_steps);
  cfg.total_steps = j.value("total_steps", cfg.total_steps);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.grad_clip = j.value("grad_clip", cfg.grad_clip);
  cfg.checkpoint_every = j.value("checkpoint_every", cfg.checkpoint_every);
  cfg.log_every = j.value("log_every", cfg.log_every);
}

double learning_rate(const TrainConfig& cfg, int64_t step) {
  if (step < 1) throw DomainError("learning-rate schedule is defined for step >= 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(cfg.warmup_steps);
  return cfg.lr * std::min(s / w, std::sqrt(w / s));
}

TrainingTuple sample_training_tuple(const world::VideoClip& clip, Rng& rng, const TrainConfig& cfg,
                                    const flow::FlowMatchConfig& flow_cfg, const net::NetConfig& net_cfg) {
  const int length = static_cast<int>(clip.n_frames());
  if (length < 3) throw DomainError("training clips need at least 3 frames, got " + std::to_string(length));
  TrainingTuple tup;
  tup.tau = static_cast<int>(rng.uniform_int(3, length));
  tup.c = static_cast<int>(rng.uniform_int(1, tup.tau - 2));
  // Offsets beyond the embedding table cannot be represented; clamp the context window.
  if (tup.tau - tup.c > net_cfg.max_temporal_offset) {
    tup.c = static_cast<int>(rng.uniform_int(tup.tau - net_cfg.max_temporal_offset, tup.tau - 2));
  }
  tup.t = rng.uniform(0.0, flow::kMaxTrainTime);

  tup.x_tau = net::FrameCodec::encode(clip.frames[tup.tau - 1]);
  tup.x_ref = net::FrameCodec::encode(clip.frames[tup.tau - 2]);
  auto noise = rng.randn(tup.x_tau.sizes());
  tup.x_noisy = flow::sample_path(tup.x_tau, tup.t, noise, flow_cfg);
  tup.u_target = flow::target_vector_field(tup.x_noisy, tup.x_tau, tup.t, flow_cfg);

  tup.ctrl = control::sample_control_pixels(clip.flows[tup.tau - 2], cfg.n_c, rng);

  tup.ctx_dropped = rng.bernoulli(cfg.pi);
  if (tup.ctx_dropped) {
    tup.x_ctx = rng.randn(tup.x_tau.sizes());
    tup.dt_ctx = 0;
  } else {
    tup.x_ctx = net::FrameCodec::encode(clip.frames[tup.c - 1]);
    tup.dt_ctx = tup.tau - tup.c;
  }
  tup.ctrl_dropped = rng.bernoulli(cfg.pi);
  if (tup.ctrl_dropped) {
    tup.ctrl_noise = control::noise_control_tokens({net_cfg.n_control_tokens(), net_cfg.token_dim}, rng);
  }
  return tup;
}

Batch collate(const std::vector<TrainingTuple>& tuples, const net::NetConfig& net_cfg) {
  std::vector<torch::Tensor> noisy, ref, ctx, raster, noise, target;
  std::vector<int64_t> dt;
  std::vector<double> t;
  std::vector<uint8_t> dropped;
  for (const auto& tup : tuples) {
    noisy.push_back(tup.x_noisy);
    ref.push_back(tup.x_ref);
    ctx.push_back(tup.x_ctx);
    raster.push_back(tup.ctrl.raster);
    target.push_back(tup.u_target);
    noise.push_back(tup.ctrl_dropped ? tup.ctrl_noise
                                     : torch::zeros({net_cfg.n_control_tokens(), net_cfg.token_dim}));
    dt.push_back(tup.dt_ctx);
    t.push_back(tup.t);
    dropped.push_back(tup.ctrl_dropped ? 1 : 0);
  }
  Batch b;
  b.x_noisy = torch::stack(noisy);
  b.x_ref = torch::stack(ref);
  b.x_ctx = torch::stack(ctx);
  b.raster = torch::stack(raster);
  b.ctrl_noise = torch::stack(noise);
  b.u_target = torch::stack(target);
  b.dt_ctx = torch::tensor(dt, torch::kLong);
  b.t = torch::tensor(t, torch::kFloat64).to(torch::kFloat32);
  b.ctrl_dropped = torch::tensor(std::vector<int64_t>(dropped.begin(), dropped.end()), torch::kLong).to(torch::kBool);
  return b;
}

torch::Tensor control_tokens(net::VectorFieldRegressor& net, const Batch& batch) {
  auto tokens = net->encode_controls(batch.raster.to(batch.x_noisy.scalar_type()));
  return torch::where(batch.ctrl_dropped.view({-1, 1, 1}), batch.ctrl_noise.to(tokens.scalar_type()), tokens);
}

torch::Tensor batch_loss(net::VectorFieldRegressor& net, const Batch& batch) {
  auto tokens = control_tokens(net, batch);
  auto v = net->forward(batch.x_noisy, batch.x_ref, batch.x_ctx, batch.dt_ctx, batch.t.to(batch.x_noisy.scalar_type()),
                        tokens);
  return flow::flow_matching_loss(v, batch.u_target);
}

Trainer::Trainer(net::NetConfig net_cfg, flow::FlowMatchConfig flow_cfg, TrainConfig train_cfg,
                 std::vector<world::VideoClip> clips, std::string dataset_fingerprint,
                 std::optional<world::WorldConfig> world_cfg)
    : net_cfg_(std::move(net_cfg)),
      flow_cfg_(flow_cfg),
      train_cfg_(train_cfg),
      clips_(std::move(clips)),
      dataset_fingerprint_(std::move(dataset_fingerprint)),
      world_cfg_(std::move(world_cfg)),
      rng_(train_cfg.seed) {
  net_cfg_.validate();
  flow_cfg_.validate();
  train_cfg_.validate();
  if (clips_.empty()) throw ConfigError("trainer needs at least one clip");
  for (const auto& clip : clips_) {
    if (clip.frames.size(2) != net_cfg_.height || clip.frames.size(3) != net_cfg_.width) {
      throw ConfigError("clip resolution does not match the network configuration");
    }
  }
  // Parameter initialization draws from the global torch generator; seed it from the run seed.
  torch::manual_seed(mix_seed(train_cfg_.seed, 0x1417));
  net_ = net::VectorFieldRegressor(net_cfg_);
  net_->train();
  optimizer_ = std::make_unique<torch::optim::AdamW>(
      net_->parameters(), torch::optim::AdamWOptions(train_cfg_.lr).weight_decay(train_cfg_.weight_decay));
}

double Trainer::train_step() {
  const int64_t step = step_ + 1;
  const double lr = learning_rate(train_cfg_, step);
  for (auto& group : optimizer_->param_groups()) static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);

  std::vector<TrainingTuple> tuples;
  tuples.reserve(train_cfg_.batch_size);
  for (int b = 0; b < train_cfg_.batch_size; ++b) {
    const auto& clip = clips_[rng_.uniform_int(0, static_cast<int64_t>(clips_.size()) - 1)];
    tuples.push_back(sample_training_tuple(clip, rng_, train_cfg_, flow_cfg_, net_cfg_));
  }
  auto batch = collate(tuples, net_cfg_);

  net_->train();
  optimizer_->zero_grad();
  auto loss = batch_loss(net_, batch);
  const double loss_value = loss.item<double>();
  if (!std::isfinite(loss_value)) {
    uint64_t h = util::kFnvOffset;
    for (const auto& t : {batch.x_noisy, batch.x_ref, batch.x_ctx, batch.raster, batch.u_target}) {
      auto c = t.contiguous();
      h = util::fnv1a(std::string_view(static_cast<const char*>(c.data_ptr()), c.nbytes()), h);
    }
    json diag{{"step", step}, {"lr", lr}, {"loss", std::to_string(loss_value)}, {"inputs_hash", util::hex64(h)}};
    if (!diagnostics_dir_.empty()) {
      util::write_text_atomic(diagnostics_dir_ / ("diagnostics_step" + std::to_string(step) + ".json"), diag.dump(2));
    }
    throw NumericError("non-finite training loss at step " + std::to_string(step) + ": " + diag.dump());
  }
  loss.backward();
  if (train_cfg_.grad_clip > 0.0) torch::nn::utils::clip_grad_norm_(net_->parameters(), train_cfg_.grad_clip);
  optimizer_->step();
  step_ = step;
  return loss_value;
}

json Trainer::resolved_config() const {
  json j{{"net", net_cfg_},
         {"flow", flow_cfg_},
         {"train", train_cfg_},
         {"dataset_fingerprint", dataset_fingerprint_},
         {"code_version", ckpt::kCodeVersion}};
  if (world_cfg_) j["world"] = *world_cfg_;
  return j;
}

void Trainer::run(const fs::path& out_dir, const std::function<void(const StepLog&)>& on_log) {
  fs::create_directories(out_dir);
  diagnostics_dir_ = out_dir;
  util::write_text_atomic(out_dir / "config.json", resolved_config().dump(2));
  std::ofstream log(out_dir / "metrics.jsonl", std::ios::app);
  const auto start = std::chrono::steady_clock::now();
  double loss_acc = 0.0;
  int loss_count = 0;
  while (step_ < train_cfg_.total_steps) {
    loss_acc += train_step();
    ++loss_count;
    if (step_ % train_cfg_.log_every == 0 || step_ == train_cfg_.total_steps) {
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      StepLog entry{step_, loss_acc / loss_count, learning_rate(train_cfg_, step_), wall};
      log << json{{"step", entry.step}, {"loss", entry.loss}, {"lr", entry.lr}, {"wall_time", entry.wall_time_s}}.dump()
          << "\n";
      log.flush();
      if (on_log) on_log(entry);
      loss_acc = 0.0;
      loss_count = 0;
    }
    if (step_ % train_cfg_.checkpoint_every == 0) save_checkpoint(out_dir / "checkpoint.fwa");
  }
  save_checkpoint(out_dir / "model.fwa");
}

void Trainer::save_checkpoint(const fs::path& archive) const {
  auto tensors = ckpt::model_tensors(*net_);
  for (const auto& item : net_->named_parameters()) {
    auto it = optimizer_->state().find(item.value().unsafeGetTensorImpl());
    if (it == optimizer_->state().end()) continue;
    auto& st = static_cast<torch::optim::AdamWParamState&>(*it->second);
    tensors.emplace_back("optim/" + item.key() + "/step", torch::tensor(st.step(), torch::kInt64));
    tensors.emplace_back("optim/" + item.key() + "/exp_avg", st.exp_avg());
    tensors.emplace_back("optim/" + item.key() + "/exp_avg_sq", st.exp_avg_sq());
  }
  tensors.emplace_back("rng/state", rng_.state());
  tensors.emplace_back("train/step", torch::tensor(step_, torch::kInt64));
  ckpt::write_archive(archive, tensors);
  json side = resolved_config();
  side["step"] = step_;
  util::write_text_atomic(ckpt::sidecar_path(archive), side.dump(2));
}

void Trainer::load_checkpoint(const fs::path& archive) {
  auto tensors = ckpt::read_archive(archive);
  ckpt::load_model_tensors(*net_, tensors);
  std::map<std::string, torch::Tensor> by_name(tensors.begin(), tensors.end());
  auto find = [&](const std::string& key) -> torch::Tensor {
    auto it = by_name.find(key);
    return it == by_name.end() ? torch::Tensor() : it->second;
  };
  auto& state = optimizer_->state();
  state.clear();
  for (const auto& item : net_->named_parameters()) {
    auto step = find("optim/" + item.key() + "/step");
    if (!step.defined()) continue;
    auto st = std::make_unique<torch::optim::AdamWParamState>();
    st->step(step.item<int64_t>());
    st->exp_avg(find("optim/" + item.key() + "/exp_avg").clone());
    st->exp_avg_sq(find("optim/" + item.key() + "/exp_avg_sq").clone());
    state[item.value().unsafeGetTensorImpl()] = std::move(st);
  }
  auto rng_state = find("rng/state");
  auto step = find("train/step");
  if (!rng_state.defined() || !step.defined()) throw FormatError("checkpoint lacks resume state");
  rng_.set_state(rng_state);
  step_ = step.item<int64_t>();
}

}  // namespace forceworld::train
