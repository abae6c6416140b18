#include "forceworld/flow_matching.hpp"

#include <torch/torch.h>

#include <cmath>

#include "forceworld/errors.hpp"

namespace forceworld::flow {

namespace {

constexpr double kSingularityEps = 1e-12;

void check_time(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("flow time t=" + std::to_string(t) + " outside [0, 1]");
}

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (!a.sizes().equals(b.sizes())) {
    throw ShapeError(std::string(what) + ": shape mismatch " + c10::str(a.sizes()) + " vs " + c10::str(b.sizes()));
  }
}

// Reshape per-sample times (B) so they broadcast against a (B, ...) tensor.
torch::Tensor broadcast_time(const torch::Tensor& t, const torch::Tensor& like) {
  if (t.dim() != 1 || t.size(0) != like.size(0)) {
    throw ShapeError("batched time must have one entry per sample");
  }
  std::vector<int64_t> shape(like.dim(), 1);
  shape[0] = like.size(0);
  return t.to(like.dtype()).view(shape);
}

}  // namespace

Integrator integrator_from_string(const std::string& name) {
  if (name == "euler") return Integrator::kEuler;
  if (name == "midpoint") return Integrator::kMidpoint;
  throw ConfigError("unknown integrator '" + name + "'");
}

std::string to_string(Integrator integrator) {
  return integrator == Integrator::kEuler ? "euler" : "midpoint";
}

void to_json(nlohmann::json& j, const FlowMatchConfig& cfg) {
  j = nlohmann::json{{"sigma_min", cfg.sigma_min}, {"n_ode_steps", cfg.n_ode_steps}, {"integrator", to_string(cfg.integrator)}};
}

void from_json(const nlohmann::json& j, FlowMatchConfig& cfg) {
  cfg = FlowMatchConfig{};
  cfg.sigma_min = j.value("sigma_min", cfg.sigma_min);
  cfg.n_ode_steps = j.value("n_ode_steps", cfg.n_ode_steps);
  cfg.integrator = integrator_from_string(j.value("integrator", to_string(cfg.integrator)));
}

void FlowMatchConfig::validate() const {
  if (!(sigma_min > 0.0 && sigma_min < 1.0)) throw ConfigError("sigma_min must lie in (0, 1)");
  if (n_ode_steps < 1) throw ConfigError("n_ode_steps must be >= 1");
}

PathMoments path_moments(const torch::Tensor& y1, double t, const FlowMatchConfig& cfg) {
  check_time(t);
  return {t * y1, 1.0 - (1.0 - cfg.sigma_min) * t};
}

torch::Tensor sample_path(const torch::Tensor& y1, double t, const torch::Tensor& noise, const FlowMatchConfig& cfg) {
  check_same_shape(y1, noise, "sample_path");
  auto [mean, sigma] = path_moments(y1, t, cfg);
  return mean + sigma * noise;
}

torch::Tensor sample_path(const torch::Tensor& y1, const torch::Tensor& t, const torch::Tensor& noise,
                          const FlowMatchConfig& cfg) {
  check_same_shape(y1, noise, "sample_path");
  if (t.numel() > 0 && (t.min().item<double>() < 0.0 || t.max().item<double>() > 1.0)) {
    throw DomainError("flow time outside [0, 1]");
  }
  auto tb = broadcast_time(t, y1);
  return tb * y1 + (1.0 - (1.0 - cfg.sigma_min) * tb) * noise;
}

torch::Tensor target_vector_field(const torch::Tensor& y, const torch::Tensor& y1, double t,
                                  const FlowMatchConfig& cfg) {
  check_time(t);
  check_same_shape(y, y1, "target_vector_field");
  const double denom = 1.0 - (1.0 - cfg.sigma_min) * t;
  if (denom <= kSingularityEps) {
    throw NumericError("target_vector_field: singular denominator at t=" + std::to_string(t));
  }
  return (y1 - (1.0 - cfg.sigma_min) * y) / denom;
}

torch::Tensor target_vector_field(const torch::Tensor& y, const torch::Tensor& y1, const torch::Tensor& t,
                                  const FlowMatchConfig& cfg) {
  check_same_shape(y, y1, "target_vector_field");
  auto tb = broadcast_time(t, y);
  auto denom = 1.0 - (1.0 - cfg.sigma_min) * tb;
  if (denom.numel() > 0 && denom.min().item<double>() <= kSingularityEps) {
    throw NumericError("target_vector_field: singular denominator");
  }
  return (y1 - (1.0 - cfg.sigma_min) * y) / denom;
}

torch::Tensor flow_matching_loss(const torch::Tensor& v_pred, const torch::Tensor& u_target) {
  check_same_shape(v_pred, u_target, "flow_matching_loss");
  return (v_pred - u_target).pow(2).mean();
}

torch::Tensor integrate_flow(const VectorField& field, const torch::Tensor& y0, const FlowMatchConfig& cfg,
                             const StepCallback& on_step) {
  if (cfg.n_ode_steps < 1) throw ConfigError("n_ode_steps must be >= 1");
  const double h = 1.0 / cfg.n_ode_steps;
  auto y = y0.clone();
  for (int step = 0; step < cfg.n_ode_steps; ++step) {
    const double t = step * h;
    if (on_step) on_step(step, t);
    torch::Tensor v;
    if (cfg.integrator == Integrator::kEuler) {
      v = field(y, t);
    } else {
      auto k1 = field(y, t);
      v = field(y + 0.5 * h * k1, t + 0.5 * h);
    }
    if (!torch::isfinite(v).all().item<bool>()) {
      throw NumericError("integrate_flow: non-finite field output at step " + std::to_string(step));
    }
    y = y + h * v;
  }
  return y;
}

}  // namespace forceworld::flow
