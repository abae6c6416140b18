#pragma once

#include <torch/types.h>

#include <functional>
#include <string>

#include "json.hpp"

namespace forceworld::flow {

enum class Integrator { kEuler, kMidpoint };

Integrator integrator_from_string(const std::string& name);
std::string to_string(Integrator integrator);

struct FlowMatchConfig {
  double sigma_min = 1e-7;
  int n_ode_steps = 50;
  Integrator integrator = Integrator::kEuler;

  void validate() const;
};

void to_json(nlohmann::json& j, const FlowMatchConfig& cfg);
void from_json(const nlohmann::json& j, FlowMatchConfig& cfg);

/// Upper end of the training-time sampling interval for t. Keeps the target
/// field denominator away from zero when sigma_min is tiny.
inline constexpr double kMaxTrainTime = 1.0 - 1e-5;

struct PathMoments {
  torch::Tensor mean;
  double sigma;
};

/// Moments of the Gaussian path p_t(y | y1): mean t*y1, std 1 - (1 - sigma_min) t.
PathMoments path_moments(const torch::Tensor& y1, double t, const FlowMatchConfig& cfg);

/// Draw from p_t(y | y1) given standard-normal `noise`.
torch::Tensor sample_path(const torch::Tensor& y1, double t, const torch::Tensor& noise,
                          const FlowMatchConfig& cfg);
/// Batched variant: t holds one time per leading-dimension entry.
torch::Tensor sample_path(const torch::Tensor& y1, const torch::Tensor& t, const torch::Tensor& noise,
                          const FlowMatchConfig& cfg);

/// Conditional target field u_t(y | y1) = (y1 - (1 - sigma_min) y) / (1 - (1 - sigma_min) t).
torch::Tensor target_vector_field(const torch::Tensor& y, const torch::Tensor& y1, double t,
                                  const FlowMatchConfig& cfg);
torch::Tensor target_vector_field(const torch::Tensor& y, const torch::Tensor& y1, const torch::Tensor& t,
                                  const FlowMatchConfig& cfg);

/// Mean squared error between predicted and target fields.
torch::Tensor flow_matching_loss(const torch::Tensor& v_pred, const torch::Tensor& u_target);

using VectorField = std::function<torch::Tensor(const torch::Tensor& y, double t)>;
/// Called once per integration step, before any field evaluation of that step.
using StepCallback = std::function<void(int step, double t)>;

/// Fixed-step explicit integration of dy/dt = field(y, t) from t = 0 to t = 1.
torch::Tensor integrate_flow(const VectorField& field, const torch::Tensor& y0, const FlowMatchConfig& cfg,
                             const StepCallback& on_step = {});

}  // namespace forceworld::flow
