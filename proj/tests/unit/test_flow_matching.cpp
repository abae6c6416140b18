#include "testing.hpp"

#include <cmath>

#include "forceworld/errors.hpp"
#include "forceworld/flow_matching.hpp"
#include "forceworld/rng.hpp"

using namespace forceworld;
using namespace forceworld::flow;

TEST_CASE("path moments interpolate between noise and data") {
  FlowMatchConfig cfg;
  cfg.sigma_min = 0.0;
  auto m = path_moments(torch::tensor({2.0}, torch::kFloat64), 0.5, cfg);
  CHECK(m.mean.item<double>() == doctest::Approx(1.0));
  CHECK(m.sigma == doctest::Approx(0.5));

  cfg.sigma_min = 1e-7;
  auto end = path_moments(torch::tensor({3.0}, torch::kFloat64), 1.0, cfg);
  CHECK(end.mean.item<double>() == doctest::Approx(3.0));
  CHECK(end.sigma == doctest::Approx(1e-7));
  auto start = path_moments(torch::tensor({3.0}, torch::kFloat64), 0.0, cfg);
  CHECK(start.mean.item<double>() == 0.0);
  CHECK(start.sigma == 1.0);
}

TEST_CASE("target field matches the time derivative of the flow map") {
  // phi_t(y0) = t*y1 + (1 - (1 - s) t) y0; its derivative is y1 - (1 - s) y0.
  FlowMatchConfig cfg;
  Rng rng(3);
  for (int k = 0; k < 200; ++k) {
    const double t = rng.uniform(0.0, 0.99);
    auto y1 = rng.randn({4}, torch::kFloat64);
    auto y0 = rng.randn({4}, torch::kFloat64);
    auto y = sample_path(y1, t, y0, cfg);
    auto u = target_vector_field(y, y1, t, cfg);
    auto expected = y1 - (1.0 - cfg.sigma_min) * y0;
    CHECK(torch::allclose(u, expected, 1e-9, 1e-9));
  }
}

TEST_CASE("batched path and field agree with the scalar forms") {
  FlowMatchConfig cfg;
  Rng rng(5);
  auto y1 = rng.randn({3, 2, 4, 4}, torch::kFloat64);
  auto noise = rng.randn({3, 2, 4, 4}, torch::kFloat64);
  auto t = torch::tensor({0.1, 0.5, 0.9}, torch::kFloat64);
  auto yb = sample_path(y1, t, noise, cfg);
  auto ub = target_vector_field(yb, y1, t, cfg);
  for (int b = 0; b < 3; ++b) {
    const double tb = t[b].item<double>();
    CHECK(torch::allclose(yb[b], sample_path(y1[b], tb, noise[b], cfg)));
    CHECK(torch::allclose(ub[b], target_vector_field(yb[b], y1[b], tb, cfg)));
  }
}

TEST_CASE("target field rejects t where the path collapses") {
  FlowMatchConfig cfg;
  cfg.sigma_min = 0.0;
  auto y = torch::zeros({2}, torch::kFloat64);
  CHECK_THROWS_AS(target_vector_field(y, y, 1.0, cfg), NumericError);
}

TEST_CASE("euler push-forward lands on the data point") {
  FlowMatchConfig cfg;
  cfg.sigma_min = 1e-7;
  auto y1 = torch::tensor({3.0}, torch::kFloat64);
  auto y0 = torch::tensor({0.4}, torch::kFloat64);
  auto field = [&](const torch::Tensor& y, double t) { return target_vector_field(y, y1, t, cfg); };
  auto exact = y1 + cfg.sigma_min * y0;
  auto error = [&](int n) {
    FlowMatchConfig c = cfg;
    c.n_ode_steps = n;
    return (integrate_flow(field, y0, c) - exact).abs().item<double>();
  };
  CHECK(error(1000) < 1e-2);
  // Every solution of the conditional field is affine in t, so each Euler
  // step follows it exactly and only rounding error remains.
  CHECK(error(7) < 1e-12);
  CHECK(error(200) < 1e-12);
}

TEST_CASE("euler error halves with doubled steps on a curved trajectory") {
  // dy/dt = y has curved solutions; Euler's endpoint error is first order.
  FlowMatchConfig cfg;
  auto field = [](const torch::Tensor& y, double) { return y; };
  auto y0 = torch::ones({1}, torch::kFloat64);
  auto error = [&](int n) {
    cfg.n_ode_steps = n;
    return std::abs(integrate_flow(field, y0, cfg).item<double>() - std::exp(1.0));
  };
  const double ratio = error(200) / error(400);
  CHECK(ratio == doctest::Approx(2.0).epsilon(0.02));
}

TEST_CASE("integrator validates its configuration and output") {
  FlowMatchConfig cfg;
  cfg.n_ode_steps = 0;
  auto y0 = torch::zeros({2});
  auto zero = [](const torch::Tensor& y, double) { return torch::zeros_like(y); };
  CHECK_THROWS_AS(integrate_flow(zero, y0, cfg), ConfigError);

  cfg.n_ode_steps = 4;
  auto nan_field = [](const torch::Tensor& y, double) { return torch::full_like(y, NAN); };
  CHECK_THROWS_AS(integrate_flow(nan_field, y0, cfg), NumericError);
}

TEST_CASE("step callback fires once per step before evaluation") {
  FlowMatchConfig cfg;
  cfg.n_ode_steps = 5;
  cfg.integrator = Integrator::kMidpoint;
  std::vector<int> steps;
  int evals = 0;
  auto field = [&](const torch::Tensor& y, double) {
    ++evals;
    CHECK(static_cast<int>(steps.size()) == (evals + 1) / 2);
    return torch::ones_like(y);
  };
  auto out = integrate_flow(field, torch::zeros({1}, torch::kFloat64), cfg, [&](int s, double) { steps.push_back(s); });
  CHECK(steps == std::vector<int>{0, 1, 2, 3, 4});
  CHECK(evals == 10);
  CHECK(out.item<double>() == doctest::Approx(1.0));
}

TEST_CASE("midpoint integrates a quadratic-in-time field exactly") {
  FlowMatchConfig cfg;
  cfg.n_ode_steps = 4;
  cfg.integrator = Integrator::kMidpoint;
  auto field = [](const torch::Tensor& y, double t) { return torch::full_like(y, 2.0 * t); };
  auto out = integrate_flow(field, torch::zeros({1}, torch::kFloat64), cfg);
  CHECK(out.item<double>() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("flow matching loss is the mean squared error") {
  auto a = torch::tensor({1.0, 2.0, 3.0, 4.0}, torch::kFloat64);
  auto b = torch::tensor({1.0, 0.0, 3.0, 2.0}, torch::kFloat64);
  CHECK(flow_matching_loss(a, b).item<double>() == doctest::Approx(2.0));
  CHECK_THROWS_AS(flow_matching_loss(a, b.view({2, 2})), ShapeError);
}

TEST_CASE("flow config validation and names") {
  FlowMatchConfig cfg;
  cfg.sigma_min = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK(integrator_from_string(to_string(Integrator::kMidpoint)) == Integrator::kMidpoint);
  CHECK_THROWS_AS(integrator_from_string("rk4"), ConfigError);
  nlohmann::json j = FlowMatchConfig{};
  CHECK(j.get<FlowMatchConfig>().n_ode_steps == 50);
}
