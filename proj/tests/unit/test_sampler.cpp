#include "testing.hpp"

#include "forceworld/errors.hpp"
#include "forceworld/sampler.hpp"
#include "helpers.hpp"

using namespace forceworld;

namespace {

net::VectorFieldRegressor random_net(uint64_t seed) {
  torch::manual_seed(seed);
  net::VectorFieldRegressor m(fwtest::tiny_net_config());
  torch::NoGradGuard ng;
  m->output_head()->weight.normal_(0.0, 0.3);
  m->output_head()->bias.normal_(0.0, 0.3);
  m->eval();
  return m;
}

sampler::SessionConfig fast_config(int max_history = 5) {
  sampler::SessionConfig c;
  c.max_history = max_history;
  c.flow.n_ode_steps = 4;
  return c;
}

}  // namespace

TEST_CASE("single-frame rollout stays finite and in range") {
  auto m = random_net(1);
  sampler::GenerationSession s(m, fast_config(), torch::rand({3, 16, 16}), 7);
  CHECK(s.frame_index() == 0);
  CHECK(s.history_length() == 1);
  auto frames = s.rollout(8);
  REQUIRE(frames.size() == 8);
  for (const auto& f : frames) {
    CHECK(f.sizes() == c10::IntArrayRef({3, 16, 16}));
    CHECK(torch::isfinite(f).all().item<bool>());
    CHECK(f.min().item<double>() >= 0.0);
    CHECK(f.max().item<double>() <= 1.0);
  }
  CHECK(s.frame_index() == 8);
  CHECK(s.history_length() == 5);
  CHECK(torch::equal(s.current_frame(), frames.back()));
  CHECK(s.frames().size() == 5);
}

TEST_CASE("history grows then caps") {
  auto m = random_net(2);
  sampler::GenerationSession s(m, fast_config(3), torch::rand({3, 16, 16}), 1);
  std::vector<int> lens;
  for (int k = 0; k < 5; ++k) {
    s.step();
    lens.push_back(s.history_length());
  }
  CHECK((lens == std::vector<int>{2, 3, 3, 3, 3}));
}

TEST_CASE("sessions are deterministic per seed and clones are independent") {
  auto m = random_net(3);
  auto first = torch::rand({3, 16, 16});
  std::vector<control::ControlPoint> push{{4, 4, 1.0f, 2.0f}};
  sampler::GenerationSession a(m, fast_config(), first, 42);
  sampler::GenerationSession b(m, fast_config(), first, 42);
  sampler::GenerationSession c(m, fast_config(), first, 43);
  auto fa = a.step(push);
  auto fb = b.step(push);
  auto fc = c.step(push);
  CHECK(torch::equal(fa, fb));
  CHECK_FALSE(torch::equal(fa, fc));

  auto clone = a.clone();
  auto ca = clone.step();
  auto aa = a.step();
  CHECK(torch::equal(ca, aa));
  clone.step();
  CHECK(clone.frame_index() == 3);
  CHECK(a.frame_index() == 2);
}

TEST_CASE("controls are validated") {
  auto m = random_net(4);
  sampler::GenerationSession s(m, fast_config(), torch::rand({3, 16, 16}), 0);
  CHECK_THROWS_AS(s.step(std::vector<control::ControlPoint>{{16, 0, 1.0f, 0.0f}}), DomainError);
  CHECK_THROWS_AS(s.step(std::vector<control::ControlPoint>{{-1, 0, 1.0f, 0.0f}}), DomainError);
  CHECK_THROWS_AS(sampler::validate_controls({{1, 1, 0, 0}, {1, 1, 1, 1}}, 16, 16), DomainError);
  CHECK(s.frame_index() == 0);
  CHECK_NOTHROW(s.step(std::vector<control::ControlPoint>{}));
  CHECK(s.frame_index() == 1);
}

TEST_CASE("bad first frames and configs are rejected") {
  auto m = random_net(5);
  CHECK_THROWS_AS(sampler::GenerationSession(m, fast_config(), torch::rand({3, 8, 16}), 0), ShapeError);
  CHECK_THROWS_AS(sampler::GenerationSession(m, fast_config(), torch::rand({3, 16, 16}) + 1.5, 0), DomainError);
  CHECK_THROWS_AS(sampler::GenerationSession(m, fast_config(1), torch::rand({3, 16, 16}), 0), ConfigError);
}

TEST_CASE("attention is captured only on request") {
  auto m = random_net(6);
  sampler::GenerationSession s(m, fast_config(), torch::rand({3, 16, 16}), 0);
  s.step();
  CHECK_FALSE(s.last_attention().has_value());
  s.step(std::vector<control::ControlPoint>{{8, 8, 2.0f, 0.0f}}, true);
  REQUIRE(s.last_attention().has_value());
  CHECK(s.last_attention()->weights.size() == 4);
  auto map = net::extract_cross_attention(*s.last_attention(), s.net_config(), 8, 8);
  CHECK(map.weights.sum().item<double>() == doctest::Approx(1.0));
  s.step();
  CHECK_FALSE(s.last_attention().has_value());
}
