#include "testing.hpp"

#include <fstream>

#include "forceworld/clip_io.hpp"
#include "forceworld/errors.hpp"
#include "forceworld/util.hpp"
#include "forceworld/world.hpp"
#include "helpers.hpp"

using namespace forceworld;
using namespace forceworld::world;

namespace {

ObjectState disc(double pi, double pj, double vi, double vj, double r = 3.0) {
  ObjectState o;
  o.shape = Shape::kDisc;
  o.radius = r;
  o.color = {0.9f, 0.2f, 0.2f};
  o.pi = pi;
  o.pj = pj;
  o.vi = vi;
  o.vj = vj;
  return o;
}

WorldConfig free_world() {
  WorldConfig cfg = WorldConfig::interactions();
  cfg.impulse_rate = 0.0;
  return cfg;
}

double momentum_j(const torch::Tensor& states, int k, const std::vector<double>& masses) {
  double p = 0.0;
  for (size_t o = 0; o < masses.size(); ++o) p += masses[o] * states[k][o][3].item<double>();
  return p;
}

double energy(const torch::Tensor& states, int k, const std::vector<double>& masses) {
  double e = 0.0;
  for (size_t o = 0; o < masses.size(); ++o) {
    const double vi = states[k][o][2].item<double>(), vj = states[k][o][3].item<double>();
    e += 0.5 * masses[o] * (vi * vi + vj * vj);
  }
  return e;
}

}  // namespace

TEST_CASE("static scene has zero flow and identical frames") {
  WorldConfig cfg = free_world();
  cfg.min_speed = cfg.max_speed = 0.0;
  Rng rng(1);
  auto clip = simulate(cfg, 6, rng);
  CHECK(clip.flows.abs().max().item<float>() == 0.0f);
  for (int k = 1; k < 6; ++k) CHECK(torch::equal(clip.frames[k], clip.frames[0]));
}

TEST_CASE("rigid translation gives constant flow on the object") {
  WorldConfig cfg = free_world();
  Rng rng(0);
  auto clip = simulate_scene(cfg, {disc(8.0, 8.0, 2.0, 1.0)}, AgentScript(), 4, rng);
  for (int k = 0; k < 3; ++k) {
    auto mask = clip.masks[k][0].to(torch::kBool);
    CHECK(mask.sum().item<int64_t>() > 0);
    CHECK(clip.flows[k][0].masked_select(mask).eq(2.0f).all().item<bool>());
    CHECK(clip.flows[k][1].masked_select(mask).eq(1.0f).all().item<bool>());
    CHECK(clip.flows[k].abs().sum(0).masked_select(~mask).eq(0.0f).all().item<bool>());
  }
}

TEST_CASE("equal discs exchange velocities in a head-on elastic collision") {
  WorldConfig cfg = free_world();
  cfg.substeps = 32;
  Rng rng(0);
  auto clip = simulate_scene(cfg, {disc(16.0, 8.0, 0.0, 1.0), disc(16.0, 22.0, 0.0, -1.0)}, AgentScript(), 12, rng);
  const auto& s = clip.object_states;
  CHECK(s[11][0][3].item<double>() == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(s[11][1][3].item<double>() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(s[11][0][2].item<double>() == doctest::Approx(0.0));
}

TEST_CASE("unequal head-on collision follows the closed-form 1D result") {
  WorldConfig cfg = free_world();
  Rng rng(0);
  const double r1 = 3.0, r2 = 4.0, v1 = 1.5, v2 = -0.5;
  auto clip = simulate_scene(cfg, {disc(16.0, 6.0, 0.0, v1, r1), disc(16.0, 20.0, 0.0, v2, r2)}, AgentScript(), 10, rng);
  const double m1 = r1 * r1, m2 = r2 * r2;
  const double u1 = ((m1 - m2) * v1 + 2.0 * m2 * v2) / (m1 + m2);
  const double u2 = ((m2 - m1) * v2 + 2.0 * m1 * v1) / (m1 + m2);
  const auto& s = clip.object_states;
  CHECK(s[9][0][3].item<double>() == doctest::Approx(u1).epsilon(1e-12));
  CHECK(s[9][1][3].item<double>() == doctest::Approx(u2).epsilon(1e-12));
  const std::vector<double> masses{m1, m2};
  CHECK(std::abs(momentum_j(s, 9, masses) - momentum_j(s, 0, masses)) < 1e-9);
  CHECK(std::abs(energy(s, 9, masses) - energy(s, 0, masses)) < 1e-9);
}

TEST_CASE("free collisions conserve energy between frames") {
  WorldConfig cfg = free_world();
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    auto clip = simulate(cfg, 16, rng);
    std::vector<double> masses;
    for (double r : clip.radii) masses.push_back(r * r);
    const double e0 = energy(clip.object_states, 0, masses);
    for (int k = 1; k < 16; ++k) CHECK(std::abs(energy(clip.object_states, k, masses) - e0) < 1e-9);
  }
}

TEST_CASE("ground-truth flow warps each frame onto the next") {
  for (const auto& cfg : {WorldConfig::interactions(), WorldConfig::pusher()}) {
    for (uint64_t seed = 0; seed < 5; ++seed) {
      Rng rng(seed);
      auto clip = simulate(cfg, 10, rng);
      const int H = cfg.height, W = cfg.width;
      for (int k = 0; k + 1 < 10; ++k) {
        auto owner_next = clip.masks[k + 1].argmax(0);
        auto any_next = clip.masks[k + 1].sum(0);
        for (int i = 0; i < H; ++i) {
          for (int j = 0; j < W; ++j) {
            for (int o = 0; o < clip.n_objects(); ++o) {
              if (!clip.masks[k][o][i][j].item<uint8_t>()) continue;
              const int ti = i + static_cast<int>(clip.flows[k][0][i][j].item<float>());
              const int tj = j + static_cast<int>(clip.flows[k][1][i][j].item<float>());
              if (ti < 0 || ti >= H || tj < 0 || tj >= W) continue;
              if (!any_next[ti][tj].item<uint8_t>() || owner_next[ti][tj].item<int64_t>() != o) continue;
              CHECK(torch::equal(clip.frames[k + 1].index({torch::indexing::Slice(), ti, tj}),
                                 clip.frames[k].index({torch::indexing::Slice(), i, j})));
            }
          }
        }
      }
    }
  }
}

TEST_CASE("masks are disjoint and objects start apart") {
  Rng rng(3);
  for (int n = 0; n < 10; ++n) {
    auto clip = simulate(WorldConfig::pusher(), 4, rng);
    CHECK(clip.masks.sum(1).max().item<uint8_t>() <= 1);
    CHECK(clip.agent_index == clip.n_objects() - 1);
    auto s = clip.object_states[0];
    for (int a = 0; a < clip.n_objects(); ++a) {
      for (int b = a + 1; b < clip.n_objects(); ++b) {
        const double d = std::hypot(s[a][0].item<double>() - s[b][0].item<double>(),
                                    s[a][1].item<double>() - s[b][1].item<double>());
        CHECK(d >= clip.radii[a] + clip.radii[b]);
      }
    }
  }
}

TEST_CASE("simulation is deterministic in the seed") {
  Rng a(42), b(42), c(43);
  auto x = simulate(WorldConfig::pusher(), 8, a);
  auto y = simulate(WorldConfig::pusher(), 8, b);
  auto z = simulate(WorldConfig::pusher(), 8, c);
  CHECK(torch::equal(x.frames, y.frames));
  CHECK(torch::equal(x.flows, y.flows));
  CHECK(torch::equal(x.object_states, y.object_states));
  CHECK_FALSE(torch::equal(x.frames, z.frames));
}

TEST_CASE("configuration errors") {
  WorldConfig cfg = WorldConfig::interactions();
  cfg.height = cfg.width = 8;
  cfg.min_objects = cfg.max_objects = 4;
  Rng rng(0);
  CHECK_THROWS_AS(simulate(cfg, 4, rng), ConfigError);
  CHECK_THROWS_AS(simulate(WorldConfig::interactions(), 2, rng), DomainError);
  WorldConfig close = WorldConfig::interactions();
  close.palette[1] = close.palette[0];
  CHECK_THROWS_AS(close.validate(), ConfigError);
  CHECK_THROWS_AS(WorldConfig::preset_named("bair"), ConfigError);
}

TEST_CASE("world config JSON round-trips") {
  WorldConfig cfg = WorldConfig::pusher();
  cfg.height = 40;
  cfg.texture_contrast = 0.2;
  nlohmann::json j = cfg;
  auto back = j.get<WorldConfig>();
  CHECK(nlohmann::json(back) == j);
}

TEST_CASE("clip container round-trips bit-identically") {
  fwtest::TempDir dir;
  Rng rng(5);
  auto cfg = WorldConfig::pusher();
  auto clip = simulate(cfg, 5, rng);
  write_clip(clip, cfg, dir / "c");
  auto back = read_clip(dir / "c");
  CHECK(torch::equal(back.frames, clip.frames));
  CHECK(torch::equal(back.flows, clip.flows));
  CHECK(torch::equal(back.masks, clip.masks));
  CHECK(torch::equal(back.object_states, clip.object_states));
  CHECK(back.radii == clip.radii);
  CHECK(back.agent_index == clip.agent_index);
}

TEST_CASE("truncated or inconsistent clips raise format errors") {
  fwtest::TempDir dir;
  Rng rng(6);
  auto cfg = WorldConfig::interactions();
  auto clip = simulate(cfg, 4, rng);
  write_clip(clip, cfg, dir / "c");
  const auto frames = dir / "c" / "frames.bin";
  std::filesystem::resize_file(frames, std::filesystem::file_size(frames) - 7);
  CHECK_THROWS_AS(read_clip(dir / "c"), FormatError);
  try {
    read_clip(dir / "c");
  } catch (const FormatError& e) {
    CHECK(e.offset() >= 0);
  }

  write_clip(clip, cfg, dir / "d");
  auto manifest = nlohmann::json::parse(util::read_text(dir / "d" / "manifest.json"));
  manifest["fields"]["flows"]["shape"][0] = 7;
  util::write_text_atomic(dir / "d" / "manifest.json", manifest.dump());
  CHECK_THROWS_AS(read_clip(dir / "d"), FormatError);
}

TEST_CASE("datasets derive per-clip streams and a stable fingerprint") {
  fwtest::TempDir dir;
  auto cfg = WorldConfig::pusher();
  auto a = make_dataset(cfg, 3, 4, 7, dir / "a");
  auto b = make_dataset(cfg, 3, 4, 7, dir / "b");
  CHECK(a.clips.size() == 3);
  CHECK(dataset_fingerprint(a) == dataset_fingerprint(b));
  auto idx = read_dataset_index(dir / "a");
  auto c0 = load_clip(idx, 0), c1 = load_clip(idx, 1);
  CHECK_FALSE(torch::equal(c0.frames, c1.frames));
  CHECK(torch::equal(load_all_clips(idx)[2].frames, load_clip(b, 2).frames));
}
