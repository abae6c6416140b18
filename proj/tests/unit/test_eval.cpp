#include "testing.hpp"

#include <cmath>

#include "../common/brute_match.hpp"
#include "forceworld/errors.hpp"
#include "forceworld/eval.hpp"
#include "forceworld/world.hpp"

using namespace forceworld;

TEST_CASE("block matching equals the exhaustive oracle") {
  torch::manual_seed(1);
  for (int trial = 0; trial < 40; ++trial) {
    const int levels = 1 + trial % 4;  // few levels produce many ties
    auto a = torch::randint(0, levels + 1, {3, 12, 12}).to(torch::kFloat32) / levels;
    auto b = torch::randint(0, levels + 1, {3, 12, 12}).to(torch::kFloat32) / levels;
    if (trial % 2 == 0) b = torch::roll(a, {1, -2}, {1, 2});
    eval::BlockMatchConfig cfg{trial % 3 == 0 ? 3 : 5, 1 + trial % 5};
    auto got = eval::block_match_flow(a, b, cfg);
    auto want = fwtest::brute_force_flow(a, b, cfg.block, cfg.radius);
    REQUIRE(torch::equal(got, want));
  }
}

TEST_CASE("block matching on identical, flat and shifted frames") {
  torch::manual_seed(2);
  auto a = torch::rand({3, 20, 20});
  CHECK(eval::block_match_flow(a, a).abs().max().item<double>() == 0.0);
  auto flat = torch::full({3, 20, 20}, 0.4);
  CHECK(eval::block_match_flow(flat, flat * 1.0).abs().max().item<double>() == 0.0);

  // Content moving by (+2, +1) appears at b[i + 2][j + 1] = a[i][j].
  auto b = torch::roll(a, {2, 1}, {1, 2});
  auto flow = eval::block_match_flow(a, b);
  auto interior = flow.index({torch::indexing::Slice(), torch::indexing::Slice(4, 14), torch::indexing::Slice(4, 14)});
  CHECK((interior[0] == 2).all().item<bool>());
  CHECK((interior[1] == 1).all().item<bool>());
}

TEST_CASE("block matching argument errors") {
  auto a = torch::rand({3, 8, 8});
  CHECK_THROWS_AS(eval::block_match_flow(a, a, {5, 4}), ConfigError);
  CHECK_THROWS_AS(eval::block_match_flow(a, a, {4, 2}), ConfigError);
  CHECK_THROWS_AS(eval::block_match_flow(a, torch::rand({3, 8, 9})), ShapeError);
}

TEST_CASE("local and global errors on hand-built flows") {
  auto flow = torch::zeros({2, 16, 16});
  eval::ProbeSpec p;
  p.i = 8;
  p.j = 8;
  p.di = 2.0;
  p.dj = 0.0;
  p.r_loc = 2.0;
  p.r_glob = 4.0;
  // Zero flow: no motion at all.
  auto le = eval::local_error(flow, p);
  CHECK(le.rel_l2 == doctest::Approx(1.0));
  CHECK(le.cosine_error == doctest::Approx(1.0));
  CHECK(eval::global_error(flow, p) == 0.0);

  // Uniform flow equal to the control everywhere.
  flow[0].fill_(2.0);
  le = eval::local_error(flow, p);
  CHECK(le.rel_l2 == doctest::Approx(0.0));
  CHECK(le.cosine_error == doctest::Approx(0.0));
  CHECK(eval::global_error(flow, p) == doctest::Approx(2.0));

  // Perpendicular motion at the probe, background at rest.
  flow.zero_();
  flow[1].fill_(3.0);
  flow.index_put_({torch::indexing::Slice(), torch::indexing::Slice(0, 2)}, 0.0);
  le = eval::local_error(flow, p);
  CHECK(le.cosine_error == doctest::Approx(1.0));
  CHECK(le.rel_l2 == doctest::Approx(std::sqrt(13.0) / 2.0));

  // Opposite direction gives cosine error 2.
  flow.zero_();
  flow[0].fill_(-1.0);
  CHECK(eval::local_error(flow, p).cosine_error == doctest::Approx(2.0));

  // A disc of motion inside r_glob leaves the global error at zero.
  flow.zero_();
  for (int i = 0; i < 16; ++i) {
    for (int j = 0; j < 16; ++j) {
      if ((i - 8) * (i - 8) + (j - 8) * (j - 8) <= 16) flow[0][i][j] = 5.0;
    }
  }
  CHECK(eval::global_error(flow, p) == 0.0);

  p.di = 0.0;
  CHECK_THROWS_AS(eval::local_error(flow, p), DomainError);
  p.di = 1.0;
  p.r_glob = 100.0;
  CHECK_THROWS_AS(eval::global_error(flow, p), DomainError);
  p.i = 20;
  CHECK_THROWS_AS(eval::local_error(flow, p), DomainError);
}

TEST_CASE("errors are invariant to the control's scale along its direction") {
  torch::manual_seed(3);
  auto flow = torch::randn({2, 16, 16});
  eval::ProbeSpec p;
  p.i = 7;
  p.j = 9;
  p.di = 1.0;
  p.dj = -2.0;
  const double c1 = eval::local_error(flow, p).cosine_error;
  p.di *= 3.5;
  p.dj *= 3.5;
  CHECK(eval::local_error(flow, p).cosine_error == doctest::Approx(c1).epsilon(1e-12));
  CHECK(eval::cosine_error(0, 0, 1, 0) == 1.0);
  CHECK(eval::cosine_error(1, 1, 2, 2) == doctest::Approx(0.0));
}

TEST_CASE("psnr and ssim") {
  torch::manual_seed(4);
  auto a = torch::rand({3, 16, 16});
  CHECK(eval::psnr(a, a) == 99.0);
  CHECK(eval::ssim(a, a) == doctest::Approx(1.0));
  // Constant offset 0.1: mse 0.01, so 20 dB.
  auto z = torch::full({3, 8, 8}, 0.2);
  CHECK(eval::psnr(z, z + 0.1) == doctest::Approx(20.0).epsilon(1e-6));
  // Two flat images: ssim reduces to the luminance term.
  const double mu_a = 0.2, mu_b = 0.3, c1 = 0.0001;
  const double want = (2 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1);
  CHECK(eval::ssim(z, z + 0.1) == doctest::Approx(want).epsilon(1e-6));
  CHECK(eval::ssim(a, torch::rand({3, 16, 16})) < 0.5);
  CHECK_THROWS_AS(eval::psnr(a, z), ShapeError);
}

TEST_CASE("quantiles and iou") {
  auto q = eval::quantiles({4, 1, 3, 2, 5});
  CHECK(q.p25 == 2.0);
  CHECK(q.p50 == 3.0);
  CHECK(q.p75 == 4.0);
  q = eval::quantiles({0, 1});
  CHECK(q.p25 == doctest::Approx(0.25));
  CHECK(q.p50 == doctest::Approx(0.5));
  CHECK(eval::quantiles({7}).p75 == 7.0);
  CHECK_THROWS_AS(eval::quantiles({}), DomainError);

  auto a = torch::zeros({4, 4}, torch::kBool);
  auto b = a.clone();
  CHECK(eval::iou(a, b) == 1.0);
  a.index_put_({torch::indexing::Slice(0, 2)}, true);
  b.index_put_({torch::indexing::Slice(1, 3)}, true);
  CHECK(eval::iou(a, b) == doctest::Approx(4.0 / 12.0));
}

namespace {

// Scene with two static objects far apart; a poke moves the object under the
// poked pixel rigidly by the rounded displacement.
struct PokeScene {
  world::WorldConfig cfg;
  std::vector<world::ObjectState> objects;

  PokeScene() {
    cfg = world::WorldConfig::interactions();
    cfg.height = 32;
    cfg.width = 32;
    world::ObjectState a;
    a.shape = world::Shape::kSquare;
    a.radius = 4.5;
    a.color = cfg.palette[0];
    a.pi = 10;
    a.pj = 10;
    world::ObjectState b;
    b.shape = world::Shape::kDisc;
    b.radius = 4.5;
    b.color = cfg.palette[2];
    b.pi = 22;
    b.pj = 21;
    objects = {a, b};
  }

  std::pair<torch::Tensor, torch::Tensor> frame() const { return world::render(cfg, objects); }

  eval::FrameGenerator generator() const {
    return [this](const torch::Tensor&, const sampler::Controls& controls, uint64_t) {
      auto moved = objects;
      auto owner = world::render(cfg, objects).second;
      for (const auto& p : controls.value_or(std::vector<control::ControlPoint>{})) {
        const int k = owner[p.i][p.j].item<int>();
        if (k < 0) continue;
        moved[k].pi += p.di;
        moved[k].pj += p.dj;
      }
      return world::render(cfg, moved).first;
    };
  }
};

}  // namespace

TEST_CASE("poke segmentation recovers the simulator mask") {
  PokeScene scene;
  auto [frame, owner] = scene.frame();
  auto gen = scene.generator();
  eval::PokeConfig cfg;
  Rng rng(12);
  for (int k = 0; k < 2; ++k) {
    const auto& o = scene.objects[k];
    auto mask = eval::poke_segment(gen, frame, static_cast<int>(std::lround(o.pi)), static_cast<int>(std::lround(o.pj)),
                                   cfg, rng);
    auto truth = owner == k;
    // "Up to boundary pixels": ignore the band the matcher's block straddles.
    const int h = cfg.matcher.block / 2;
    auto keep = ~(~eval::erode(~truth, h) & ~eval::erode(truth, h));
    const double score = eval::iou(mask & keep, truth & keep);
    const double whole = eval::iou(mask, truth);
    MESSAGE("object " << k << " iou " << score << ", without the band " << whole);
    CHECK(whole >= 0.7);  // loose guard on the full mask
    CHECK(score >= 0.9);
  }

  // A threshold no cosine can exceed yields an empty mask.
  cfg.similarity_threshold = 1.0;
  auto empty = eval::poke_segment(gen, frame, 10, 10, cfg, rng);
  CHECK(empty.sum().item<int64_t>() == 0);

  cfg = {};
  cfg.n_repeats = 0;
  CHECK_THROWS_AS(eval::poke_segment(gen, frame, 10, 10, cfg, rng), DomainError);
  cfg = {};
  CHECK_THROWS_AS(eval::poke_segment(gen, frame, 40, 10, cfg, rng), DomainError);
}

TEST_CASE("more repeats never shrink the poke mask") {
  PokeScene scene;
  auto frame = scene.frame().first;
  auto gen = scene.generator();
  eval::PokeConfig one;
  one.n_repeats = 1;
  eval::PokeConfig three;
  three.n_repeats = 3;
  Rng r1(5), r3(5);
  auto m1 = eval::poke_segment(gen, frame, 22, 21, one, r1);
  auto m3 = eval::poke_segment(gen, frame, 22, 21, three, r3);
  CHECK((m1 & ~m3).sum().item<int64_t>() == 0);
}

TEST_CASE("agreeing pixels") {
  auto flow = torch::zeros({2, 2, 2});
  flow[0][0][0] = 2.0;   // aligned
  flow[1][0][1] = 2.0;   // perpendicular
  flow[0][1][0] = 0.5;   // aligned but too small
  flow[0][1][1] = -2.0;  // opposite
  auto m = eval::agreeing_pixels(flow, 2.0, 0.0, 0.5);
  CHECK(m[0][0].item<bool>());
  CHECK_FALSE(m[0][1].item<bool>());
  CHECK_FALSE(m[1][0].item<bool>());
  CHECK_FALSE(m[1][1].item<bool>());
  CHECK_THROWS_AS(eval::agreeing_pixels(flow, 0.0, 0.0, 0.5), DomainError);
}

TEST_CASE("probe sets skip the agent and round trip through JSON") {
  auto w = world::WorldConfig::pusher();
  std::vector<world::VideoClip> clips;
  for (int k = 0; k < 6; ++k) {
    Rng rng(100 + k);
    clips.push_back(world::simulate(w, 3, rng));
  }
  eval::ProbeSetConfig cfg;
  cfg.n_probes = 8;
  cfg.seed = 4;
  auto probes = eval::make_probes(clips, cfg);
  REQUIRE(probes.size() == 8);
  for (const auto& p : probes) {
    const auto& clip = clips[p.clip];
    CHECK(p.frame == 0);
    const double mag = std::hypot(p.di, p.dj);
    CHECK(mag >= cfg.min_magnitude);
    CHECK(mag <= cfg.max_magnitude);
    bool on_passive = false;
    for (int64_t o = 0; o < clip.n_objects(); ++o) {
      if (clip.masks[0][o][p.i][p.j].item<uint8_t>() != 0) on_passive = (o != clip.agent_index);
    }
    CHECK(on_passive);
  }
  auto back = eval::probes_from_json(eval::probes_to_json(probes));
  CHECK(nlohmann::json(back) == nlohmann::json(probes));
  CHECK(eval::make_probes(clips, cfg).size() == 8);
  CHECK(nlohmann::json(eval::make_probes(clips, cfg)) == nlohmann::json(probes));
  auto bad = eval::probes_to_json(probes);
  bad["format_version"] = 99;
  CHECK_THROWS(eval::probes_from_json(bad));
}

TEST_CASE("probe evaluation with an oracle generator scores perfectly") {
  PokeScene scene;
  auto frame = scene.frame().first;
  world::VideoClip clip;
  clip.frames = frame.unsqueeze(0);
  eval::ProbeSpec p;
  p.image_id = "scene";
  p.i = 10;
  p.j = 10;
  p.di = 2.0;
  p.dj = 1.0;
  auto rows = eval::evaluate_probes(scene.generator(), {clip}, {p}, {});
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].local.cosine_error < 0.02);
  CHECK(rows[0].global < 0.1);
  auto report = eval::probe_report(rows, {});
  CHECK(report.at("aggregate").at("n") == 1);
  CHECK(report.at("rows").size() == 1);
}

TEST_CASE("erosion") {
  auto m = torch::zeros({9, 9}, torch::kBool);
  m.index_put_({torch::indexing::Slice(2, 7), torch::indexing::Slice(2, 7)}, true);
  auto e = eval::erode(m, 1);
  CHECK(e.sum().item<int64_t>() == 9);
  CHECK(e[3][3].item<bool>());
  CHECK_FALSE(e[2][2].item<bool>());
  CHECK(torch::equal(eval::erode(m, 0), m));
  CHECK(eval::erode(m, 3).sum().item<int64_t>() == 0);
  // The frame border does not erode.
  auto full = torch::ones({4, 4}, torch::kBool);
  CHECK(torch::equal(eval::erode(full, 2), full));
  CHECK_THROWS_AS(eval::erode(m, -1), DomainError);
}
