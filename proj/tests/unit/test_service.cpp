#include "testing.hpp"

#include <httplib.h>

#include <cstring>

#include "forceworld/checkpoint.hpp"
#include "forceworld/errors.hpp"
#include "forceworld/image.hpp"
#include "forceworld/service.hpp"
#include "forceworld/util.hpp"
#include "helpers.hpp"

using namespace forceworld;
using nlohmann::json;

namespace {

struct Fixture {
  fwtest::TempDir dir;
  std::filesystem::path ckpt_path;
  std::filesystem::path data_path;
  service::Clock::time_point fake_now = service::Clock::now();

  Fixture() {
    torch::manual_seed(21);
    net::VectorFieldRegressor m(fwtest::tiny_net_config());
    {
      torch::NoGradGuard ng;
      m->output_head()->weight.normal_(0.0, 0.3);
    }
    flow::FlowMatchConfig fc;
    fc.n_ode_steps = 3;
    ckpt_path = dir / "tiny.fwa";
    ckpt::save_model(ckpt_path, m, fc);

    auto w = world::WorldConfig::interactions();
    w.height = 16;
    w.width = 16;
    w.min_objects = 1;
    w.max_objects = 2;
    w.min_radius = 2.5;
    w.max_radius = 3.0;
    data_path = dir / "data";
    world::make_dataset(w, 2, 3, 1, data_path);
  }

  service::ServiceConfig config(int max_sessions = 8) {
    service::ServiceConfig c;
    c.max_sessions = max_sessions;
    c.idle_timeout = std::chrono::seconds(60);
    c.now = [this] { return fake_now; };
    return c;
  }
};

struct Running {
  service::SessionService svc;
  service::HttpServer http;
  std::unique_ptr<httplib::Client> client;

  Running(Fixture& f, service::ServiceConfig cfg) : svc(std::move(cfg)), http(svc) {
    svc.add_checkpoint("tiny", f.ckpt_path);
    svc.set_dataset(f.data_path);
    client = std::make_unique<httplib::Client>("127.0.0.1", http.start_background());
  }

  std::pair<int, json> post(const std::string& path, const json& body) {
    auto res = client->Post(path, body.dump(), "application/json");
    REQUIRE(res);
    return {res->status, json::parse(res->body)};
  }
  std::pair<int, json> get(const std::string& path) {
    auto res = client->Get(path);
    REQUIRE(res);
    return {res->status, json::parse(res->body)};
  }
  std::string create(uint64_t seed = 0) {
    auto [status, body] = post("/api/sessions", {{"init", {{"dataset_index", 0}}}, {"seed", seed}});
    REQUIRE(status == 201);
    return body.at("session_id");
  }
};

}  // namespace

TEST_CASE("session creation over HTTP") {
  Fixture f;
  Running r(f, f.config());
  auto [status, body] = r.post("/api/sessions", {{"checkpoint", "tiny"}, {"init", {{"dataset_index", 1}, {"frame", 2}}}});
  CHECK(status == 201);
  CHECK(body.at("frame_index") == 0);
  CHECK(body.at("session_id").get<std::string>().size() == 32);
  auto frame0 = image::decode_png(util::base64_decode(body.at("frame_0").get<std::string>()));
  CHECK(frame0.sizes() == c10::IntArrayRef({3, 16, 16}));
  CHECK(body.at("fingerprint") == ckpt::file_fingerprint(f.ckpt_path));

  // Uploaded first frame.
  auto png = util::base64_encode(image::encode_png(torch::rand({3, 16, 16})));
  CHECK(r.post("/api/sessions", {{"init", {{"png", png}}}}).first == 201);

  CHECK(r.post("/api/sessions", {{"checkpoint", "nope"}}).first == 404);
  auto [s_bad, b_bad] = r.post("/api/sessions", {{"init", {{"png", util::base64_encode(image::encode_png(torch::rand({3, 8, 8})))}}}});
  CHECK(s_bad == 422);
  CHECK(b_bad.at("detail").at("expected") == json({16, 16}));
  CHECK(b_bad.contains("fingerprint"));
  CHECK(r.post("/api/sessions", {{"init", {{"png", "bm90IGEgcG5n"}}}}).first == 422);
  CHECK(r.post("/api/sessions", {{"init", {{"dataset_index", 9}}}}).first == 422);
  auto res = r.client->Post("/api/sessions", "{not json", "application/json");
  REQUIRE(res);
  CHECK(res->status == 422);
}

TEST_CASE("stepping advances the frame index and validates controls") {
  Fixture f;
  Running r(f, f.config());
  const auto id = r.create();
  auto [s1, b1] = r.post("/api/sessions/" + id + "/step", {{"controls", nullptr}});
  CHECK(s1 == 200);
  CHECK(b1.at("frame_index") == 1);
  CHECK(b1.at("timing_ms").get<double>() >= 0.0);
  auto frame = image::decode_png(util::base64_decode(b1.at("frame").get<std::string>()));
  CHECK(frame.sizes() == c10::IntArrayRef({3, 16, 16}));

  auto [s2, b2] = r.post("/api/sessions/" + id + "/step", {{"controls", {{{"i", 3}, {"j", 4}, {"di", 1.0}, {"dj", 0.0}}}}});
  CHECK(s2 == 200);
  CHECK(b2.at("frame_index") == 2);

  CHECK(r.post("/api/sessions/" + id + "/step", {{"controls", {{{"i", 16}, {"j", 0}, {"di", 1.0}, {"dj", 0.0}}}}}).first ==
        422);
  CHECK(r.post("/api/sessions/" + id + "/step", {{"controls", {{{"i", 1}, {"j", 0}, {"di", 1.0}, {"dj", 0.0}, {"x", 1}}}}})
            .first == 422);
  CHECK(r.post("/api/sessions/" + id + "/step", {{"controls", 5}}).first == 422);
  CHECK(r.get("/api/sessions/" + id).second.at("frame_index") == 2);
  CHECK(r.post("/api/sessions/unknown/step", json::object()).first == 404);
}

TEST_CASE("raw tensor responses") {
  Fixture f;
  Running r(f, f.config());
  const auto id = r.create();
  httplib::Headers h{{"Accept", "application/octet-stream"}};
  auto res = r.client->Post("/api/sessions/" + id + "/step", h, "{}", "application/json");
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(res->get_header_value("X-Frame-Shape") == "3,16,16");
  CHECK(res->get_header_value("X-Frame-Dtype") == "float32");
  CHECK(res->get_header_value("X-Frame-Index") == "1");
  REQUIRE(res->body.size() == 3 * 16 * 16 * sizeof(float));
  auto t = torch::empty({3, 16, 16});
  std::memcpy(t.data_ptr(), res->body.data(), res->body.size());
  CHECK(t.min().item<double>() >= 0.0);
  CHECK(t.max().item<double>() <= 1.0);
}

TEST_CASE("attention needs a capturing step and covers the visual grid") {
  Fixture f;
  Running r(f, f.config());
  const auto id = r.create();
  CHECK(r.get("/api/sessions/" + id + "/attention?i=4&j=4").first == 409);
  r.post("/api/sessions/" + id + "/step", {{"controls", {{{"i", 4}, {"j", 4}, {"di", 1.0}, {"dj", 1.0}}}},
                                           {"capture_attention", true}});
  auto [status, body] = r.get("/api/sessions/" + id + "/attention?i=4&j=4");
  CHECK(status == 200);
  const auto cfg = fwtest::tiny_net_config();
  CHECK(body.at("grid_h") == cfg.grid_h());
  CHECK(body.at("grid_w") == cfg.grid_w());
  double total = 0.0;
  for (const auto& row : body.at("weights")) {
    CHECK(row.size() == static_cast<size_t>(cfg.grid_w()));
    for (const auto& v : row) total += v.get<double>();
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
  auto [s_ctl, b_ctl] = r.get("/api/sessions/" + id + "/attention?i=4&j=4&query=visual");
  CHECK(s_ctl == 200);
  CHECK(b_ctl.at("grid_h") == cfg.control_grid);
  CHECK(r.get("/api/sessions/" + id + "/attention?i=40&j=4").first == 422);
  CHECK(r.get("/api/sessions/" + id + "/attention?i=4&j=4&query=zzz").first == 422);
  CHECK(r.get("/api/sessions/" + id + "/attention?i=a&j=4").first == 422);
}

TEST_CASE("segmentation leaves the timeline untouched") {
  Fixture f;
  Running r(f, f.config());
  const auto id = r.create();
  r.post("/api/sessions/" + id + "/step", json::object());
  auto [status, body] = r.post("/api/sessions/" + id + "/segment", {{"i", 8}, {"j", 8}, {"seed", 3}});
  CHECK(status == 200);
  CHECK(body.at("frame_index") == 1);
  auto mask = service::decode_mask_rle(body);
  CHECK(mask.sizes() == c10::IntArrayRef({16, 16}));
  CHECK(mask.sum().item<int64_t>() == body.at("area").get<int64_t>());
  CHECK(r.get("/api/sessions/" + id).second.at("frame_index") == 1);

  // Same seed, same mask.
  CHECK(r.post("/api/sessions/" + id + "/segment", {{"i", 8}, {"j", 8}, {"seed", 3}}).second.at("counts") ==
        body.at("counts"));

  auto [s_empty, b_empty] = r.post("/api/sessions/" + id + "/segment", {{"i", 8}, {"j", 8}, {"threshold", 1.0}});
  CHECK(s_empty == 200);
  CHECK(b_empty.at("area") == 0);
  CHECK(r.post("/api/sessions/" + id + "/segment", {{"i", 80}, {"j", 8}}).first == 422);
  CHECK(r.post("/api/sessions/" + id + "/segment", {{"i", 8}}).first == 422);
  CHECK(r.post("/api/sessions/" + id + "/segment", {{"i", 8}, {"j", 8}, {"repeats", 0}}).first == 422);
}

TEST_CASE("sessions are isolated") {
  Fixture f;
  Running r(f, f.config());
  const auto a = r.create(1);
  const auto b = r.create(1);
  auto fa = r.post("/api/sessions/" + a + "/step", json::object()).second.at("frame");
  r.post("/api/sessions/" + a + "/step", json::object());
  r.post("/api/sessions/" + a + "/step", json::object());
  CHECK(r.get("/api/sessions/" + b).second.at("frame_index") == 0);
  // Same seed and start: b's first frame equals a's first frame despite a running ahead.
  auto fb = r.post("/api/sessions/" + b + "/step", json::object()).second.at("frame");
  CHECK(fa == fb);
}

TEST_CASE("idle sessions expire and the table is capped") {
  Fixture f;
  Running r(f, f.config(2));
  const auto a = r.create();
  f.fake_now += std::chrono::seconds(10);
  const auto b = r.create();
  f.fake_now += std::chrono::seconds(10);
  r.post("/api/sessions/" + a + "/step", json::object());  // a is now most recent
  f.fake_now += std::chrono::seconds(10);
  const auto c = r.create();  // evicts b, the least recently used
  CHECK(r.svc.session_count() == 2);
  CHECK(r.get("/api/sessions/" + b).first == 404);
  CHECK(r.get("/api/sessions/" + a).first == 200);

  f.fake_now += std::chrono::seconds(61);
  CHECK(r.get("/api/sessions/" + c).first == 404);
  CHECK(r.svc.session_count() == 0);
}

TEST_CASE("health and schema endpoints") {
  Fixture f;
  Running r(f, f.config());
  auto [status, body] = r.get("/api/health");
  CHECK(status == 200);
  CHECK(body.at("status") == "ok");
  CHECK(body.at("fingerprint") == r.svc.fingerprint());
  CHECK(body.at("checkpoints").at("tiny") == ckpt::file_fingerprint(f.ckpt_path));
  auto [s2, schema] = r.get("/api/schema/control");
  CHECK(s2 == 200);
  CHECK(schema.at("oneOf").is_array());
  schema.erase("fingerprint");
  CHECK(schema == service::control_schema());
}

TEST_CASE("mask run-length encoding round trips") {
  torch::manual_seed(8);
  for (int k = 0; k < 20; ++k) {
    auto m = torch::rand({7, 9}) > (k / 20.0);
    auto rle = service::encode_mask_rle(m);
    CHECK(torch::equal(service::decode_mask_rle(rle), m));
    CHECK(rle.at("area") == m.sum().item<int64_t>());
  }
  auto bad = service::encode_mask_rle(torch::ones({2, 2}, torch::kBool));
  bad["counts"].push_back(3);
  CHECK_THROWS_AS(service::decode_mask_rle(bad), FormatError);
}
