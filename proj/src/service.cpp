#include "forceworld/service.hpp"

#include <torch/torch.h>

#include <iostream>
#include <random>
#include <thread>

#include "forceworld/errors.hpp"
#include "forceworld/eval.hpp"
#include "forceworld/image.hpp"
#include "forceworld/util.hpp"
#include "httplib.h"

namespace forceworld::service {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char kControlSchemaText[] =
#include "forceworld/control_schema.inc"
    ;

std::string random_id() {
  static std::mutex mu;
  static std::random_device rd;
  std::lock_guard<std::mutex> lock(mu);
  return util::hex64((static_cast<uint64_t>(rd()) << 32) ^ rd()) + util::hex64((static_cast<uint64_t>(rd()) << 32) ^ rd());
}

int get_int(const json& j, const char* key, int fallback) {
  if (!j.contains(key)) return fallback;
  if (!j.at(key).is_number_integer()) throw ApiError(422, std::string("'") + key + "' must be an integer");
  return j.at(key).get<int>();
}

std::vector<control::ControlPoint> parse_controls(const json& j, int height, int width) {
  std::vector<control::ControlPoint> points;
  if (!j.is_array()) throw ApiError(422, "controls must be an array or null");
  try {
    points = j.get<std::vector<control::ControlPoint>>();
    sampler::validate_controls(points, height, width);
  } catch (const DomainError& e) {
    throw ApiError(422, e.what(), json{{"height", height}, {"width", width}});
  }
  return points;
}

}  // namespace

const json& control_schema() {
  static const json schema = json::parse(kControlSchemaText);
  return schema;
}

json encode_mask_rle(const torch::Tensor& mask) {
  if (mask.dim() != 2) throw ShapeError("mask must be (H, W)");
  auto m = mask.to(torch::kBool).contiguous();
  const auto* p = m.data_ptr<bool>();
  std::vector<int64_t> runs;
  bool current = false;
  int64_t run = 0;
  for (int64_t k = 0; k < m.numel(); ++k) {
    if (p[k] != current) {
      runs.push_back(run);
      run = 0;
      current = p[k];
    }
    ++run;
  }
  runs.push_back(run);
  return json{{"height", m.size(0)}, {"width", m.size(1)}, {"counts", runs}, {"area", m.sum().item<int64_t>()}};
}

torch::Tensor decode_mask_rle(const json& rle) {
  const int64_t h = rle.at("height").get<int64_t>(), w = rle.at("width").get<int64_t>();
  auto mask = torch::zeros({h * w}, torch::kBool);
  auto* p = mask.data_ptr<bool>();
  int64_t pos = 0;
  bool value = false;
  for (const auto& c : rle.at("counts")) {
    const auto n = c.get<int64_t>();
    if (n < 0 || pos + n > h * w) throw FormatError("mask run lengths exceed the mask size");
    for (int64_t k = 0; k < n; ++k) p[pos + k] = value;
    pos += n;
    value = !value;
  }
  if (pos != h * w) throw FormatError("mask run lengths do not cover the mask");
  return mask.view({h, w});
}

SessionService::SessionService(ServiceConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.max_sessions < 1) throw ConfigError("max_sessions must be >= 1");
  started_ = cfg_.now();
}

void SessionService::add_checkpoint(const std::string& name, const fs::path& archive) {
  auto b = ckpt::load_model(archive);
  std::lock_guard<std::mutex> lock(mu_);
  checkpoints_[name] = std::move(b);
}

void SessionService::set_dataset(const fs::path& root) {
  auto index = world::read_dataset_index(root);
  std::lock_guard<std::mutex> lock(mu_);
  dataset_ = std::move(index);
}

std::string SessionService::fingerprint() const {
  uint64_t h = util::kFnvOffset;
  for (const auto& [name, b] : checkpoints_) h = util::fnv1a(name + ":" + b.fingerprint + ";", h);
  return util::hex64(h);
}

const ckpt::ModelBundle& SessionService::bundle(const std::string& name) const {
  auto it = checkpoints_.find(name);
  if (it == checkpoints_.end()) throw ApiError(404, "unknown checkpoint '" + name + "'");
  return it->second;
}

sampler::SessionConfig SessionService::session_config(const ckpt::ModelBundle& b) const {
  sampler::SessionConfig s;
  s.flow = b.flow_cfg;
  if (cfg_.ode_steps > 0) s.flow.n_ode_steps = cfg_.ode_steps;
  s.max_history = cfg_.max_history;
  return s;
}

size_t SessionService::evict_idle() {
  std::lock_guard<std::mutex> lock(mu_);
  const auto now = cfg_.now();
  size_t removed = 0;
  for (auto it = sessions_.begin(); it != sessions_.end();) {
    if (now - it->second->last_active > cfg_.idle_timeout) {
      it = sessions_.erase(it);
      ++removed;
    } else {
      ++it;
    }
  }
  return removed;
}

size_t SessionService::session_count() {
  std::lock_guard<std::mutex> lock(mu_);
  return sessions_.size();
}

std::shared_ptr<SessionService::Record> SessionService::find(const std::string& id, bool touch) {
  evict_idle();
  std::lock_guard<std::mutex> lock(mu_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) throw ApiError(404, "unknown session '" + id + "'");
  if (touch) it->second->last_active = cfg_.now();
  return it->second;
}

json SessionService::create_session(const json& request) {
  evict_idle();
  std::string name;
  if (request.contains("checkpoint") && !request.at("checkpoint").is_null()) {
    name = request.at("checkpoint").get<std::string>();
  } else if (checkpoints_.size() == 1) {
    name = checkpoints_.begin()->first;
  } else {
    throw ApiError(422, "request must name a checkpoint");
  }
  const auto& b = bundle(name);
  const auto& nc = b.net_cfg;
  const json init = request.value("init", json::object());
  torch::Tensor frame;
  json meta{{"checkpoint", name}, {"height", nc.height}, {"width", nc.width}};
  if (init.contains("png")) {
    try {
      frame = image::decode_png(util::base64_decode(init.at("png").get<std::string>()));
    } catch (const std::exception& e) {
      throw ApiError(422, std::string("bad frame: ") + e.what());
    }
    if (frame.size(1) != nc.height || frame.size(2) != nc.width) {
      throw ApiError(422, "frame is " + std::to_string(frame.size(1)) + "x" + std::to_string(frame.size(2)) +
                              ", model expects " + std::to_string(nc.height) + "x" + std::to_string(nc.width),
                     json{{"got", {frame.size(1), frame.size(2)}}, {"expected", {nc.height, nc.width}}});
    }
    meta["init"] = "upload";
  } else {
    if (!dataset_) throw ApiError(422, "no dataset configured; upload a frame instead");
    const int idx = get_int(init, "dataset_index", 0);
    const int f = get_int(init, "frame", 0);
    if (idx < 0 || idx >= static_cast<int>(dataset_->clips.size())) {
      throw ApiError(422, "dataset_index out of range", json{{"n_clips", dataset_->clips.size()}});
    }
    auto clip = world::load_clip(*dataset_, idx);
    if (f < 0 || f >= clip.n_frames()) throw ApiError(422, "frame out of range");
    frame = clip.frames[f];
    if (frame.size(1) != nc.height || frame.size(2) != nc.width) {
      throw ApiError(422, "dataset resolution does not match the model",
                     json{{"got", {frame.size(1), frame.size(2)}}, {"expected", {nc.height, nc.width}}});
    }
    meta["init"] = {{"dataset_index", idx}, {"frame", f}};
  }
  const uint64_t seed = request.contains("seed") ? request.at("seed").get<uint64_t>() : 0;
  meta["seed"] = seed;

  auto rec = std::make_shared<Record>();
  rec->checkpoint = name;
  rec->fingerprint = b.fingerprint;
  try {
    rec->session = std::make_unique<sampler::GenerationSession>(b.net, session_config(b), frame, seed);
  } catch (const std::invalid_argument& e) {
    throw ApiError(422, e.what());
  }
  rec->created = rec->last_active = cfg_.now();
  const std::string id = random_id();
  {
    std::lock_guard<std::mutex> lock(mu_);
    while (static_cast<int>(sessions_.size()) >= cfg_.max_sessions) {
      auto oldest = sessions_.begin();
      for (auto it = sessions_.begin(); it != sessions_.end(); ++it) {
        if (it->second->last_active < oldest->second->last_active) oldest = it;
      }
      sessions_.erase(oldest);
    }
    sessions_[id] = rec;
  }
  return json{{"session_id", id},
              {"frame_0", util::base64_encode(image::encode_png(frame))},
              {"frame_index", 0},
              {"meta", meta},
              {"fingerprint", b.fingerprint}};
}

StepReply SessionService::step(const std::string& id, const json& request) {
  auto rec = find(id, true);
  std::lock_guard<std::mutex> lock(rec->mu);
  const auto& nc = rec->session->net_config();
  sampler::Controls controls;
  if (request.contains("controls") && !request.at("controls").is_null()) {
    controls = parse_controls(request.at("controls"), nc.height, nc.width);
  }
  const bool capture = request.value("capture_attention", false);
  const auto t0 = std::chrono::steady_clock::now();
  torch::Tensor frame;
  try {
    frame = rec->session->step(controls, capture);
  } catch (const std::exception& e) {
    const std::string diag = util::hex64(util::fnv1a(id + request.dump() + e.what()));
    std::cerr << "generation failure " << diag << ": " << e.what() << "\n";
    throw ApiError(503, "generation failed", json{{"diagnostics_id", diag}});
  }
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  StepReply reply;
  reply.body = json{{"frame", util::base64_encode(image::encode_png(frame))},
                    {"frame_index", rec->session->frame_index()},
                    {"timing_ms", ms},
                    {"attention_captured", capture},
                    {"fingerprint", rec->fingerprint}};
  auto c = frame.contiguous();
  reply.raw.bytes.assign(static_cast<const char*>(c.data_ptr()), c.nbytes());
  reply.raw.shape = c.sizes().vec();
  return reply;
}

json SessionService::attention(const std::string& id, int i, int j, const std::string& query) {
  auto rec = find(id, false);
  std::lock_guard<std::mutex> lock(rec->mu);
  const auto& cap = rec->session->last_attention();
  if (!cap) throw ApiError(409, "the last step ran without attention capture");
  const auto& nc = rec->session->net_config();
  if (i < 0 || i >= nc.height || j < 0 || j >= nc.width) throw ApiError(422, "pixel outside the frame");
  net::AttentionQuery q;
  if (query == "visual") {
    q = net::AttentionQuery::kVisualToken;
  } else if (query == "control") {
    q = net::AttentionQuery::kControlToken;
  } else {
    throw ApiError(422, "query must be 'visual' or 'control'");
  }
  auto map = net::extract_cross_attention(*cap, nc, i, j, q);
  auto w = map.weights.contiguous();
  json rows = json::array();
  for (int r = 0; r < map.grid_h; ++r) {
    json row = json::array();
    for (int c = 0; c < map.grid_w; ++c) row.push_back(w[r][c].item<double>());
    rows.push_back(row);
  }
  return json{{"grid_h", map.grid_h}, {"grid_w", map.grid_w}, {"query", query}, {"weights", rows},
              {"frame_index", rec->session->frame_index()}, {"fingerprint", rec->fingerprint}};
}

json SessionService::segment(const std::string& id, const json& request) {
  auto rec = find(id, true);
  std::lock_guard<std::mutex> lock(rec->mu);
  const auto& nc = rec->session->net_config();
  if (!request.contains("i") || !request.contains("j")) throw ApiError(422, "segment needs 'i' and 'j'");
  const int i = get_int(request, "i", 0), j = get_int(request, "j", 0);
  if (i < 0 || i >= nc.height || j < 0 || j >= nc.width) {
    throw ApiError(422, "pixel outside the frame", json{{"height", nc.height}, {"width", nc.width}});
  }
  eval::PokeConfig pc;
  pc.n_repeats = get_int(request, "repeats", pc.n_repeats);
  pc.similarity_threshold = request.value("threshold", pc.similarity_threshold);
  if (pc.n_repeats < 1) throw ApiError(422, "repeats must be >= 1");
  const auto& base = *rec->session;
  // Each poke runs on a scratch copy so the session timeline never changes.
  eval::FrameGenerator gen = [&base](const torch::Tensor&, const sampler::Controls& controls, uint64_t seed) {
    auto scratch = base.clone();
    scratch.rng() = Rng(seed);
    return scratch.step(controls);
  };
  Rng rng(request.contains("seed") ? request.at("seed").get<uint64_t>() : 0);
  auto mask = eval::poke_segment(gen, base.current_frame(), i, j, pc, rng);
  json out = encode_mask_rle(mask);
  out["frame_index"] = base.frame_index();
  out["fingerprint"] = rec->fingerprint;
  return out;
}

json SessionService::info(const std::string& id) {
  auto rec = find(id, false);
  std::lock_guard<std::mutex> lock(rec->mu);
  return json{{"session_id", id},
              {"checkpoint", rec->checkpoint},
              {"frame_index", rec->session->frame_index()},
              {"history_length", rec->session->history_length()},
              {"fingerprint", rec->fingerprint}};
}

json SessionService::health() {
  evict_idle();
  json cks = json::object();
  for (const auto& [name, b] : checkpoints_) cks[name] = b.fingerprint;
  const double uptime = std::chrono::duration<double>(cfg_.now() - started_).count();
  return json{{"status", "ok"},
              {"fingerprint", fingerprint()},
              {"checkpoints", cks},
              {"uptime_s", uptime},
              {"sessions", session_count()},
              {"code_version", ckpt::kCodeVersion}};
}

HttpServer::HttpServer(SessionService& service) : service_(service), server_(std::make_unique<httplib::Server>()) {
  auto& srv = *server_;
  auto send_json = [this](httplib::Response& res, int status, json body) {
    if (!body.contains("fingerprint")) body["fingerprint"] = service_.fingerprint();
    res.status = status;
    res.set_content(body.dump(), "application/json");
  };
  auto guarded = [this, send_json](auto fn) {
    return [this, send_json, fn](const httplib::Request& req, httplib::Response& res) {
      try {
        fn(req, res);
      } catch (const ApiError& e) {
        json body{{"error", e.what()}};
        if (!e.detail().is_null()) body["detail"] = e.detail();
        send_json(res, e.status(), body);
      } catch (const json::exception& e) {
        send_json(res, 422, json{{"error", std::string("malformed request: ") + e.what()}});
      } catch (const std::invalid_argument& e) {
        send_json(res, 422, json{{"error", e.what()}});
      } catch (const std::exception& e) {
        send_json(res, 500, json{{"error", e.what()}});
      }
    };
  };
  auto body_json = [](const httplib::Request& req) {
    if (req.body.empty()) return json::object();
    return json::parse(req.body);
  };

  srv.Get("/api/health", guarded([this, send_json](const httplib::Request&, httplib::Response& res) {
            send_json(res, 200, service_.health());
          }));
  srv.Get("/api/schema/control", guarded([send_json](const httplib::Request&, httplib::Response& res) {
            send_json(res, 200, control_schema());
          }));
  srv.Post("/api/sessions", guarded([this, send_json, body_json](const httplib::Request& req, httplib::Response& res) {
             send_json(res, 201, service_.create_session(body_json(req)));
           }));
  srv.Get(R"(/api/sessions/([^/]+))", guarded([this, send_json](const httplib::Request& req, httplib::Response& res) {
            send_json(res, 200, service_.info(req.matches[1]));
          }));
  srv.Post(R"(/api/sessions/([^/]+)/step)",
           guarded([this, send_json, body_json](const httplib::Request& req, httplib::Response& res) {
             auto reply = service_.step(req.matches[1], body_json(req));
             const auto accept = req.get_header_value("Accept");
             if (accept.find("application/octet-stream") != std::string::npos) {
               std::string shape;
               for (auto d : reply.raw.shape) shape += (shape.empty() ? "" : ",") + std::to_string(d);
               res.set_header("X-Frame-Shape", shape);
               res.set_header("X-Frame-Dtype", "float32");
               res.set_header("X-Frame-Index", std::to_string(reply.body["frame_index"].get<int>()));
               res.set_header("X-Fingerprint", reply.body["fingerprint"].get<std::string>());
               res.status = 200;
               res.set_content(reply.raw.bytes, "application/octet-stream");
               return;
             }
             send_json(res, 200, reply.body);
           }));
  srv.Get(R"(/api/sessions/([^/]+)/attention)",
          guarded([this, send_json](const httplib::Request& req, httplib::Response& res) {
            if (!req.has_param("i") || !req.has_param("j")) throw ApiError(422, "attention needs i and j");
            int i = 0, j = 0;
            try {
              i = std::stoi(req.get_param_value("i"));
              j = std::stoi(req.get_param_value("j"));
            } catch (const std::exception&) {
              throw ApiError(422, "i and j must be integers");
            }
            const auto query = req.has_param("query") ? req.get_param_value("query") : std::string("control");
            send_json(res, 200, service_.attention(req.matches[1], i, j, query));
          }));
  srv.Post(R"(/api/sessions/([^/]+)/segment)",
           guarded([this, send_json, body_json](const httplib::Request& req, httplib::Response& res) {
             send_json(res, 200, service_.segment(req.matches[1], body_json(req)));
           }));
  if (!service_.config().static_dir.empty()) {
    if (!srv.set_mount_point("/", service_.config().static_dir)) {
      throw ConfigError("static directory '" + service_.config().static_dir + "' does not exist");
    }
  }
}

HttpServer::~HttpServer() { stop(); }

void HttpServer::listen(const std::string& host, int port) {
  if (!server_->listen(host, port)) throw std::runtime_error("cannot listen on " + host + ":" + std::to_string(port));
}

int HttpServer::start_background(const std::string& host) {
  const int port = server_->bind_to_any_port(host);
  if (port < 0) throw std::runtime_error("cannot bind " + host);
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return port;
}

void HttpServer::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace forceworld::service
