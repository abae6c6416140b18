#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>

#include "forceworld/checkpoint.hpp"
#include "forceworld/clip_io.hpp"
#include "forceworld/sampler.hpp"
#include "json.hpp"

namespace httplib {
class Server;
}

namespace forceworld::service {

using Clock = std::chrono::steady_clock;

struct ServiceConfig {
  int max_sessions = 64;
  std::chrono::seconds idle_timeout{15 * 60};
  int max_history = 16;
  /// Overrides the checkpoint's ODE step count when > 0.
  int ode_steps = 0;
  /// Directory mounted at "/" for the browser bundle; empty disables it.
  std::string static_dir;
  std::function<Clock::time_point()> now = [] { return Clock::now(); };
};

/// Error carrying the HTTP status it maps to.
class ApiError : public std::runtime_error {
 public:
  ApiError(int status, const std::string& message, nlohmann::json detail = nullptr)
      : std::runtime_error(message), status_(status), detail_(std::move(detail)) {}
  int status() const { return status_; }
  const nlohmann::json& detail() const { return detail_; }

 private:
  int status_;
  nlohmann::json detail_;
};

/// Raw frame returned instead of PNG when the client asks for tensors.
struct RawFrame {
  std::string bytes;  // little-endian float32, (3, H, W)
  std::vector<int64_t> shape;
};

struct StepReply {
  nlohmann::json body;
  RawFrame raw;
};

/// Transport-independent session logic behind the HTTP endpoints.
class SessionService {
 public:
  explicit SessionService(ServiceConfig cfg = {});

  void add_checkpoint(const std::string& name, const std::filesystem::path& archive);
  void set_dataset(const std::filesystem::path& root);

  /// {checkpoint?, init: {dataset_index, frame?} | {png: base64}, seed?} -> 201 body.
  nlohmann::json create_session(const nlohmann::json& request);
  /// {controls: [..] | null, capture_attention?: bool}
  StepReply step(const std::string& id, const nlohmann::json& request);
  /// Heatmap for pixel (i, j). Query "control" (default) maps over the visual
  /// token grid; "visual" maps the pixel's token over the control grid.
  nlohmann::json attention(const std::string& id, int i, int j, const std::string& query = "control");
  /// {i, j, repeats?, threshold?, seed?} -> run-length encoded mask. History is untouched.
  nlohmann::json segment(const std::string& id, const nlohmann::json& request);
  nlohmann::json health();
  /// Current frame index without touching the session's activity time.
  nlohmann::json info(const std::string& id);

  /// Drop sessions idle longer than the timeout. Returns how many were removed.
  size_t evict_idle();
  size_t session_count();
  /// Hash over all loaded checkpoint fingerprints.
  std::string fingerprint() const;
  const ServiceConfig& config() const { return cfg_; }

 private:
  struct Record {
    std::mutex mu;
    std::string checkpoint;
    std::string fingerprint;
    std::unique_ptr<sampler::GenerationSession> session;
    Clock::time_point created;
    Clock::time_point last_active;
  };

  std::shared_ptr<Record> find(const std::string& id, bool touch);
  const ckpt::ModelBundle& bundle(const std::string& name) const;
  sampler::SessionConfig session_config(const ckpt::ModelBundle& b) const;

  ServiceConfig cfg_;
  std::map<std::string, ckpt::ModelBundle> checkpoints_;
  std::optional<world::DatasetIndex> dataset_;
  std::mutex mu_;
  std::map<std::string, std::shared_ptr<Record>> sessions_;
  Clock::time_point started_;
};

/// Run-length encoding of a (H, W) bool mask in row-major order; runs
/// alternate starting with unset pixels.
nlohmann::json encode_mask_rle(const torch::Tensor& mask);
torch::Tensor decode_mask_rle(const nlohmann::json& rle);

/// httplib front end. Routes:
///   POST /api/sessions, POST /api/sessions/{id}/step,
///   GET /api/sessions/{id}/attention, POST /api/sessions/{id}/segment,
///   GET /api/sessions/{id}, GET /api/health, GET /api/schema/control.
class HttpServer {
 public:
  explicit HttpServer(SessionService& service);
  ~HttpServer();

  void listen(const std::string& host, int port);
  /// Bind an ephemeral port and serve on a background thread.
  int start_background(const std::string& host = "127.0.0.1");
  void stop();

 private:
  SessionService& service_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
};

/// JSON Schema for one control point (also shipped as schema/control.schema.json).
const nlohmann::json& control_schema();

}  // namespace forceworld::service
