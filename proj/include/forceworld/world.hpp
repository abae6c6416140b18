#pragma once

#include <torch/types.h>

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "forceworld/rng.hpp"
#include "json.hpp"

namespace forceworld::world {

enum class Shape { kDisc, kSquare, kTriangle };

std::string to_string(Shape shape);
Shape shape_from_string(const std::string& name);

using Color = std::array<float, 3>;

/// Seven well-separated hues.
std::vector<Color> default_palette();

struct WorldConfig {
  std::string preset = "interactions";
  int height = 32;
  int width = 32;
  int min_objects = 3;
  int max_objects = 4;
  std::vector<Shape> shapes{Shape::kDisc, Shape::kSquare, Shape::kTriangle};
  std::vector<Color> palette = default_palette();
  Color background{0.08f, 0.08f, 0.10f};
  Color agent_color{0.95f, 0.95f, 0.95f};
  /// Minimum Euclidean RGB distance between any two palette entries,
  /// the background and the agent color.
  double min_color_distance = 0.3;
  double min_radius = 3.0;
  double max_radius = 4.5;
  double elasticity = 1.0;
  double min_speed = 1.0;
  double max_speed = 2.5;
  /// One scripted kinematic pusher moving through random waypoints.
  bool agent_mode = false;
  double agent_radius = 3.0;
  double agent_speed = 1.5;
  /// Probability per frame that a random passive object gets a velocity kick.
  double impulse_rate = 0.0;
  double impulse_speed = 2.0;
  /// Physics sub-steps per frame.
  int substeps = 8;
  /// Brightness drop on two opposite quadrants of every object, so that
  /// object interiors carry visible structure for flow estimation.
  double texture_contrast = 0.35;

  void validate() const;

  static WorldConfig interactions();
  static WorldConfig pusher();
  static WorldConfig preset_named(const std::string& name);
};

void to_json(nlohmann::json& j, const WorldConfig& cfg);
void from_json(const nlohmann::json& j, WorldConfig& cfg);

struct ObjectState {
  Shape shape = Shape::kDisc;
  double radius = 3.0;
  Color color{1.0f, 0.0f, 0.0f};
  /// Center in continuous pixel coordinates (row, column).
  double pi = 0.0;
  double pj = 0.0;
  double vi = 0.0;
  double vj = 0.0;
  /// Kinematic objects (the pusher) have infinite mass and follow their script.
  bool kinematic = false;

  double mass() const { return radius * radius; }
};

/// Smooth scripted path for the pusher: Catmull-Rom spline through waypoints,
/// traversed at a roughly constant speed.
class AgentScript {
 public:
  AgentScript() = default;
  AgentScript(std::vector<std::array<double, 2>> waypoints, double speed);

  std::array<double, 2> position(double time) const;
  std::array<double, 2> velocity(double time) const;
  bool empty() const { return waypoints_.size() < 2; }

 private:
  std::array<double, 2> eval(double time, bool derivative) const;

  std::vector<std::array<double, 2>> waypoints_;
  std::vector<double> durations_;
};

struct VideoClip {
  /// (N, 3, H, W) float32 in [0, 1].
  torch::Tensor frames;
  /// (N-1, 2, H, W) float32; entry k maps frame k to frame k+1, in pixels (di, dj).
  torch::Tensor flows;
  /// (N, n_objects, H, W) uint8, disjoint per frame.
  torch::Tensor masks;
  /// (N, n_objects, 4) float64 rows of (pi, pj, vi, vj).
  torch::Tensor object_states;
  std::vector<Shape> shapes;
  std::vector<double> radii;
  std::vector<Color> colors;
  /// Index of the pusher object, -1 when absent.
  int agent_index = -1;
  uint64_t seed = 0;

  int64_t n_frames() const { return frames.size(0); }
  int64_t n_objects() const { return masks.size(1); }
};

/// Rasterize a scene at the rounded object centers. Returns the frame (3, H, W)
/// and the owner map (H, W) int32 with -1 for background.
std::pair<torch::Tensor, torch::Tensor> render(const WorldConfig& cfg, const std::vector<ObjectState>& objects);

/// Pixel footprint test for one object centered at integer (ci, cj).
bool covers(Shape shape, double radius, int ci, int cj, int i, int j);

/// Advance the physics by one frame (substeps, wall and pairwise elastic collisions).
void advance(const WorldConfig& cfg, std::vector<ObjectState>& objects, const AgentScript& script, double time);

/// Sample a random initial scene; throws ConfigError if objects do not fit.
std::vector<ObjectState> random_scene(const WorldConfig& cfg, Rng& rng, AgentScript* script);

/// Simulate from a given initial scene.
VideoClip simulate_scene(const WorldConfig& cfg, std::vector<ObjectState> objects, const AgentScript& script,
                         int n_frames, Rng& rng);

/// Simulate a random scene.
VideoClip simulate(const WorldConfig& cfg, int n_frames, Rng& rng);

}  // namespace forceworld::world
