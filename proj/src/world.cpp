#include "forceworld/world.hpp"

#include <torch/torch.h>

#include <algorithm>
#include <cmath>

#include "forceworld/errors.hpp"

namespace forceworld::world {

namespace {

int round_px(double x) { return static_cast<int>(std::floor(x + 0.5)); }

double color_distance(const Color& a, const Color& b) {
  double s = 0.0;
  for (int c = 0; c < 3; ++c) s += (a[c] - b[c]) * (a[c] - b[c]);
  return std::sqrt(s);
}


// Catmull-Rom basis on one segment.
double catmull_rom(double p0, double p1, double p2, double p3, double u, bool derivative) {
  if (derivative) {
    return 0.5 * ((-p0 + p2) + 2.0 * (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * u +
                  3.0 * (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * u * u);
  }
  return 0.5 * (2.0 * p1 + (-p0 + p2) * u + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * u * u +
                (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * u * u * u);
}

}  // namespace

std::vector<Color> default_palette() {
  return {
      {0.90f, 0.20f, 0.20f},  // red
      {0.20f, 0.75f, 0.25f},  // green
      {0.25f, 0.40f, 0.95f},  // blue
      {0.95f, 0.85f, 0.20f},  // yellow
      {0.85f, 0.30f, 0.85f},  // magenta
      {0.20f, 0.85f, 0.90f},  // cyan
      {0.95f, 0.55f, 0.10f},  // orange
  };
}

std::string to_string(Shape shape) {
  switch (shape) {
    case Shape::kDisc: return "disc";
    case Shape::kSquare: return "square";
    case Shape::kTriangle: return "triangle";
  }
  return "disc";
}

Shape shape_from_string(const std::string& name) {
  if (name == "disc") return Shape::kDisc;
  if (name == "square") return Shape::kSquare;
  if (name == "triangle") return Shape::kTriangle;
  throw ConfigError("unknown shape '" + name + "'");
}

void WorldConfig::validate() const {
  if (height < 8 || width < 8) throw ConfigError("arena must be at least 8x8 pixels");
  if (min_objects < 0 || max_objects < min_objects) throw ConfigError("invalid object count range");
  if (max_objects > 0 && shapes.empty()) throw ConfigError("shape set is empty");
  if (static_cast<int>(palette.size()) < max_objects) {
    throw ConfigError("palette has fewer colors than max_objects");
  }
  std::vector<Color> all = palette;
  all.push_back(background);
  if (agent_mode) all.push_back(agent_color);
  for (size_t a = 0; a < all.size(); ++a) {
    for (size_t b = a + 1; b < all.size(); ++b) {
      if (color_distance(all[a], all[b]) < min_color_distance) {
        throw ConfigError("palette colors " + std::to_string(a) + " and " + std::to_string(b) +
                          " are closer than min_color_distance");
      }
    }
  }
  if (!(min_radius > 0.0) || max_radius < min_radius) throw ConfigError("invalid radius range");
  if (elasticity < 0.0 || elasticity > 1.0) throw ConfigError("elasticity must lie in [0, 1]");
  if (min_speed < 0.0 || max_speed < min_speed) throw ConfigError("invalid speed range");
  if (impulse_rate < 0.0 || impulse_rate > 1.0) throw ConfigError("impulse_rate must lie in [0, 1]");
  if (substeps < 1) throw ConfigError("substeps must be >= 1");
  if (texture_contrast < 0.0 || texture_contrast >= 1.0) throw ConfigError("texture_contrast must lie in [0, 1)");
  if (agent_mode && !(agent_radius > 0.0 && agent_speed > 0.0)) throw ConfigError("invalid agent parameters");
}

WorldConfig WorldConfig::interactions() {
  WorldConfig cfg;
  cfg.preset = "interactions";
  return cfg;
}

WorldConfig WorldConfig::pusher() {
  WorldConfig cfg;
  cfg.preset = "pusher";
  cfg.agent_mode = true;
  cfg.min_speed = 0.0;
  cfg.max_speed = 0.0;
  cfg.impulse_rate = 0.15;
  cfg.impulse_speed = 2.0;
  return cfg;
}

WorldConfig WorldConfig::preset_named(const std::string& name) {
  if (name == "interactions") return interactions();
  if (name == "pusher") return pusher();
  throw ConfigError("unknown world preset '" + name + "'");
}

void to_json(nlohmann::json& j, const WorldConfig& cfg) {
  std::vector<std::string> shapes;
  for (auto s : cfg.shapes) shapes.push_back(to_string(s));
  j = nlohmann::json{{"preset", cfg.preset},
                     {"height", cfg.height},
                     {"width", cfg.width},
                     {"min_objects", cfg.min_objects},
                     {"max_objects", cfg.max_objects},
                     {"shapes", shapes},
                     {"palette", cfg.palette},
                     {"background", cfg.background},
                     {"agent_color", cfg.agent_color},
                     {"min_color_distance", cfg.min_color_distance},
                     {"min_radius", cfg.min_radius},
                     {"max_radius", cfg.max_radius},
                     {"elasticity", cfg.elasticity},
                     {"min_speed", cfg.min_speed},
                     {"max_speed", cfg.max_speed},
                     {"agent_mode", cfg.agent_mode},
                     {"agent_radius", cfg.agent_radius},
                     {"agent_speed", cfg.agent_speed},
                     {"impulse_rate", cfg.impulse_rate},
                     {"impulse_speed", cfg.impulse_speed},
                     {"substeps", cfg.substeps},
                     {"texture_contrast", cfg.texture_contrast}};
}

void from_json(const nlohmann::json& j, WorldConfig& cfg) {
  cfg = WorldConfig::preset_named(j.value("preset", std::string("interactions")));
  cfg.height = j.value("height", cfg.height);
  cfg.width = j.value("width", cfg.width);
  cfg.min_objects = j.value("min_objects", cfg.min_objects);
  cfg.max_objects = j.value("max_objects", cfg.max_objects);
  if (j.contains("shapes")) {
    cfg.shapes.clear();
    for (const auto& s : j.at("shapes")) cfg.shapes.push_back(shape_from_string(s.get<std::string>()));
  }
  if (j.contains("palette")) cfg.palette = j.at("palette").get<std::vector<Color>>();
  cfg.background = j.value("background", cfg.background);
  cfg.agent_color = j.value("agent_color", cfg.agent_color);
  cfg.min_color_distance = j.value("min_color_distance", cfg.min_color_distance);
  cfg.min_radius = j.value("min_radius", cfg.min_radius);
  cfg.max_radius = j.value("max_radius", cfg.max_radius);
  cfg.elasticity = j.value("elasticity", cfg.elasticity);
  cfg.min_speed = j.value("min_speed", cfg.min_speed);
  cfg.max_speed = j.value("max_speed", cfg.max_speed);
  cfg.agent_mode = j.value("agent_mode", cfg.agent_mode);
  cfg.agent_radius = j.value("agent_radius", cfg.agent_radius);
  cfg.agent_speed = j.value("agent_speed", cfg.agent_speed);
  cfg.impulse_rate = j.value("impulse_rate", cfg.impulse_rate);
  cfg.impulse_speed = j.value("impulse_speed", cfg.impulse_speed);
  cfg.substeps = j.value("substeps", cfg.substeps);
  cfg.texture_contrast = j.value("texture_contrast", cfg.texture_contrast);
}

AgentScript::AgentScript(std::vector<std::array<double, 2>> waypoints, double speed)
    : waypoints_(std::move(waypoints)) {
  for (size_t k = 0; k + 1 < waypoints_.size(); ++k) {
    const double di = waypoints_[k + 1][0] - waypoints_[k][0];
    const double dj = waypoints_[k + 1][1] - waypoints_[k][1];
    durations_.push_back(std::max(1.0, std::hypot(di, dj) / speed));
  }
}

std::array<double, 2> AgentScript::eval(double time, bool derivative) const {
  if (waypoints_.empty()) return {0.0, 0.0};
  const size_t n_seg = durations_.size();
  size_t seg = 0;
  double local = std::max(0.0, time);
  while (seg < n_seg && local > durations_[seg]) {
    local -= durations_[seg];
    ++seg;
  }
  if (seg == n_seg) {
    if (derivative) return {0.0, 0.0};
    return waypoints_.back();
  }
  const double u = local / durations_[seg];
  const auto& p1 = waypoints_[seg];
  const auto& p2 = waypoints_[seg + 1];
  const auto& p0 = seg == 0 ? p1 : waypoints_[seg - 1];
  const auto& p3 = seg + 2 < waypoints_.size() ? waypoints_[seg + 2] : p2;
  std::array<double, 2> out{};
  for (int c = 0; c < 2; ++c) {
    out[c] = catmull_rom(p0[c], p1[c], p2[c], p3[c], u, derivative);
    if (derivative) out[c] /= durations_[seg];
  }
  return out;
}

std::array<double, 2> AgentScript::position(double time) const { return eval(time, false); }
std::array<double, 2> AgentScript::velocity(double time) const { return eval(time, true); }

bool covers(Shape shape, double radius, int ci, int cj, int i, int j) {
  const double di = i - ci;
  const double dj = j - cj;
  switch (shape) {
    case Shape::kDisc:
      return di * di + dj * dj <= radius * radius;
    case Shape::kSquare: {
      const double half = std::floor(radius * 0.72);
      return std::abs(di) <= half && std::abs(dj) <= half;
    }
    case Shape::kTriangle: {
      // Upward triangle inscribed in the bounding circle.
      const double s3 = std::sqrt(3.0) / 2.0;
      const double ai = -radius, aj = 0.0;
      const double bi = radius / 2.0, bj = -radius * s3;
      const double c_i = radius / 2.0, c_j = radius * s3;
      auto edge = [&](double pi, double pj, double qi, double qj) {
        return (qj - pj) * (di - pi) - (qi - pi) * (dj - pj);
      };
      const double e1 = edge(ai, aj, bi, bj);
      const double e2 = edge(bi, bj, c_i, c_j);
      const double e3 = edge(c_i, c_j, ai, aj);
      const double eps = 1e-9;
      return (e1 >= -eps && e2 >= -eps && e3 >= -eps) || (e1 <= eps && e2 <= eps && e3 <= eps);
    }
  }
  return false;
}

std::pair<torch::Tensor, torch::Tensor> render(const WorldConfig& cfg, const std::vector<ObjectState>& objects) {
  const int h = cfg.height;
  const int w = cfg.width;
  auto owner = torch::full({h, w}, -1, torch::kInt32);
  auto own = owner.accessor<int, 2>();
  for (size_t o = 0; o < objects.size(); ++o) {
    const auto& obj = objects[o];
    const int ci = round_px(obj.pi);
    const int cj = round_px(obj.pj);
    const int reach = static_cast<int>(std::ceil(obj.radius)) + 1;
    for (int i = std::max(0, ci - reach); i <= std::min(h - 1, ci + reach); ++i) {
      for (int j = std::max(0, cj - reach); j <= std::min(w - 1, cj + reach); ++j) {
        if (covers(obj.shape, obj.radius, ci, cj, i, j)) own[i][j] = static_cast<int>(o);
      }
    }
  }
  auto frame = torch::empty({3, h, w}, torch::kFloat32);
  auto fr = frame.accessor<float, 3>();
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const int o = own[i][j];
      const Color& c = o < 0 ? cfg.background : objects[o].color;
      float shade = 1.0f;
      if (o >= 0) {
        // Quadrant shading in object-local coordinates; moves rigidly with the object.
        const bool below = i - round_px(objects[o].pi) >= 0;
        const bool right = j - round_px(objects[o].pj) >= 0;
        if (below != right) shade = 1.0f - static_cast<float>(cfg.texture_contrast);
      }
      for (int ch = 0; ch < 3; ++ch) fr[ch][i][j] = c[ch] * shade;
    }
  }
  return {frame, owner};
}

void advance(const WorldConfig& cfg, std::vector<ObjectState>& objects, const AgentScript& script, double time) {
  const int n_sub = cfg.substeps;
  const double h = 1.0 / n_sub;
  const double e = cfg.elasticity;
  for (int s = 0; s < n_sub; ++s) {
    const double t_next = time + (s + 1) * h;
    for (auto& obj : objects) {
      if (obj.kinematic) {
        const auto p = script.position(t_next);
        const auto v = script.velocity(t_next);
        obj.pi = p[0];
        obj.pj = p[1];
        obj.vi = v[0];
        obj.vj = v[1];
        continue;
      }
      obj.pi += obj.vi * h;
      obj.pj += obj.vj * h;
      if (obj.pi - obj.radius < -0.5 && obj.vi < 0.0) obj.vi = -e * obj.vi;
      if (obj.pi + obj.radius > cfg.height - 0.5 && obj.vi > 0.0) obj.vi = -e * obj.vi;
      if (obj.pj - obj.radius < -0.5 && obj.vj < 0.0) obj.vj = -e * obj.vj;
      if (obj.pj + obj.radius > cfg.width - 0.5 && obj.vj > 0.0) obj.vj = -e * obj.vj;
    }
    for (size_t a = 0; a < objects.size(); ++a) {
      for (size_t b = a + 1; b < objects.size(); ++b) {
        auto& A = objects[a];
        auto& B = objects[b];
        if (A.kinematic && B.kinematic) continue;
        const double ni = B.pi - A.pi;
        const double nj = B.pj - A.pj;
        const double dist = std::hypot(ni, nj);
        if (dist >= A.radius + B.radius || dist <= 0.0) continue;
        const double ui = ni / dist;
        const double uj = nj / dist;
        const double approach = (A.vi - B.vi) * ui + (A.vj - B.vj) * uj;
        if (approach <= 0.0) continue;
        const double wa = A.kinematic ? 0.0 : 1.0 / A.mass();
        const double wb = B.kinematic ? 0.0 : 1.0 / B.mass();
        const double impulse = (1.0 + e) * approach / (wa + wb);
        A.vi -= impulse * wa * ui;
        A.vj -= impulse * wa * uj;
        B.vi += impulse * wb * ui;
        B.vj += impulse * wb * uj;
      }
    }
  }
}

std::vector<ObjectState> random_scene(const WorldConfig& cfg, Rng& rng, AgentScript* script) {
  cfg.validate();
  std::vector<ObjectState> objects;
  const int n = static_cast<int>(rng.uniform_int(cfg.min_objects, cfg.max_objects));

  auto fits = [&](double pi, double pj, double r) {
    if (pi - r < 0.5 || pi + r > cfg.height - 1.5 || pj - r < 0.5 || pj + r > cfg.width - 1.5) return false;
    for (const auto& o : objects) {
      if (std::hypot(o.pi - pi, o.pj - pj) < o.radius + r + 1.0) return false;
    }
    return true;
  };

  ObjectState agent;
  if (cfg.agent_mode) {
    std::vector<std::array<double, 2>> waypoints;
    const double m = cfg.agent_radius + 1.0;
    std::array<double, 2> prev{rng.uniform(m, cfg.height - 1 - m), rng.uniform(m, cfg.width - 1 - m)};
    waypoints.push_back(prev);
    while (waypoints.size() < 16) {
      std::array<double, 2> next{rng.uniform(m, cfg.height - 1 - m), rng.uniform(m, cfg.width - 1 - m)};
      if (std::hypot(next[0] - prev[0], next[1] - prev[1]) < 0.3 * std::min(cfg.height, cfg.width)) continue;
      waypoints.push_back(next);
      prev = next;
    }
    AgentScript s(waypoints, cfg.agent_speed);
    agent.shape = Shape::kDisc;
    agent.radius = cfg.agent_radius;
    agent.color = cfg.agent_color;
    agent.kinematic = true;
    const auto p = s.position(0.0);
    const auto v = s.velocity(0.0);
    agent.pi = p[0];
    agent.pj = p[1];
    agent.vi = v[0];
    agent.vj = v[1];
    if (script != nullptr) *script = s;
    // Reserve the agent's footprint while placing passive objects.
    objects.push_back(agent);
  }

  std::vector<size_t> color_order(cfg.palette.size());
  for (size_t k = 0; k < color_order.size(); ++k) color_order[k] = k;
  for (size_t k = color_order.size(); k > 1; --k) {
    std::swap(color_order[k - 1], color_order[rng.uniform_int(0, static_cast<int64_t>(k) - 1)]);
  }

  // Sequential rejection sampling can paint itself into a corner; restart the
  // whole layout a few times before declaring the arena too small.
  const size_t fixed = objects.size();
  bool complete = false;
  for (int layout = 0; layout < 50 && !complete; ++layout) {
    objects.resize(fixed);
    complete = true;
    for (int o = 0; o < n && complete; ++o) {
      ObjectState obj;
      obj.shape = cfg.shapes[rng.uniform_int(0, static_cast<int64_t>(cfg.shapes.size()) - 1)];
      obj.radius = rng.uniform(cfg.min_radius, cfg.max_radius);
      obj.color = cfg.palette[color_order[o]];
      bool placed = false;
      for (int attempt = 0; attempt < 2000 && !placed; ++attempt) {
        const double pi = rng.uniform(0.0, cfg.height - 1.0);
        const double pj = rng.uniform(0.0, cfg.width - 1.0);
        if (fits(pi, pj, obj.radius)) {
          obj.pi = pi;
          obj.pj = pj;
          placed = true;
        }
      }
      if (!placed) {
        complete = false;
        break;
      }
      if (cfg.max_speed > 0.0) {
        const double speed = rng.uniform(cfg.min_speed, cfg.max_speed);
        const double angle = rng.uniform(0.0, 2.0 * M_PI);
        obj.vi = speed * std::sin(angle);
        obj.vj = speed * std::cos(angle);
      }
      objects.push_back(obj);
    }
  }
  if (!complete) {
    throw ConfigError("arena " + std::to_string(cfg.height) + "x" + std::to_string(cfg.width) + " too small for " +
                      std::to_string(n) + " objects");
  }

  if (cfg.agent_mode) {
    // The pusher is drawn last, on top of everything else.
    objects.erase(objects.begin());
    objects.push_back(agent);
  }
  return objects;
}

VideoClip simulate_scene(const WorldConfig& cfg, std::vector<ObjectState> objects, const AgentScript& script,
                         int n_frames, Rng& rng) {
  if (n_frames < 3) throw DomainError("simulate needs at least 3 frames, got " + std::to_string(n_frames));
  const int h = cfg.height;
  const int w = cfg.width;
  const int n_obj = static_cast<int>(objects.size());

  VideoClip clip;
  clip.frames = torch::empty({n_frames, 3, h, w}, torch::kFloat32);
  clip.flows = torch::zeros({n_frames - 1, 2, h, w}, torch::kFloat32);
  clip.masks = torch::zeros({n_frames, n_obj, h, w}, torch::kUInt8);
  clip.object_states = torch::empty({n_frames, n_obj, 4}, torch::kFloat64);
  for (int o = 0; o < n_obj; ++o) {
    clip.shapes.push_back(objects[o].shape);
    clip.radii.push_back(objects[o].radius);
    clip.colors.push_back(objects[o].color);
    if (objects[o].kinematic) clip.agent_index = o;
  }

  auto states = clip.object_states.accessor<double, 3>();
  std::vector<torch::Tensor> owners;
  std::vector<std::vector<std::array<int, 2>>> centers(n_frames);
  for (int k = 0; k < n_frames; ++k) {
    auto [frame, owner] = render(cfg, objects);
    clip.frames[k].copy_(frame);
    owners.push_back(owner);
    for (int o = 0; o < n_obj; ++o) {
      clip.masks[k][o].copy_(owner.eq(o).to(torch::kUInt8));
      states[k][o][0] = objects[o].pi;
      states[k][o][1] = objects[o].pj;
      states[k][o][2] = objects[o].vi;
      states[k][o][3] = objects[o].vj;
      centers[k].push_back({round_px(objects[o].pi), round_px(objects[o].pj)});
    }
    if (k + 1 == n_frames) break;
    if (cfg.impulse_rate > 0.0 && rng.bernoulli(cfg.impulse_rate)) {
      std::vector<int> passive;
      for (int o = 0; o < n_obj; ++o) {
        if (!objects[o].kinematic) passive.push_back(o);
      }
      if (!passive.empty()) {
        auto& target = objects[passive[rng.uniform_int(0, static_cast<int64_t>(passive.size()) - 1)]];
        const double angle = rng.uniform(0.0, 2.0 * M_PI);
        target.vi += cfg.impulse_speed * std::sin(angle);
        target.vj += cfg.impulse_speed * std::cos(angle);
      }
    }
    advance(cfg, objects, script, static_cast<double>(k));
  }

  for (int k = 0; k + 1 < n_frames; ++k) {
    auto own = owners[k].accessor<int, 2>();
    auto flow = clip.flows[k];
    auto fl = flow.accessor<float, 3>();
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        const int o = own[i][j];
        if (o < 0) continue;
        fl[0][i][j] = static_cast<float>(centers[k + 1][o][0] - centers[k][o][0]);
        fl[1][i][j] = static_cast<float>(centers[k + 1][o][1] - centers[k][o][1]);
      }
    }
  }
  return clip;
}

VideoClip simulate(const WorldConfig& cfg, int n_frames, Rng& rng) {
  if (n_frames < 3) throw DomainError("simulate needs at least 3 frames, got " + std::to_string(n_frames));
  AgentScript script;
  auto objects = random_scene(cfg, rng, &script);
  return simulate_scene(cfg, std::move(objects), script, n_frames, rng);
}

}  // namespace forceworld::world
