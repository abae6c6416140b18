#include "forceworld/eval.hpp"

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <tuple>

#include "forceworld/errors.hpp"

namespace forceworld::eval {

using nlohmann::json;

namespace {

std::vector<int64_t> quantize(const torch::Tensor& frame) {
  auto q = (frame.to(torch::kFloat64).clamp(0.0, 1.0) * 255.0).round().to(torch::kInt64).contiguous();
  return std::vector<int64_t>(q.data_ptr<int64_t>(), q.data_ptr<int64_t>() + q.numel());
}

bool in_disc(int i, int j, double ci, double cj, double r) {
  const double a = i - ci, b = j - cj;
  return a * a + b * b <= r * r;
}

void check_flow(const torch::Tensor& flow) {
  if (flow.dim() != 3 || flow.size(0) != 2) throw ShapeError("flow must be (2, H, W), got " + c10::str(flow.sizes()));
}

}  // namespace

torch::Tensor block_match_flow(const torch::Tensor& frame_a, const torch::Tensor& frame_b, const BlockMatchConfig& cfg) {
  if (frame_a.dim() != 3 || !frame_a.sizes().equals(frame_b.sizes())) {
    throw ShapeError("block matching needs two (C, H, W) frames of equal shape, got " + c10::str(frame_a.sizes()) +
                     " and " + c10::str(frame_b.sizes()));
  }
  if (cfg.block < 1 || cfg.block % 2 == 0) throw ConfigError("block size must be odd and positive");
  const int C = static_cast<int>(frame_a.size(0));
  const int H = static_cast<int>(frame_a.size(1));
  const int W = static_cast<int>(frame_a.size(2));
  if (cfg.radius < 0 || 2 * cfg.radius >= std::min(H, W)) {
    throw ConfigError("search radius " + std::to_string(cfg.radius) + " must be below min(H, W)/2");
  }
  const auto a = quantize(frame_a);
  const auto b = quantize(frame_b);
  const int h = cfg.block / 2;
  const int EH = H + 2 * h, EW = W + 2 * h;
  auto clamp_i = [&](int i) { return std::clamp(i, 0, H - 1); };
  auto clamp_j = [&](int j) { return std::clamp(j, 0, W - 1); };

  std::vector<std::tuple<int, int, int>> disps;  // (norm^2, di, dj)
  for (int di = -cfg.radius; di <= cfg.radius; ++di) {
    for (int dj = -cfg.radius; dj <= cfg.radius; ++dj) disps.emplace_back(di * di + dj * dj, di, dj);
  }
  std::sort(disps.begin(), disps.end());

  std::vector<int64_t> best(static_cast<size_t>(H) * W, INT64_MAX);
  std::vector<int> best_di(best.size(), 0), best_dj(best.size(), 0);
  std::vector<int64_t> integral(static_cast<size_t>(EH + 1) * (EW + 1), 0);
  auto I = [&](int y, int x) -> int64_t& { return integral[static_cast<size_t>(y) * (EW + 1) + x]; };

  for (const auto& [norm2, di, dj] : disps) {
    (void)norm2;
    for (int y = 0; y < EH; ++y) {
      const int ai = clamp_i(y - h);
      const int bi = clamp_i(y - h + di);
      int64_t row = 0;
      for (int x = 0; x < EW; ++x) {
        const int aj = clamp_j(x - h);
        const int bj = clamp_j(x - h + dj);
        int64_t d2 = 0;
        for (int c = 0; c < C; ++c) {
          const int64_t d = b[(static_cast<size_t>(c) * H + bi) * W + bj] - a[(static_cast<size_t>(c) * H + ai) * W + aj];
          d2 += d * d;
        }
        row += d2;
        I(y + 1, x + 1) = I(y, x + 1) + row;
      }
    }
    const int side = 2 * h + 1;
    for (int i = 0; i < H; ++i) {
      for (int j = 0; j < W; ++j) {
        const int64_t ssd = I(i + side, j + side) - I(i, j + side) - I(i + side, j) + I(i, j);
        const size_t k = static_cast<size_t>(i) * W + j;
        // Candidates arrive in tie-break order, so only a strictly smaller cost wins.
        if (ssd < best[k]) {
          best[k] = ssd;
          best_di[k] = di;
          best_dj[k] = dj;
        }
      }
    }
  }
  auto flow = torch::empty({2, H, W}, torch::kFloat32);
  auto f = flow.accessor<float, 3>();
  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j) {
      f[0][i][j] = static_cast<float>(best_di[static_cast<size_t>(i) * W + j]);
      f[1][i][j] = static_cast<float>(best_dj[static_cast<size_t>(i) * W + j]);
    }
  }
  return flow;
}

void ProbeSpec::validate(int height, int width) const {
  if (i < 0 || i >= height || j < 0 || j >= width) {
    throw DomainError("probe pixel (" + std::to_string(i) + ", " + std::to_string(j) + ") outside " +
                      std::to_string(height) + "x" + std::to_string(width));
  }
  if (!(r_loc > 0.0) || r_glob < r_loc) throw DomainError("probe radii must satisfy r_glob >= r_loc > 0");
  if (!std::isfinite(di) || !std::isfinite(dj)) throw DomainError("probe shift must be finite");
}

void to_json(json& j, const ProbeSpec& p) {
  j = json{{"image_id", p.image_id}, {"clip", p.clip}, {"frame", p.frame}, {"i", p.i},        {"j", p.j},
           {"di", p.di},             {"dj", p.dj},     {"r_loc", p.r_loc}, {"r_glob", p.r_glob}};
}

void from_json(const json& j, ProbeSpec& p) {
  p.image_id = j.value("image_id", std::string());
  p.clip = j.at("clip").get<int>();
  p.frame = j.value("frame", 0);
  p.i = j.at("i").get<int>();
  p.j = j.at("j").get<int>();
  p.di = j.at("di").get<double>();
  p.dj = j.at("dj").get<double>();
  p.r_loc = j.value("r_loc", 3.0);
  p.r_glob = j.value("r_glob", 6.0);
}

double cosine_error(double ai, double aj, double bi, double bj) {
  const double na = std::hypot(ai, aj), nb = std::hypot(bi, bj);
  if (na == 0.0 || nb == 0.0) return 1.0;
  return 1.0 - (ai * bi + aj * bj) / (na * nb);
}

LocalError local_error(const torch::Tensor& flow, const ProbeSpec& probe) {
  check_flow(flow);
  const int H = static_cast<int>(flow.size(1)), W = static_cast<int>(flow.size(2));
  probe.validate(H, W);
  const double dnorm = std::hypot(probe.di, probe.dj);
  if (dnorm == 0.0) throw DomainError("probe control must be nonzero");
  auto f = flow.to(torch::kFloat64).contiguous();
  auto fa = f.accessor<double, 3>();
  double si = 0.0, sj = 0.0;
  int n = 0;
  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j) {
      if (!in_disc(i, j, probe.i, probe.j, probe.r_loc)) continue;
      si += fa[0][i][j];
      sj += fa[1][i][j];
      ++n;
    }
  }
  const double vi = si / n, vj = sj / n;
  return {std::hypot(vi - probe.di, vj - probe.dj) / dnorm, cosine_error(vi, vj, probe.di, probe.dj)};
}

double global_error(const torch::Tensor& flow, const ProbeSpec& probe) {
  check_flow(flow);
  const int H = static_cast<int>(flow.size(1)), W = static_cast<int>(flow.size(2));
  probe.validate(H, W);
  auto f = flow.to(torch::kFloat64).contiguous();
  auto fa = f.accessor<double, 3>();
  double total = 0.0;
  int n = 0;
  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j) {
      if (in_disc(i, j, probe.i, probe.j, probe.r_glob)) continue;
      total += std::hypot(fa[0][i][j], fa[1][i][j]);
      ++n;
    }
  }
  if (n == 0) throw DomainError("global-error disc covers the whole image");
  return total / n;
}

double psnr(const torch::Tensor& a, const torch::Tensor& b) {
  if (!a.sizes().equals(b.sizes())) throw ShapeError("psnr: shape mismatch");
  const double mse = (a.to(torch::kFloat64) - b.to(torch::kFloat64)).pow(2).mean().item<double>();
  if (mse == 0.0) return 99.0;
  return std::min(99.0, -10.0 * std::log10(mse));
}

double ssim(const torch::Tensor& a, const torch::Tensor& b) {
  if (!a.sizes().equals(b.sizes())) throw ShapeError("ssim: shape mismatch");
  if (a.dim() != 3 || a.size(1) < 7 || a.size(2) < 7) throw ShapeError("ssim needs (C, H, W) frames of at least 7x7");
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  auto x = a.to(torch::kFloat64).unsqueeze(1);
  auto y = b.to(torch::kFloat64).unsqueeze(1);
  auto pool = [](const torch::Tensor& t) { return torch::avg_pool2d(t, 7, 1); };
  auto mx = pool(x), my = pool(y);
  auto vx = pool(x * x) - mx * mx;
  auto vy = pool(y * y) - my * my;
  auto cxy = pool(x * y) - mx * my;
  auto s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
  return s.mean().item<double>();
}

FrameGenerator model_generator(net::VectorFieldRegressor net, sampler::SessionConfig cfg) {
  return [net, cfg](const torch::Tensor& frame, const sampler::Controls& controls, uint64_t seed) {
    sampler::GenerationSession session(net, cfg, frame, seed);
    return session.step(controls);
  };
}

torch::Tensor agreeing_pixels(const torch::Tensor& flow, double di, double dj, double threshold) {
  check_flow(flow);
  const double dnorm = std::hypot(di, dj);
  if (dnorm == 0.0) throw DomainError("poke control must be nonzero");
  auto f = flow.to(torch::kFloat64);
  auto norm = torch::sqrt(f[0] * f[0] + f[1] * f[1]);
  auto cos = (f[0] * di + f[1] * dj) / (norm * dnorm);
  return (norm > 0.5 * dnorm) & (cos > threshold);
}

torch::Tensor erode(const torch::Tensor& mask, int radius) {
  if (mask.dim() != 2) throw ShapeError("erode: mask must be (H, W)");
  if (radius < 0) throw DomainError("erode: radius must be >= 0");
  if (radius == 0) return mask.to(torch::kBool);
  // max_pool pads with -inf, so out-of-frame pixels never unset a neighbor.
  auto holes = (~mask.to(torch::kBool)).to(torch::kFloat32).unsqueeze(0).unsqueeze(0);
  auto grown = torch::max_pool2d(holes, {2 * radius + 1, 2 * radius + 1}, {1, 1}, {radius, radius});
  return grown.squeeze(0).squeeze(0) < 0.5;
}

torch::Tensor poke_segment(const FrameGenerator& generate, const torch::Tensor& frame, int i, int j,
                           const PokeConfig& cfg, Rng& rng) {
  if (cfg.n_repeats < 1) throw DomainError("n_repeats must be >= 1");
  if (!(cfg.min_magnitude > 0.0) || cfg.max_magnitude < cfg.min_magnitude) {
    throw ConfigError("poke magnitudes must satisfy 0 < min <= max");
  }
  const int H = static_cast<int>(frame.size(1)), W = static_cast<int>(frame.size(2));
  if (i < 0 || i >= H || j < 0 || j >= W) throw DomainError("poke pixel outside the frame");
  auto mask = torch::zeros({H, W}, torch::kBool);
  for (int r = 0; r < cfg.n_repeats; ++r) {
    const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double mag = rng.uniform(cfg.min_magnitude, cfg.max_magnitude);
    const control::ControlPoint poke{i, j, static_cast<float>(mag * std::sin(angle)),
                                     static_cast<float>(mag * std::cos(angle))};
    auto next = generate(frame, std::vector<control::ControlPoint>{poke}, rng.next_u64());
    auto flow = block_match_flow(frame, next, cfg.matcher);
    auto agree = agreeing_pixels(flow, poke.di, poke.dj, cfg.similarity_threshold);
    if (cfg.erode_block_support) agree = erode(agree, cfg.matcher.block / 2);
    mask |= agree;
  }
  return mask;
}

double iou(const torch::Tensor& a, const torch::Tensor& b) {
  if (!a.sizes().equals(b.sizes())) throw ShapeError("iou: shape mismatch");
  auto x = a.to(torch::kBool), y = b.to(torch::kBool);
  const double uni = (x | y).sum().item<double>();
  if (uni == 0.0) return 1.0;
  return (x & y).sum().item<double>() / uni;
}

Quantiles quantiles(std::vector<double> values) {
  if (values.empty()) throw DomainError("quantiles of an empty set");
  std::sort(values.begin(), values.end());
  auto at = [&](double q) {
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
  };
  return {at(0.25), at(0.5), at(0.75)};
}

std::vector<ProbeSpec> make_probes(const std::vector<world::VideoClip>& clips, const ProbeSetConfig& cfg) {
  if (clips.empty()) throw ConfigError("probe generation needs at least one clip");
  if (cfg.n_probes < 1) throw ConfigError("n_probes must be >= 1");
  Rng rng(cfg.seed);
  std::vector<size_t> order(clips.size());
  for (size_t k = 0; k < order.size(); ++k) order[k] = k;
  for (size_t k = order.size(); k > 1; --k) std::swap(order[k - 1], order[rng.uniform_int(0, static_cast<int64_t>(k) - 1)]);

  std::vector<ProbeSpec> probes;
  for (size_t attempt = 0; static_cast<int>(probes.size()) < cfg.n_probes; ++attempt) {
    if (attempt >= order.size() * 8) throw ConfigError("not enough visible objects to build the probe set");
    const size_t ci = order[attempt % order.size()];
    const auto& clip = clips[ci];
    const int frame = 0;
    std::vector<int> candidates;
    for (int o = 0; o < clip.n_objects(); ++o) {
      if (o == clip.agent_index) continue;
      if (clip.masks[frame][o].sum().item<int64_t>() >= 5) candidates.push_back(o);
    }
    if (candidates.empty()) continue;
    const int obj = candidates[rng.uniform_int(0, static_cast<int64_t>(candidates.size()) - 1)];
    auto m = clip.masks[frame][obj].contiguous();
    auto ma = m.accessor<uint8_t, 2>();
    const int H = static_cast<int>(m.size(0)), W = static_cast<int>(m.size(1));
    // Deepest mask pixel: largest distance to any non-mask pixel or the border.
    int bi = -1, bj = -1;
    double bd = -1.0;
    for (int i = 0; i < H; ++i) {
      for (int j = 0; j < W; ++j) {
        if (!ma[i][j]) continue;
        double d = std::min({i + 1, j + 1, H - i, W - j});
        for (int y = 0; y < H; ++y) {
          for (int x = 0; x < W; ++x) {
            if (!ma[y][x]) d = std::min(d, std::hypot(static_cast<double>(y - i), static_cast<double>(x - j)));
          }
        }
        if (d > bd) {
          bd = d;
          bi = i;
          bj = j;
        }
      }
    }
    const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double mag = rng.uniform(cfg.min_magnitude, cfg.max_magnitude);
    ProbeSpec p;
    p.image_id = "clip" + std::to_string(ci) + "/frame" + std::to_string(frame);
    p.clip = static_cast<int>(ci);
    p.frame = frame;
    p.i = bi;
    p.j = bj;
    p.di = mag * std::sin(angle);
    p.dj = mag * std::cos(angle);
    p.r_loc = cfg.r_loc;
    p.r_glob = cfg.r_glob;
    probes.push_back(p);
  }
  return probes;
}

json probes_to_json(const std::vector<ProbeSpec>& probes) {
  return json{{"format_version", 1}, {"probes", probes}};
}

std::vector<ProbeSpec> probes_from_json(const json& j) {
  if (j.value("format_version", 0) != 1) throw FormatError("unsupported probe file version");
  return j.at("probes").get<std::vector<ProbeSpec>>();
}

std::vector<ProbeResult> evaluate_probes(const FrameGenerator& generate, const std::vector<world::VideoClip>& clips,
                                         const std::vector<ProbeSpec>& probes, const EvalConfig& cfg) {
  if (probes.empty()) throw ConfigError("probe set is empty");
  std::vector<ProbeResult> out;
  out.reserve(probes.size());
  for (size_t k = 0; k < probes.size(); ++k) {
    const auto& p = probes[k];
    if (p.clip < 0 || p.clip >= static_cast<int>(clips.size())) {
      throw DomainError("probe references clip " + std::to_string(p.clip) + " of " + std::to_string(clips.size()));
    }
    const auto& clip = clips[p.clip];
    if (p.frame < 0 || p.frame >= clip.n_frames()) throw DomainError("probe frame out of range");
    auto frame = clip.frames[p.frame];
    p.validate(static_cast<int>(frame.size(1)), static_cast<int>(frame.size(2)));
    const control::ControlPoint ctrl{p.i, p.j, static_cast<float>(p.di), static_cast<float>(p.dj)};
    auto next = generate(frame, std::vector<control::ControlPoint>{ctrl}, mix_seed(cfg.seed, k));
    auto flow = block_match_flow(frame, next, cfg.matcher);
    out.push_back({p, local_error(flow, p), global_error(flow, p)});
  }
  return out;
}

namespace {

json quantile_json(const std::vector<double>& v) {
  auto q = quantiles(v);
  return json{{"p25", q.p25}, {"p50", q.p50}, {"p75", q.p75}};
}

json aggregate(const std::vector<ProbeResult>& results) {
  std::vector<double> cos, rel, glob;
  for (const auto& r : results) {
    cos.push_back(r.local.cosine_error);
    rel.push_back(r.local.rel_l2);
    glob.push_back(r.global);
  }
  return json{{"n", results.size()},
              {"local_cosine_error", quantile_json(cos)},
              {"local_rel_l2", quantile_json(rel)},
              {"global_error", quantile_json(glob)}};
}

json matcher_json(const BlockMatchConfig& m) { return json{{"block", m.block}, {"radius", m.radius}}; }

}  // namespace

json probe_report(const std::vector<ProbeResult>& results, const EvalConfig& cfg) {
  json rows = json::array();
  for (const auto& r : results) {
    rows.push_back({{"probe", r.probe},
                    {"local_rel_l2", r.local.rel_l2},
                    {"local_cosine_error", r.local.cosine_error},
                    {"global_error", r.global}});
  }
  return json{{"config", {{"matcher", matcher_json(cfg.matcher)}, {"seed", cfg.seed}}},
              {"rows", rows},
              {"aggregate", aggregate(results)}};
}

json control_sweep(const FrameGenerator& generate, const std::vector<world::VideoClip>& clips,
                   const std::vector<ProbeSpec>& probes, const SweepConfig& cfg) {
  if (probes.empty()) throw ConfigError("probe set is empty");
  if (cfg.n_directions < 1) throw ConfigError("n_directions must be >= 1");
  for (double m : cfg.magnitudes) {
    if (!(m > 0.0)) throw ConfigError("sweep magnitudes must be positive");
  }
  json bins = json::array();
  std::vector<std::vector<double>> by_direction(cfg.n_directions);
  for (size_t mi = 0; mi < cfg.magnitudes.size(); ++mi) {
    const double mag = cfg.magnitudes[mi];
    for (int d = 0; d < cfg.n_directions; ++d) {
      const double angle = 2.0 * std::numbers::pi * d / cfg.n_directions;
      std::vector<ProbeSpec> shifted = probes;
      for (auto& p : shifted) {
        p.di = mag * std::sin(angle);
        p.dj = mag * std::cos(angle);
      }
      EvalConfig ec = cfg.eval;
      ec.seed = mix_seed(cfg.eval.seed, mi * 1000 + d);
      auto results = evaluate_probes(generate, clips, shifted, ec);
      for (const auto& r : results) by_direction[d].push_back(r.local.cosine_error);
      auto agg = aggregate(results);
      agg["magnitude"] = mag;
      agg["direction"] = d;
      agg["angle_rad"] = angle;
      bins.push_back(agg);
    }
  }
  json directions = json::array();
  for (int d = 0; d < cfg.n_directions; ++d) {
    directions.push_back({{"direction", d}, {"local_cosine_error", quantile_json(by_direction[d])}});
  }
  return json{{"config",
               {{"magnitudes", cfg.magnitudes},
                {"n_directions", cfg.n_directions},
                {"direction_convention", "angle from +j (right) toward +i (down)"},
                {"matcher", matcher_json(cfg.eval.matcher)},
                {"seed", cfg.eval.seed}}},
              {"bins", bins},
              {"directions", directions}};
}

}  // namespace forceworld::eval
