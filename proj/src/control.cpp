#include "forceworld/control.hpp"

#include <torch/torch.h>

#include <cmath>
#include <set>
#include <utility>

#include "forceworld/errors.hpp"

namespace forceworld::control {

void to_json(nlohmann::json& j, const ControlPoint& p) {
  j = nlohmann::json{{"i", p.i}, {"j", p.j}, {"di", p.di}, {"dj", p.dj}};
}

void from_json(const nlohmann::json& j, ControlPoint& p) {
  if (!j.is_object()) throw DomainError("control entry must be an object");
  for (const char* key : {"i", "j", "di", "dj"}) {
    if (!j.contains(key)) throw DomainError(std::string("control entry missing '") + key + "'");
  }
  for (const auto& [key, value] : j.items()) {
    if (key != "i" && key != "j" && key != "di" && key != "dj") {
      throw DomainError("unknown control field '" + key + "'");
    }
  }
  if (!j.at("i").is_number_integer() || !j.at("j").is_number_integer()) {
    throw DomainError("control pixel coordinates must be integers");
  }
  if (!j.at("di").is_number() || !j.at("dj").is_number()) {
    throw DomainError("control shifts must be numbers");
  }
  p.i = j.at("i").get<int>();
  p.j = j.at("j").get<int>();
  p.di = j.at("di").get<float>();
  p.dj = j.at("dj").get<float>();
}

torch::Tensor flow_sampling_distribution(const torch::Tensor& flow) {
  if (flow.dim() != 3 || flow.size(0) != 2) throw ShapeError("dense flow must have shape (2, H, W)");
  auto mag2 = flow.to(torch::kFloat64).pow(2).sum(0);
  const double total = mag2.sum().item<double>();
  if (total <= 0.0) {
    return torch::full_like(mag2, 1.0 / static_cast<double>(mag2.numel()));
  }
  return mag2 / total;
}

SparseFlowControl sample_control_pixels(const torch::Tensor& flow, int n_c, Rng& rng) {
  if (flow.dim() != 3 || flow.size(0) != 2) throw ShapeError("dense flow must have shape (2, H, W)");
  const int height = static_cast<int>(flow.size(1));
  const int width = static_cast<int>(flow.size(2));
  const int64_t n_pixels = static_cast<int64_t>(height) * width;
  if (n_c < 0 || n_c > n_pixels) {
    throw DomainError("n_c=" + std::to_string(n_c) + " outside [0, " + std::to_string(n_pixels) + "]");
  }

  auto prob = flow_sampling_distribution(flow).contiguous();
  std::vector<double> weights(prob.data_ptr<double>(), prob.data_ptr<double>() + n_pixels);
  auto flow_cpu = flow.to(torch::kFloat32).contiguous();
  auto acc = flow_cpu.accessor<float, 3>();

  std::vector<ControlPoint> points;
  points.reserve(n_c);
  std::vector<bool> taken(n_pixels, false);
  for (int draw = 0; draw < n_c; ++draw) {
    double remaining = 0.0;
    for (int64_t k = 0; k < n_pixels; ++k) {
      if (!taken[k]) remaining += weights[k];
    }
    int64_t chosen = -1;
    if (remaining > 0.0) {
      const double u = rng.uniform() * remaining;
      double cum = 0.0;
      for (int64_t k = 0; k < n_pixels; ++k) {
        if (taken[k] || weights[k] <= 0.0) continue;
        cum += weights[k];
        chosen = k;
        if (u < cum) break;
      }
    } else {
      // Every pixel with mass is already taken; the rest are equally likely.
      int64_t rank = rng.uniform_int(0, n_pixels - draw - 1);
      for (int64_t k = 0; k < n_pixels; ++k) {
        if (taken[k]) continue;
        if (rank-- == 0) {
          chosen = k;
          break;
        }
      }
    }
    taken[chosen] = true;
    const int i = static_cast<int>(chosen / width);
    const int j = static_cast<int>(chosen % width);
    points.push_back({i, j, acc[0][i][j], acc[1][i][j]});
  }
  return make_control(std::move(points), height, width);
}

torch::Tensor build_sparse_raster(const std::vector<ControlPoint>& points, int height, int width) {
  auto raster = torch::zeros({3, height, width}, torch::kFloat32);
  auto acc = raster.accessor<float, 3>();
  std::set<std::pair<int, int>> seen;
  for (const auto& p : points) {
    if (p.i < 0 || p.i >= height || p.j < 0 || p.j >= width) {
      throw DomainError("control pixel (" + std::to_string(p.i) + ", " + std::to_string(p.j) +
                        ") outside " + std::to_string(height) + "x" + std::to_string(width) + " frame");
    }
    if (!std::isfinite(p.di) || !std::isfinite(p.dj)) throw DomainError("control displacement must be finite");
    if (!seen.emplace(p.i, p.j).second) {
      throw DomainError("duplicate control pixel (" + std::to_string(p.i) + ", " + std::to_string(p.j) + ")");
    }
    acc[0][p.i][p.j] = 1.0f;
    acc[1][p.i][p.j] = p.di;
    acc[2][p.i][p.j] = p.dj;
  }
  return raster;
}

SparseFlowControl make_control(std::vector<ControlPoint> points, int height, int width) {
  auto raster = build_sparse_raster(points, height, width);
  return {std::move(points), std::move(raster)};
}

torch::Tensor noise_control_tokens(at::IntArrayRef shape, Rng& rng) { return rng.randn(shape); }

ControlEncoderImpl::ControlEncoderImpl(ControlEncoderConfig cfg) : cfg_(cfg) {
  if (cfg_.grid_size < 1 || cfg_.tile_h < 1 || cfg_.tile_w < 1 || cfg_.d_ctrl < 1 || cfg_.n_blocks < 1) {
    throw ConfigError("invalid control encoder configuration");
  }
  const int in_features = 3 * cfg_.tile_h * cfg_.tile_w;
  input_proj_ = register_module("input_proj", torch::nn::Linear(in_features, cfg_.d_ctrl));
  norms_ = register_module("norms", torch::nn::ModuleList());
  linears_ = register_module("linears", torch::nn::ModuleList());
  for (int b = 0; b < cfg_.n_blocks; ++b) {
    norms_->push_back(torch::nn::BatchNorm1d(cfg_.d_ctrl));
    linears_->push_back(torch::nn::Linear(cfg_.d_ctrl, cfg_.d_ctrl));
  }
  pos_embed_ = register_parameter("pos_embed", torch::randn({cfg_.n_tokens(), cfg_.d_ctrl}) * 0.02);
}

torch::Tensor ControlEncoderImpl::forward(const torch::Tensor& raster) {
  const int g = cfg_.grid_size;
  if (raster.dim() != 4 || raster.size(1) != 3) throw ShapeError("control raster must be (B, 3, H, W)");
  if (raster.size(2) != static_cast<int64_t>(g) * cfg_.tile_h || raster.size(3) != static_cast<int64_t>(g) * cfg_.tile_w) {
    throw ShapeError("control raster " + c10::str(raster.sizes()) + " does not tile into a " + std::to_string(g) +
                     "x" + std::to_string(g) + " grid of " + std::to_string(cfg_.tile_h) + "x" +
                     std::to_string(cfg_.tile_w) + " tiles");
  }
  const int64_t batch = raster.size(0);
  auto tiles = raster.view({batch, 3, g, cfg_.tile_h, g, cfg_.tile_w})
                   .permute({0, 2, 4, 1, 3, 5})
                   .reshape({batch * g * g, 3 * cfg_.tile_h * cfg_.tile_w});
  auto h = input_proj_->forward(tiles);
  for (int b = 0; b < cfg_.n_blocks; ++b) {
    h = norms_[b]->as<torch::nn::BatchNorm1d>()->forward(h);
    h = linears_[b]->as<torch::nn::Linear>()->forward(h);
    if (b + 1 < cfg_.n_blocks) h = torch::gelu(h);
  }
  return h.view({batch, g * g, cfg_.d_ctrl}) + pos_embed_;
}

}  // namespace forceworld::control
