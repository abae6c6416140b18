#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "forceworld/control.hpp"
#include "forceworld/rng.hpp"
#include "forceworld/sampler.hpp"
#include "forceworld/world.hpp"
#include "json.hpp"

namespace forceworld::eval {

struct BlockMatchConfig {
  /// Odd side length of the compared block.
  int block = 5;
  /// Search range: displacements in [-radius, radius] on both axes.
  int radius = 4;
};

/// Integer per-pixel displacement (2, H, W) float32 from frame_a to frame_b.
/// Frames are (C, H, W) in [0, 1] and are quantized to 8 bits before
/// matching, so the SSD is exact. Pixels outside the frame replicate the
/// nearest edge pixel. Ties go to the smaller displacement norm, then to the
/// lexicographically smaller (di, dj).
torch::Tensor block_match_flow(const torch::Tensor& frame_a, const torch::Tensor& frame_b,
                               const BlockMatchConfig& cfg = {});

struct ProbeSpec {
  std::string image_id;
  int clip = 0;
  int frame = 0;
  int i = 0;
  int j = 0;
  double di = 0.0;
  double dj = 0.0;
  double r_loc = 3.0;
  double r_glob = 6.0;

  void validate(int height, int width) const;
};

void to_json(nlohmann::json& j, const ProbeSpec& p);
void from_json(const nlohmann::json& j, ProbeSpec& p);

struct LocalError {
  double rel_l2 = 0.0;
  double cosine_error = 0.0;
};

/// Mean flow over the disc of radius r_loc at the probe pixel, compared to the control.
LocalError local_error(const torch::Tensor& flow, const ProbeSpec& probe);
/// Mean per-pixel flow norm outside the disc of radius r_glob.
double global_error(const torch::Tensor& flow, const ProbeSpec& probe);

/// 1 - cos(a, b), or 1 when either vector is zero.
double cosine_error(double ai, double aj, double bi, double bj);

/// PSNR in dB for frames in [0, 1]; identical frames report 99.
double psnr(const torch::Tensor& a, const torch::Tensor& b);
/// Mean SSIM with a 7x7 uniform window, averaged over channels.
double ssim(const torch::Tensor& a, const torch::Tensor& b);

/// Produces the frame that follows `frame` under `controls`.
using FrameGenerator =
    std::function<torch::Tensor(const torch::Tensor& frame, const sampler::Controls& controls, uint64_t seed)>;

/// Single-frame-start generator backed by a trained network.
FrameGenerator model_generator(net::VectorFieldRegressor net, sampler::SessionConfig cfg);

struct PokeConfig {
  int n_repeats = 3;
  /// Pixels need cosine similarity to the poke above this value.
  double similarity_threshold = 0.5;
  double min_magnitude = 2.0;
  double max_magnitude = 4.0;
  BlockMatchConfig matcher;
  /// Erode each agreeing set by block/2: over flat surroundings, block
  /// matching carries an object's motion that far past its edge.
  bool erode_block_support = true;
};

/// Union over repeats of pixels that moved along a random poke at (i, j).
/// Returns a (H, W) bool mask.
torch::Tensor poke_segment(const FrameGenerator& generate, const torch::Tensor& frame, int i, int j,
                           const PokeConfig& cfg, Rng& rng);

/// Mask of pixels whose flow agrees with control d: cosine similarity above
/// `threshold` and norm above half of |d|.
torch::Tensor agreeing_pixels(const torch::Tensor& flow, double di, double dj, double threshold);

/// Binary erosion of a (H, W) mask with a square of side 2 * radius + 1.
/// Pixels beyond the border count as set.
torch::Tensor erode(const torch::Tensor& mask, int radius);

double iou(const torch::Tensor& a, const torch::Tensor& b);

struct Quantiles {
  double p25 = 0.0, p50 = 0.0, p75 = 0.0;
};
/// Linear-interpolated quantiles; throws DomainError on empty input.
Quantiles quantiles(std::vector<double> values);

struct ProbeSetConfig {
  int n_probes = 50;
  double r_loc = 3.0;
  double r_glob = 6.0;
  double min_magnitude = 1.5;
  double max_magnitude = 3.0;
  uint64_t seed = 0;
};

/// One probe per sampled (clip, frame 0, object): the object pixel deepest
/// inside its mask, with a random shift. Versioned JSON via probes_to_json.
std::vector<ProbeSpec> make_probes(const std::vector<world::VideoClip>& clips, const ProbeSetConfig& cfg);
nlohmann::json probes_to_json(const std::vector<ProbeSpec>& probes);
std::vector<ProbeSpec> probes_from_json(const nlohmann::json& j);

struct ProbeResult {
  ProbeSpec probe;
  LocalError local;
  double global = 0.0;
};

struct EvalConfig {
  BlockMatchConfig matcher;
  uint64_t seed = 0;
};

/// Run every probe through `generate` from its source frame and score the
/// block-matched flow between the source and generated frames.
std::vector<ProbeResult> evaluate_probes(const FrameGenerator& generate, const std::vector<world::VideoClip>& clips,
                                         const std::vector<ProbeSpec>& probes, const EvalConfig& cfg);

/// Report JSON: config echo, per-probe rows, p25/p50/p75 aggregates.
nlohmann::json probe_report(const std::vector<ProbeResult>& results, const EvalConfig& cfg);

struct SweepConfig {
  std::vector<double> magnitudes{1, 2, 4, 6, 8};
  int n_directions = 8;
  EvalConfig eval;
};

/// Replace each probe's shift by every (magnitude, direction) pair and bin
/// the local errors. Report JSON lists one row per bin with quantiles.
nlohmann::json control_sweep(const FrameGenerator& generate, const std::vector<world::VideoClip>& clips,
                             const std::vector<ProbeSpec>& probes, const SweepConfig& cfg);

}  // namespace forceworld::eval
