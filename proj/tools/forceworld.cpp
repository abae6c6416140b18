#include <torch/torch.h>

#include <cstdio>
#include <iostream>
#include <regex>

#include "CLI11.hpp"
#include "forceworld/checkpoint.hpp"
#include "forceworld/clip_io.hpp"
#include "forceworld/config.hpp"
#include "forceworld/errors.hpp"
#include "forceworld/eval.hpp"
#include "forceworld/image.hpp"
#include "forceworld/sampler.hpp"
#include "forceworld/service.hpp"
#include "forceworld/trainer.hpp"
#include "forceworld/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace forceworld;

namespace {

json read_json(const fs::path& path) {
  try {
    return json::parse(util::read_text(path));
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what(), static_cast<long long>(e.byte));
  }
}

// "DIR[idx]" or plain "DIR" (clip 0).
std::pair<fs::path, int> parse_init(const std::string& spec) {
  static const std::regex re(R"((.*)\[(\d+)\])");
  std::smatch m;
  if (std::regex_match(spec, m, re)) return {m[1].str(), std::stoi(m[2].str())};
  return {spec, 0};
}

// Either a list of controls for the first step, or a list with one entry
// (a list of controls or null) per step.
std::vector<sampler::Controls> parse_controls(const json& j) {
  std::vector<sampler::Controls> out;
  if (j.is_null()) return out;
  if (!j.is_array()) throw ConfigError("controls file must hold a JSON array");
  const bool per_step = !j.empty() && (j.front().is_array() || j.front().is_null());
  if (!per_step) {
    out.emplace_back(j.get<std::vector<control::ControlPoint>>());
    return out;
  }
  for (const auto& step : j) {
    if (step.is_null()) {
      out.emplace_back(std::nullopt);
    } else {
      out.emplace_back(step.get<std::vector<control::ControlPoint>>());
    }
  }
  return out;
}

int cmd_make_data(const std::string& preset, const std::string& config, int clips, int frames, const fs::path& out,
                  uint64_t seed, int size) {
  auto cfg = config.empty() ? world::WorldConfig::preset_named(preset) : load_run_config(config).world;
  if (size > 0) cfg.height = cfg.width = size;
  auto index = world::make_dataset(cfg, clips, frames, seed, out);
  std::cout << "wrote " << index.clips.size() << " clips to " << out << " (fingerprint "
            << world::dataset_fingerprint(index) << ")\n";
  return 0;
}

int cmd_train(const fs::path& data, const fs::path& out, const std::string& config, int steps, int batch, double pi,
              int64_t seed, bool resume) {
  RunConfig cfg = config.empty() ? RunConfig{} : load_run_config(config);
  if (steps >= 0) cfg.train.total_steps = steps;
  if (batch > 0) cfg.train.batch_size = batch;
  if (pi >= 0.0) cfg.train.pi = pi;
  if (seed >= 0) cfg.train.seed = static_cast<uint64_t>(seed);
  auto index = world::read_dataset_index(data);
  cfg.world = index.config;
  cfg.net.height = index.config.height;
  cfg.net.width = index.config.width;
  cfg.validate();
  std::cout << "run fingerprint " << run_fingerprint(cfg, world::dataset_fingerprint(index)) << "\n";
  train::Trainer trainer(cfg.net, cfg.flow, cfg.train, world::load_all_clips(index), world::dataset_fingerprint(index),
                         cfg.world);
  const auto latest = out / "checkpoint.fwa";
  if (resume && fs::exists(latest)) {
    trainer.load_checkpoint(latest);
    std::cout << "resumed at step " << trainer.step() << "\n";
  }
  trainer.run(out, [](const train::StepLog& log) {
    std::printf("step %lld  loss %.5f  lr %.2e  %.1fs\n", static_cast<long long>(log.step), log.loss, log.lr,
                log.wall_time_s);
    std::fflush(stdout);
  });
  std::cout << "model written to " << out / "model.fwa" << "\n";
  return 0;
}

int cmd_generate(const fs::path& ckpt, const std::string& init, int init_frame, const std::string& controls_file,
                 int n_frames, const fs::path& out, uint64_t seed, int ode_steps) {
  auto bundle = ckpt::load_model(ckpt);
  auto [data, idx] = parse_init(init);
  auto index = world::read_dataset_index(data);
  if (idx < 0 || idx >= static_cast<int>(index.clips.size())) throw DomainError("clip index out of range");
  auto source = world::load_clip(index, idx);
  if (init_frame < 0 || init_frame >= source.n_frames()) throw DomainError("init frame out of range");
  std::vector<sampler::Controls> controls;
  if (!controls_file.empty()) controls = parse_controls(read_json(controls_file));

  sampler::SessionConfig scfg;
  scfg.flow = bundle.flow_cfg;
  if (ode_steps > 0) scfg.flow.n_ode_steps = ode_steps;
  sampler::GenerationSession session(bundle.net, scfg, source.frames[init_frame], seed);
  std::vector<torch::Tensor> frames{source.frames[init_frame]};
  for (auto& f : session.rollout(n_frames, controls)) frames.push_back(f);

  world::VideoClip clip;
  clip.frames = torch::stack(frames);
  std::vector<torch::Tensor> flows;
  for (size_t k = 0; k + 1 < frames.size(); ++k) flows.push_back(eval::block_match_flow(frames[k], frames[k + 1]));
  clip.flows = flows.empty() ? torch::zeros({0, 2, clip.frames.size(2), clip.frames.size(3)}) : torch::stack(flows);
  clip.masks = torch::zeros({clip.frames.size(0), 0, clip.frames.size(2), clip.frames.size(3)}, torch::kUInt8);
  clip.object_states = torch::zeros({clip.frames.size(0), 0, 4}, torch::kFloat64);
  clip.seed = seed;
  world::write_clip(clip, index.config, out);
  for (size_t k = 0; k < frames.size(); ++k) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%03zu.png", k);
    image::write_png(out / name, frames[k]);
  }
  std::cout << "wrote " << frames.size() << " frames to " << out << "\n";
  return 0;
}

int cmd_make_probes(const fs::path& data, const fs::path& out, const eval::ProbeSetConfig& cfg) {
  auto index = world::read_dataset_index(data);
  auto probes = eval::make_probes(world::load_all_clips(index), cfg);
  json j = eval::probes_to_json(probes);
  j["dataset_fingerprint"] = world::dataset_fingerprint(index);
  util::write_text_atomic(out, j.dump(2));
  std::cout << "wrote " << probes.size() << " probes to " << out << "\n";
  return 0;
}

int cmd_eval(const fs::path& ckpt, const fs::path& data, const fs::path& probes_file, const fs::path& report,
             bool sweep, const eval::BlockMatchConfig& matcher, uint64_t seed, int ode_steps) {
  auto bundle = ckpt::load_model(ckpt);
  auto index = world::read_dataset_index(data);
  auto clips = world::load_all_clips(index);
  auto probes = eval::probes_from_json(read_json(probes_file));
  sampler::SessionConfig scfg;
  scfg.flow = bundle.flow_cfg;
  if (ode_steps > 0) scfg.flow.n_ode_steps = ode_steps;
  auto gen = eval::model_generator(bundle.net, scfg);
  eval::EvalConfig ecfg{matcher, seed};
  json out = eval::probe_report(eval::evaluate_probes(gen, clips, probes, ecfg), ecfg);
  out["checkpoint_fingerprint"] = bundle.fingerprint;
  out["dataset_fingerprint"] = world::dataset_fingerprint(index);
  if (sweep) {
    eval::SweepConfig sc;
    sc.eval = ecfg;
    out["sweep"] = eval::control_sweep(gen, clips, probes, sc);
  }
  util::write_text_atomic(report, out.dump(2));
  const auto& agg = out["aggregate"];
  std::cout << "median local cosine error " << agg["local_cosine_error"]["p50"].get<double>()
            << ", median global error " << agg["global_error"]["p50"].get<double>() << " px\n";
  return 0;
}

int cmd_serve(const fs::path& ckpt, const fs::path& data, int port, const std::string& static_dir,
              const std::string& host) {
  service::ServiceConfig cfg;
  cfg.static_dir = static_dir;
  service::SessionService svc(cfg);
  svc.add_checkpoint(ckpt.stem().string(), ckpt);
  svc.set_dataset(data);
  service::HttpServer server(svc);
  std::cout << "serving on http://" << host << ":" << port << "\n";
  server.listen(host, port);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"forceworld: controllable video generation with flow matching"};
  app.require_subcommand(1);

  auto* mk = app.add_subcommand("make-data", "simulate a dataset of clips");
  std::string preset = "pusher", mk_config;
  int n_clips = 1000, n_frames = 16, size = 0;
  std::string mk_out;
  uint64_t mk_seed = 7;
  mk->add_option("--preset", preset, "interactions or pusher")->capture_default_str();
  mk->add_option("--config", mk_config, "run config JSON; its world section replaces the preset");
  mk->add_option("--clips", n_clips)->capture_default_str();
  mk->add_option("--frames", n_frames, "frames per clip")->capture_default_str();
  mk->add_option("--size", size, "square arena side in pixels");
  mk->add_option("--out", mk_out)->required();
  mk->add_option("--seed", mk_seed)->capture_default_str();

  auto* tr = app.add_subcommand("train", "train a vector-field network");
  std::string tr_data, tr_out, tr_config;
  int tr_steps = -1, tr_batch = 0;
  double tr_pi = -1.0;
  int64_t tr_seed = -1;
  bool tr_resume = false;
  tr->add_option("--data", tr_data)->required();
  tr->add_option("--out", tr_out)->required();
  tr->add_option("--config", tr_config, "run config JSON");
  tr->add_option("--steps", tr_steps);
  tr->add_option("--batch", tr_batch);
  tr->add_option("--pi", tr_pi, "conditioning dropout probability");
  tr->add_option("--seed", tr_seed);
  tr->add_flag("--resume", tr_resume, "continue from OUT/checkpoint.fwa");

  auto* ge = app.add_subcommand("generate", "roll out a video from a dataset frame");
  std::string ge_ckpt, ge_init, ge_controls, ge_out;
  int ge_frames = 10, ge_init_frame = 0, ge_ode = 0;
  uint64_t ge_seed = 0;
  ge->add_option("--ckpt", ge_ckpt)->required();
  ge->add_option("--init-from", ge_init, "DATASET[idx]")->required();
  ge->add_option("--init-frame", ge_init_frame)->capture_default_str();
  ge->add_option("--controls", ge_controls, "JSON controls file");
  ge->add_option("--frames", ge_frames)->capture_default_str();
  ge->add_option("--out", ge_out)->required();
  ge->add_option("--seed", ge_seed)->capture_default_str();
  ge->add_option("--ode-steps", ge_ode);

  auto* mp = app.add_subcommand("make-probes", "build a probe file from held-out clips");
  std::string mp_data, mp_out;
  eval::ProbeSetConfig mp_cfg;
  mp->add_option("--data", mp_data)->required();
  mp->add_option("--out", mp_out)->required();
  mp->add_option("--n", mp_cfg.n_probes)->capture_default_str();
  mp->add_option("--r-loc", mp_cfg.r_loc)->capture_default_str();
  mp->add_option("--r-glob", mp_cfg.r_glob)->capture_default_str();
  mp->add_option("--min-magnitude", mp_cfg.min_magnitude)->capture_default_str();
  mp->add_option("--max-magnitude", mp_cfg.max_magnitude)->capture_default_str();
  mp->add_option("--seed", mp_cfg.seed)->capture_default_str();

  auto* ev = app.add_subcommand("eval", "score controllability on a probe set");
  std::string ev_ckpt, ev_data, ev_probes, ev_report;
  bool ev_sweep = false;
  eval::BlockMatchConfig ev_matcher;
  uint64_t ev_seed = 0;
  int ev_ode = 0;
  ev->add_option("--ckpt", ev_ckpt)->required();
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--probes", ev_probes)->required();
  ev->add_option("--report", ev_report)->required();
  ev->add_flag("--sweep", ev_sweep, "also run the magnitude/direction sweep");
  ev->add_option("--block", ev_matcher.block)->capture_default_str();
  ev->add_option("--radius", ev_matcher.radius)->capture_default_str();
  ev->add_option("--seed", ev_seed)->capture_default_str();
  ev->add_option("--ode-steps", ev_ode);

  auto* sv = app.add_subcommand("serve", "HTTP service for interactive sessions");
  std::string sv_ckpt, sv_data, sv_static, sv_host = "127.0.0.1";
  int sv_port = 8080;
  sv->add_option("--ckpt", sv_ckpt)->required();
  sv->add_option("--data", sv_data)->required();
  sv->add_option("--port", sv_port)->capture_default_str();
  sv->add_option("--host", sv_host)->capture_default_str();
  sv->add_option("--static", sv_static, "directory with the built UI bundle");

  CLI11_PARSE(app, argc, argv);
  torch::set_num_threads(std::max(1, static_cast<int>(std::thread::hardware_concurrency())));

  try {
    if (*mk) return cmd_make_data(preset, mk_config, n_clips, n_frames, mk_out, mk_seed, size);
    if (*tr) return cmd_train(tr_data, tr_out, tr_config, tr_steps, tr_batch, tr_pi, tr_seed, tr_resume);
    if (*ge) return cmd_generate(ge_ckpt, ge_init, ge_init_frame, ge_controls, ge_frames, ge_out, ge_seed, ge_ode);
    if (*mp) return cmd_make_probes(mp_data, mp_out, mp_cfg);
    if (*ev) return cmd_eval(ev_ckpt, ev_data, ev_probes, ev_report, ev_sweep, ev_matcher, ev_seed, ev_ode);
    if (*sv) return cmd_serve(sv_ckpt, sv_data, sv_port, sv_static, sv_host);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
