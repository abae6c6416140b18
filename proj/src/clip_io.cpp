#include "forceworld/clip_io.hpp"

#include <torch/torch.h>

#include <bit>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "forceworld/errors.hpp"
#include "forceworld/util.hpp"

namespace forceworld::world {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "raw tensor files assume a little-endian host");

std::string dtype_name(torch::Dtype dtype) {
  switch (dtype) {
    case torch::kFloat32: return "f32";
    case torch::kFloat64: return "f64";
    case torch::kUInt8: return "u8";
    case torch::kInt32: return "i32";
    case torch::kInt64: return "i64";
    default: throw FormatError("unsupported tensor dtype for raw storage");
  }
}

torch::Dtype dtype_from_name(const std::string& name) {
  if (name == "f32") return torch::kFloat32;
  if (name == "f64") return torch::kFloat64;
  if (name == "u8") return torch::kUInt8;
  if (name == "i32") return torch::kInt32;
  if (name == "i64") return torch::kInt64;
  throw FormatError("unknown dtype '" + name + "'");
}

void write_raw_tensor(const torch::Tensor& tensor, const fs::path& file) {
  auto t = tensor.contiguous().cpu();
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + file.string() + " for writing");
  out.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(t.nbytes()));
  if (!out) throw std::runtime_error("write failed for " + file.string());
}

torch::Tensor read_raw_tensor(const fs::path& file, torch::Dtype dtype, const std::vector<int64_t>& shape) {
  std::ifstream in(file, std::ios::binary | std::ios::ate);
  if (!in) throw FormatError("missing tensor file " + file.string());
  const auto size = static_cast<int64_t>(in.tellg());
  auto tensor = torch::empty(shape, torch::TensorOptions().dtype(dtype));
  const auto expected = static_cast<int64_t>(tensor.nbytes());
  if (size != expected) {
    throw FormatError(file.filename().string() + ": expected " + std::to_string(expected) + " bytes for shape " +
                          c10::str(tensor.sizes()) + ", file has " + std::to_string(size),
                      std::min(size, expected));
  }
  in.seekg(0);
  in.read(static_cast<char*>(tensor.data_ptr()), expected);
  if (!in) throw FormatError("short read in " + file.string(), static_cast<long long>(in.gcount()));
  return tensor;
}

namespace {

json field_entry(const torch::Tensor& t, const std::string& file) {
  return json{{"dtype", dtype_name(t.scalar_type())}, {"shape", t.sizes().vec()}, {"file", file}};
}

torch::Tensor read_field(const fs::path& dir, const json& manifest, const std::string& name) {
  if (!manifest.contains("fields") || !manifest["fields"].contains(name)) {
    throw FormatError("manifest lacks field '" + name + "'");
  }
  const auto& f = manifest["fields"][name];
  std::vector<int64_t> shape;
  try {
    shape = f.at("shape").get<std::vector<int64_t>>();
  } catch (const json::exception& e) {
    throw FormatError("bad shape for field '" + name + "': " + e.what());
  }
  for (auto s : shape) {
    if (s < 0) throw FormatError("negative extent in field '" + name + "'");
  }
  return read_raw_tensor(dir / f.at("file").get<std::string>(), dtype_from_name(f.at("dtype").get<std::string>()),
                         shape);
}

}  // namespace

void write_clip(const VideoClip& clip, const WorldConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir);
  write_raw_tensor(clip.frames, dir / "frames.bin");
  write_raw_tensor(clip.flows, dir / "flows.bin");
  write_raw_tensor(clip.masks, dir / "masks.bin");
  write_raw_tensor(clip.object_states, dir / "states.bin");
  std::vector<std::string> shapes;
  for (auto s : clip.shapes) shapes.push_back(to_string(s));
  json manifest{{"format_version", kClipFormatVersion},
                {"seed", clip.seed},
                {"config", cfg},
                {"objects", {{"shapes", shapes}, {"radii", clip.radii}, {"colors", clip.colors},
                             {"agent_index", clip.agent_index}}},
                {"fields", {{"frames", field_entry(clip.frames, "frames.bin")},
                            {"flows", field_entry(clip.flows, "flows.bin")},
                            {"masks", field_entry(clip.masks, "masks.bin")},
                            {"object_states", field_entry(clip.object_states, "states.bin")}}}};
  util::write_text_atomic(dir / "manifest.json", manifest.dump(2));
}

VideoClip read_clip(const fs::path& dir) {
  json manifest;
  try {
    manifest = json::parse(util::read_text(dir / "manifest.json"));
  } catch (const json::parse_error& e) {
    throw FormatError("manifest.json: " + std::string(e.what()), static_cast<long long>(e.byte));
  }
  if (manifest.value("format_version", -1) != kClipFormatVersion) {
    throw FormatError("unsupported clip format version");
  }
  VideoClip clip;
  try {
    clip.frames = read_field(dir, manifest, "frames");
    clip.flows = read_field(dir, manifest, "flows");
    clip.masks = read_field(dir, manifest, "masks");
    clip.object_states = read_field(dir, manifest, "object_states");
    clip.seed = manifest.value("seed", uint64_t{0});
    const auto& objs = manifest.at("objects");
    for (const auto& s : objs.at("shapes")) clip.shapes.push_back(shape_from_string(s.get<std::string>()));
    clip.radii = objs.at("radii").get<std::vector<double>>();
    clip.colors = objs.at("colors").get<std::vector<Color>>();
    clip.agent_index = objs.at("agent_index").get<int>();
  } catch (const json::exception& e) {
    throw FormatError("manifest.json: " + std::string(e.what()));
  } catch (const ConfigError& e) {
    throw FormatError("manifest.json: " + std::string(e.what()));
  }

  const auto n = clip.frames.size(0);
  if (clip.frames.dim() != 4 || clip.frames.size(1) != 3) throw FormatError("frames must be (N, 3, H, W)");
  const auto h = clip.frames.size(2);
  const auto w = clip.frames.size(3);
  if (clip.flows.dim() != 4 || clip.flows.size(0) != n - 1 || clip.flows.size(1) != 2 || clip.flows.size(2) != h ||
      clip.flows.size(3) != w) {
    throw FormatError("flows shape " + c10::str(clip.flows.sizes()) + " inconsistent with frames");
  }
  const auto n_obj = static_cast<int64_t>(clip.shapes.size());
  if (clip.masks.dim() != 4 || clip.masks.size(0) != n || clip.masks.size(1) != n_obj || clip.masks.size(2) != h ||
      clip.masks.size(3) != w) {
    throw FormatError("masks shape " + c10::str(clip.masks.sizes()) + " inconsistent with frames/objects");
  }
  if (clip.object_states.dim() != 3 || clip.object_states.size(0) != n || clip.object_states.size(1) != n_obj ||
      clip.object_states.size(2) != 4) {
    throw FormatError("object_states shape inconsistent with frames/objects");
  }
  if (static_cast<int64_t>(clip.radii.size()) != n_obj || static_cast<int64_t>(clip.colors.size()) != n_obj) {
    throw FormatError("object metadata length mismatch");
  }
  return clip;
}

DatasetIndex make_dataset(const WorldConfig& cfg, int n_clips, int frames_per_clip, uint64_t seed, const fs::path& out) {
  cfg.validate();
  if (n_clips < 1) throw ConfigError("dataset needs at least one clip");
  fs::create_directories(out);
  DatasetIndex index;
  index.root = out;
  index.config = cfg;
  index.seed = seed;
  index.frames_per_clip = frames_per_clip;
  for (int k = 0; k < n_clips; ++k) {
    const uint64_t clip_seed = mix_seed(seed, static_cast<uint64_t>(k));
    Rng rng(clip_seed);
    auto clip = simulate(cfg, frames_per_clip, rng);
    clip.seed = clip_seed;
    std::ostringstream name;
    name << "clip_" << std::setw(6) << std::setfill('0') << k;
    write_clip(clip, cfg, out / name.str());
    index.clips.push_back(name.str());
  }
  json j{{"format_version", kClipFormatVersion},
         {"seed", seed},
         {"frames_per_clip", frames_per_clip},
         {"config", cfg},
         {"clips", index.clips}};
  util::write_text_atomic(out / "index.json", j.dump(2));
  return index;
}

DatasetIndex read_dataset_index(const fs::path& root) {
  json j;
  try {
    j = json::parse(util::read_text(root / "index.json"));
  } catch (const json::parse_error& e) {
    throw FormatError("index.json: " + std::string(e.what()), static_cast<long long>(e.byte));
  }
  DatasetIndex index;
  index.root = root;
  try {
    index.clips = j.at("clips").get<std::vector<std::string>>();
    index.config = j.at("config").get<WorldConfig>();
    index.seed = j.value("seed", uint64_t{0});
    index.frames_per_clip = j.value("frames_per_clip", 0);
  } catch (const json::exception& e) {
    throw FormatError("index.json: " + std::string(e.what()));
  }
  if (index.clips.empty()) throw FormatError("dataset index lists no clips");
  return index;
}

VideoClip load_clip(const DatasetIndex& index, size_t k) {
  if (k >= index.clips.size()) {
    throw DomainError("clip index " + std::to_string(k) + " out of range (" + std::to_string(index.clips.size()) +
                      " clips)");
  }
  return read_clip(index.root / index.clips[k]);
}

std::vector<VideoClip> load_all_clips(const DatasetIndex& index) {
  std::vector<VideoClip> clips;
  clips.reserve(index.clips.size());
  for (size_t k = 0; k < index.clips.size(); ++k) clips.push_back(load_clip(index, k));
  return clips;
}

std::string dataset_fingerprint(const DatasetIndex& index) {
  uint64_t h = util::fnv1a(util::read_text(index.root / "index.json"));
  for (const auto& name : index.clips) {
    h = util::fnv1a(util::read_text(index.root / name / "manifest.json"), h);
  }
  return util::hex64(h);
}

}  // namespace forceworld::world
