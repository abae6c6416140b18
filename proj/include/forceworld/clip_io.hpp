#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "forceworld/world.hpp"

namespace forceworld::world {

inline constexpr int kClipFormatVersion = 1;

/// Write a clip as a directory: manifest.json plus one raw little-endian file per tensor.
void write_clip(const VideoClip& clip, const WorldConfig& cfg, const std::filesystem::path& dir);
VideoClip read_clip(const std::filesystem::path& dir);

/// Raw tensor file helpers shared with other containers.
std::string dtype_name(torch::Dtype dtype);
torch::Dtype dtype_from_name(const std::string& name);
void write_raw_tensor(const torch::Tensor& tensor, const std::filesystem::path& file);
torch::Tensor read_raw_tensor(const std::filesystem::path& file, torch::Dtype dtype, const std::vector<int64_t>& shape);

/// A dataset is a directory of clip directories plus index.json.
struct DatasetIndex {
  std::filesystem::path root;
  std::vector<std::string> clips;
  WorldConfig config;
  uint64_t seed = 0;
  int frames_per_clip = 0;
};

/// Generate n_clips clips, each with its own RNG stream derived from (seed, clip index).
DatasetIndex make_dataset(const WorldConfig& cfg, int n_clips, int frames_per_clip, uint64_t seed,
                          const std::filesystem::path& out);
DatasetIndex read_dataset_index(const std::filesystem::path& root);
VideoClip load_clip(const DatasetIndex& index, size_t k);
std::vector<VideoClip> load_all_clips(const DatasetIndex& index);

/// FNV-1a over the index and every clip manifest; identifies the training data.
std::string dataset_fingerprint(const DatasetIndex& index);

}  // namespace forceworld::world
