#pragma once

#include <torch/types.h>

#include <filesystem>
#include <string>

namespace forceworld::image {

/// 8-bit RGB PNG of a (3, H, W) frame in [0, 1].
std::string encode_png(const torch::Tensor& frame);
/// Decode an RGB or RGBA PNG into a (3, H, W) float32 frame in [0, 1].
torch::Tensor decode_png(const std::string& bytes);

void write_png(const std::filesystem::path& path, const torch::Tensor& frame);

}  // namespace forceworld::image
