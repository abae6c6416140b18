#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace forceworld::util {

inline constexpr uint64_t kFnvOffset = 0xcbf29ce484222325ULL;

uint64_t fnv1a(std::string_view bytes, uint64_t hash = kFnvOffset);
std::string hex64(uint64_t value);

std::string read_text(const std::filesystem::path& path);
/// Write to a sibling temp file, then rename over the target.
void write_text_atomic(const std::filesystem::path& path, std::string_view contents);

std::string base64_encode(std::string_view bytes);
std::string base64_decode(std::string_view text);

}  // namespace forceworld::util
