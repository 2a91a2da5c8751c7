#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace calseg {

struct GrayImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

/// 8-bit grayscale PNG. Palette/RGB/16-bit inputs are converted on read.
GrayImage read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const GrayImage& image);

}  // namespace calseg
