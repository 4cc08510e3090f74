#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "sdreid/tensor.hpp"

namespace sdreid::io {

struct Rgb8Image {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<uint8_t> pixels;  // row-major RGB
};

/// Decodes any PNG libpng understands into 8-bit RGB. Throws DataError.
Rgb8Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Rgb8Image& image);

/// [H, W, 3] in [0, 1] <-> 8-bit, with round-to-nearest and clamping.
Rgb8Image to_rgb8(const Tensor& pixels);
Tensor from_rgb8(const Rgb8Image& image);

/// Bilinear resampling with half-pixel centers of an [H, W, 3] tensor.
Tensor resize_bilinear(const Tensor& pixels, int64_t height, int64_t width);

}  // namespace sdreid::io
