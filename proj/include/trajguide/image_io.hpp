#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "trajguide/geometry.hpp"
#include "trajguide/model.hpp"

namespace trajguide {

using Bytes = std::vector<unsigned char>;

/// 8-bit PNG, one (gray) or three (RGB) channels, no interlace.
Bytes encode_png(int width, int height, int channels, std::span<const std::uint8_t> pixels);

/// Label-tinted rendering of a sandbox image.
Bytes image_png(const Image& image);
/// 0/255 mask.
Bytes mask_png(const CellSet& mask);
/// Per-frame normalized heatmap (min -> 0, max -> 255).
Bytes heatmap_png(std::span<const float> values, GridDims dims);

std::string sha256_hex(std::span<const unsigned char> data);
std::string sha256_hex(std::string_view data);
std::string base64_encode(std::span<const unsigned char> data);

}  // namespace trajguide
