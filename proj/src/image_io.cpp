#include "trajguide/image_io.hpp"

#include <openssl/evp.h>
#include <openssl/sha.h>
#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

namespace trajguide {

namespace {

void put_u32(Bytes& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

void put_chunk(Bytes& out, const char (&type)[5], const Bytes& data) {
  put_u32(out, static_cast<std::uint32_t>(data.size()));
  const std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const uLong crc = crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
  put_u32(out, static_cast<std::uint32_t>(crc));
}

// Small qualitative palette for token labels.
constexpr std::array<std::array<int, 3>, 6> kPalette{{
    {230, 80, 60}, {60, 140, 230}, {90, 200, 90}, {240, 190, 50}, {170, 90, 220}, {60, 210, 210}}};

}  // namespace

Bytes encode_png(int width, int height, int channels, std::span<const std::uint8_t> pixels) {
  if (width <= 0 || height <= 0 || (channels != 1 && channels != 3)) throw std::invalid_argument("bad PNG shape");
  const auto row = static_cast<std::size_t>(width) * static_cast<std::size_t>(channels);
  if (pixels.size() != row * static_cast<std::size_t>(height)) throw std::invalid_argument("PNG pixel count mismatch");

  Bytes raw;
  raw.reserve((row + 1) * static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) {
    raw.push_back(0);  // filter: none
    const auto begin = pixels.begin() + static_cast<std::ptrdiff_t>(row * static_cast<std::size_t>(y));
    raw.insert(raw.end(), begin, begin + static_cast<std::ptrdiff_t>(row));
  }
  uLongf packed_size = compressBound(static_cast<uLong>(raw.size()));
  Bytes packed(packed_size);
  if (compress2(packed.data(), &packed_size, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK) {
    throw std::runtime_error("zlib compression failed");
  }
  packed.resize(packed_size);

  Bytes out{0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  Bytes header;
  put_u32(header, static_cast<std::uint32_t>(width));
  put_u32(header, static_cast<std::uint32_t>(height));
  header.push_back(8);
  header.push_back(channels == 1 ? 0 : 2);
  header.push_back(0);
  header.push_back(0);
  header.push_back(0);
  put_chunk(out, "IHDR", header);
  put_chunk(out, "IDAT", packed);
  put_chunk(out, "IEND", {});
  return out;
}

Bytes image_png(const Image& image) {
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(image.width) * static_cast<std::size_t>(image.height) * 3);
  for (std::size_t i = 0; i < image.intensity.size(); ++i) {
    const auto& color = kPalette[static_cast<std::size_t>(image.labels[i]) % kPalette.size()];
    const double v = std::clamp(static_cast<double>(image.intensity[i]), 0.0, 1.0);
    for (int ch = 0; ch < 3; ++ch) rgb[i * 3 + static_cast<std::size_t>(ch)] = static_cast<std::uint8_t>(std::lround(v * color[static_cast<std::size_t>(ch)]));
  }
  return encode_png(image.width, image.height, 3, rgb);
}

Bytes mask_png(const CellSet& mask) {
  std::vector<std::uint8_t> gray = mask.occupancy();
  for (auto& g : gray) g = g ? 255 : 0;
  return encode_png(mask.dims().width, mask.dims().height, 1, gray);
}

Bytes heatmap_png(std::span<const float> values, GridDims dims) {
  if (values.size() != dims.size()) throw std::invalid_argument("heatmap size mismatch");
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const float range = *hi - *lo;
  std::vector<std::uint8_t> gray(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    gray[i] = range > 0.0f ? static_cast<std::uint8_t>(std::lround(255.0f * (values[i] - *lo) / range)) : 0;
  }
  return encode_png(dims.width, dims.height, 1, gray);
}

std::string sha256_hex(std::span<const unsigned char> data) {
  std::array<unsigned char, SHA256_DIGEST_LENGTH> digest{};
  unsigned int len = 0;
  EVP_Digest(data.data(), data.size(), digest.data(), &len, EVP_sha256(), nullptr);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xf]);
  }
  return out;
}

std::string sha256_hex(std::string_view data) {
  return sha256_hex(std::span(reinterpret_cast<const unsigned char*>(data.data()), data.size()));
}

std::string base64_encode(std::span<const unsigned char> data) {
  std::string out(4 * ((data.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), data.data(), static_cast<int>(data.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

}  // namespace trajguide
