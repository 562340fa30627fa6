#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace tlvm {

// 8-bit interleaved RGB, row-major.
struct RawImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * 3 + c];
  }
};

// Encoder input: kImageSide x kImageSide x 3, HWC, values in [-1, 1].
struct ImageTensor {
  static constexpr std::size_t kSide = 64;
  static constexpr std::size_t kChannels = 3;
  std::vector<double> values;
};

// Binary PPM ("P6", maxval 255). Header comments are accepted.
RawImage decode_ppm(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_ppm(const RawImage& image);

RawImage read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const RawImage& image);

// Nearest-neighbour resample to 64x64, then v / 127.5 - 1.
ImageTensor normalize(const RawImage& image);

}  // namespace tlvm
