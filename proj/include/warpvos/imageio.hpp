#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "warpvos/labels.hpp"
#include "warpvos/tensor.hpp"

// 8-bit image files: JPEG/PNG frames and indexed-palette PNG annotations.
namespace warpvos::imageio {

struct Image {
  std::int64_t height = 0, width = 0;
  int channels = 3;
  std::vector<std::uint8_t> pixels;  // interleaved
};

Image read_jpeg(const std::filesystem::path& path);
void write_jpeg(const Image& image, const std::filesystem::path& path, int quality = 95);

// RGB/grey PNG (palette images are expanded to RGB).
Image read_png(const std::filesystem::path& path);
void write_png(const Image& image, const std::filesystem::path& path);

// Indexed PNG whose palette index is the label. 8-bit greyscale PNGs are
// accepted too, with grey level = label.
LabelMap read_label_png(const std::filesystem::path& path);
void write_label_png(const LabelMap& labels, const std::filesystem::path& path);

// Reads .jpg/.jpeg or .png by extension.
Image read_image(const std::filesystem::path& path);

// Interleaved 8-bit RGB <-> [3, H, W] in [0, 1].
Tensor to_tensor(const Image& image);
Image from_tensor(const Tensor& rgb);

// The usual VOS annotation palette: index 0 black, then the bit-interleaved
// colour sequence.
std::array<std::uint8_t, 3> palette_color(int index);

}  // namespace warpvos::imageio
