#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace strokenext {

// Interleaved (height, width, channels) pixel grid with values in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int w, int h, int c, float fill = 0.0f)
      : width(w), height(h), channels(c),
        pixels(static_cast<std::size_t>(w) * h * c, fill) {}

  float& at(int x, int y, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  float at(int x, int y, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }

  bool operator==(const Image&) const = default;
};

// Decodes an 8-bit PNG. Grayscale stays 1-channel, anything else becomes RGB.
// Throws IoError naming the path on failure.
Image read_png(const std::filesystem::path& path);

// Writes 1- or 3-channel images as 8-bit PNG (values clamped to [0, 1]).
void write_png(const std::filesystem::path& path, const Image& image);

// Bilinear resampling with half-pixel centers (edge-clamped).
Image resize_bilinear(const Image& src, int out_width, int out_height);

// Rotation about the image center; exposed corners are filled with 0.
Image rotate_bilinear(const Image& src, double degrees);

Image flip_horizontal(const Image& src);

}  // namespace strokenext
