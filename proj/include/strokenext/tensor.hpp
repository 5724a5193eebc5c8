#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "strokenext/errors.hpp"

namespace strokenext {

// Batch of feature maps with logical shape [batch, channels, height, width].
// Storage is channels-last (b, y, x, c) so that per-position channel vectors
// are contiguous; `at` hides the layout.
template <typename T>
struct FeatureMap {
  std::size_t batch = 0;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<T> values;

  FeatureMap() = default;
  FeatureMap(std::size_t b, std::size_t c, std::size_t h, std::size_t w, T fill = T(0))
      : batch(b), channels(c), height(h), width(w), values(b * c * h * w, fill) {}

  std::size_t positions() const { return batch * height * width; }

  T& at(std::size_t b, std::size_t c, std::size_t y, std::size_t x) {
    return values[((b * height + y) * width + x) * channels + c];
  }
  T at(std::size_t b, std::size_t c, std::size_t y, std::size_t x) const {
    return values[((b * height + y) * width + x) * channels + c];
  }

  std::vector<std::size_t> shape() const { return {batch, channels, height, width}; }
};

// Per-sample vectors, shape [batch, channels], row-major.
template <typename T>
struct Embedding {
  std::size_t batch = 0;
  std::size_t channels = 0;
  std::vector<T> values;

  Embedding() = default;
  Embedding(std::size_t b, std::size_t c, T fill = T(0))
      : batch(b), channels(c), values(b * c, fill) {}

  T& at(std::size_t b, std::size_t c) { return values[b * channels + c]; }
  T at(std::size_t b, std::size_t c) const { return values[b * channels + c]; }

  std::span<T> row(std::size_t b) { return {values.data() + b * channels, channels}; }
  std::span<const T> row(std::size_t b) const {
    return {values.data() + b * channels, channels};
  }
};

inline std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace strokenext
