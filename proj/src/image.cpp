#include "strokenext/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "strokenext/errors.hpp"

namespace strokenext {

Image read_png(const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.string().c_str())) {
    throw IoError("cannot decode image '" + path.string() + "': " + png.message);
  }
  const bool gray = (png.format & PNG_FORMAT_FLAG_COLOR) == 0;
  png.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  const int channels = gray ? 1 : 3;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buffer.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw IoError("cannot decode image '" + path.string() + "': " + msg);
  }
  Image out(static_cast<int>(png.width), static_cast<int>(png.height), channels);
  for (std::size_t i = 0; i < buffer.size(); ++i) {
    out.pixels[i] = static_cast<float>(buffer[i]) / 255.0f;
  }
  return out;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw IoError("cannot write '" + path.string() + "': unsupported channel count");
  }
  std::vector<png_byte> buffer(image.pixels.size());
  for (std::size_t i = 0; i < buffer.size(); ++i) {
    const float v = std::clamp(image.pixels[i], 0.0f, 1.0f);
    buffer[i] = static_cast<png_byte>(std::lround(v * 255.0f));
  }
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.string().c_str(), 0, buffer.data(), 0,
                               nullptr)) {
    throw IoError("cannot write '" + path.string() + "': " + png.message);
  }
}

namespace {

// Bilinear sample at continuous coordinates (pixel centers at integers).
// Samples outside the grid read as `fill` when clamp is false.
float sample(const Image& src, double x, double y, int c, bool clamp, float fill) {
  const double fx = std::floor(x);
  const double fy = std::floor(y);
  const int x0 = static_cast<int>(fx);
  const int y0 = static_cast<int>(fy);
  const double ax = x - fx;
  const double ay = y - fy;
  auto px = [&](int xi, int yi) -> double {
    if (clamp) {
      xi = std::clamp(xi, 0, src.width - 1);
      yi = std::clamp(yi, 0, src.height - 1);
    } else if (xi < 0 || yi < 0 || xi >= src.width || yi >= src.height) {
      return fill;
    }
    return src.at(xi, yi, c);
  };
  const double top = px(x0, y0) * (1.0 - ax) + px(x0 + 1, y0) * ax;
  const double bottom = px(x0, y0 + 1) * (1.0 - ax) + px(x0 + 1, y0 + 1) * ax;
  return static_cast<float>(top * (1.0 - ay) + bottom * ay);
}

}  // namespace

Image resize_bilinear(const Image& src, int out_width, int out_height) {
  if (src.width == out_width && src.height == out_height) return src;
  Image out(out_width, out_height, src.channels);
  const double sx = static_cast<double>(src.width) / out_width;
  const double sy = static_cast<double>(src.height) / out_height;
  for (int y = 0; y < out_height; ++y) {
    const double src_y = (y + 0.5) * sy - 0.5;
    for (int x = 0; x < out_width; ++x) {
      const double src_x = (x + 0.5) * sx - 0.5;
      for (int c = 0; c < src.channels; ++c) {
        out.at(x, y, c) = sample(src, src_x, src_y, c, true, 0.0f);
      }
    }
  }
  return out;
}

Image rotate_bilinear(const Image& src, double degrees) {
  if (degrees == 0.0) return src;
  Image out(src.width, src.height, src.channels);
  const double theta = degrees * std::numbers::pi / 180.0;
  const double cos_t = std::cos(theta);
  const double sin_t = std::sin(theta);
  const double cx = (src.width - 1) * 0.5;
  const double cy = (src.height - 1) * 0.5;
  for (int y = 0; y < src.height; ++y) {
    for (int x = 0; x < src.width; ++x) {
      // Inverse mapping: rotate the destination point back into the source.
      const double dx = x - cx;
      const double dy = y - cy;
      const double src_x = cos_t * dx + sin_t * dy + cx;
      const double src_y = -sin_t * dx + cos_t * dy + cy;
      for (int c = 0; c < src.channels; ++c) {
        out.at(x, y, c) = sample(src, src_x, src_y, c, false, 0.0f);
      }
    }
  }
  return out;
}

Image flip_horizontal(const Image& src) {
  Image out(src.width, src.height, src.channels);
  for (int y = 0; y < src.height; ++y) {
    for (int x = 0; x < src.width; ++x) {
      for (int c = 0; c < src.channels; ++c) {
        out.at(src.width - 1 - x, y, c) = src.at(x, y, c);
      }
    }
  }
  return out;
}

}  // namespace strokenext
