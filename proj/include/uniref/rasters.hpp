#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "uniref/common.hpp"

namespace uniref {

struct Rgb {
  std::uint8_t r = 0;
  std::uint8_t g = 0;
  std::uint8_t b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

/// Squared Euclidean distance in RGB space.
inline int rgb_dist2(Rgb a, Rgb b) {
  const int dr = int(a.r) - int(b.r), dg = int(a.g) - int(b.g), db = int(a.b) - int(b.b);
  return dr * dr + dg * dg + db * db;
}

/// H x W x 3 8-bit image, row-major with interleaved channels.
class RasterImage {
 public:
  RasterImage() = default;
  RasterImage(int height, int width, Rgb fill = {});

  int height() const { return height_; }
  int width() const { return width_; }
  bool empty() const { return pixels_.empty(); }

  Rgb at(int row, int col) const;
  void set(int row, int col, Rgb c);
  std::uint8_t channel(int row, int col, int ch) const { return pixels_[index(row, col) + ch]; }

  std::span<const std::uint8_t> pixels() const { return pixels_; }
  std::span<std::uint8_t> pixels() { return pixels_; }

  friend bool operator==(const RasterImage&, const RasterImage&) = default;

 private:
  std::size_t index(int row, int col) const {
    return (static_cast<std::size_t>(row) * width_ + col) * 3;
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint8_t> pixels_;
};

/// rows x cols grid of cells with `channels` reals per cell, row-major, channel fastest.
struct Latent {
  int rows = 0;
  int cols = 0;
  int channels = 0;
  std::vector<double> values;

  Latent() = default;
  Latent(int r, int c, int ch) : rows(r), cols(c), channels(ch), values(std::size_t(r) * c * ch, 0.0) {}

  double& at(int r, int c, int ch) { return values[(std::size_t(r) * cols + c) * channels + ch]; }
  double at(int r, int c, int ch) const { return values[(std::size_t(r) * cols + c) * channels + ch]; }

  friend bool operator==(const Latent&, const Latent&) = default;
};

/// Space-to-depth with normalization value/127.5 - 1. Exactly invertible by decode().
/// Channel order within a cell is (dy, dx, rgb) row-major.
Latent encode(const RasterImage& image, int patch_pixels);

/// Inverse of encode(): 127.5 * (v + 1), rounded half-up and clamped to [0, 255].
RasterImage decode(const Latent& latent, int patch_pixels);

/// Bilinear resampling with half-pixel centers and edge clamping.
RasterImage resize_bilinear(const RasterImage& image, int height, int width);

// PNG I/O: 8-bit RGB only.
RasterImage read_png(const std::string& path);
void write_png(const RasterImage& image, const std::string& path);
std::vector<std::uint8_t> encode_png(const RasterImage& image);
RasterImage decode_png(std::span<const std::uint8_t> bytes);

}  // namespace uniref
