#include "uniref/rasters.hpp"

#include <algorithm>
#include <cmath>

namespace uniref {

RasterImage::RasterImage(int height, int width, Rgb fill)
    : height_(height), width_(width), pixels_(std::size_t(std::max(height, 0)) * std::max(width, 0) * 3) {
  if (height < 0 || width < 0) throw InvalidArgument("image dimensions must be non-negative");
  for (std::size_t i = 0; i < pixels_.size(); i += 3) {
    pixels_[i] = fill.r;
    pixels_[i + 1] = fill.g;
    pixels_[i + 2] = fill.b;
  }
}

Rgb RasterImage::at(int row, int col) const {
  const auto i = index(row, col);
  return {pixels_[i], pixels_[i + 1], pixels_[i + 2]};
}

void RasterImage::set(int row, int col, Rgb c) {
  const auto i = index(row, col);
  pixels_[i] = c.r;
  pixels_[i + 1] = c.g;
  pixels_[i + 2] = c.b;
}

Latent encode(const RasterImage& image, int patch_pixels) {
  const int p = patch_pixels;
  if (p < 1) throw InvalidArgument("patch_pixels must be positive");
  if (image.height() < p || image.height() % p != 0)
    throw InvalidArgument("image height " + std::to_string(image.height()) +
                          " is not a positive multiple of patch size " + std::to_string(p));
  if (image.width() < p || image.width() % p != 0)
    throw InvalidArgument("image width " + std::to_string(image.width()) +
                          " is not a positive multiple of patch size " + std::to_string(p));

  Latent z(image.height() / p, image.width() / p, 3 * p * p);
  for (int r = 0; r < z.rows; ++r)
    for (int c = 0; c < z.cols; ++c)
      for (int dy = 0; dy < p; ++dy)
        for (int dx = 0; dx < p; ++dx)
          for (int ch = 0; ch < 3; ++ch)
            z.at(r, c, (dy * p + dx) * 3 + ch) =
                image.channel(r * p + dy, c * p + dx, ch) / 127.5 - 1.0;
  return z;
}

RasterImage decode(const Latent& latent, int patch_pixels) {
  const int p = patch_pixels;
  if (p < 1) throw InvalidArgument("patch_pixels must be positive");
  if (latent.channels != 3 * p * p)
    throw InvalidArgument("latent has " + std::to_string(latent.channels) + " channels, expected " +
                          std::to_string(3 * p * p) + " for patch size " + std::to_string(p));

  RasterImage image(latent.rows * p, latent.cols * p);
  auto px = image.pixels();
  for (int r = 0; r < latent.rows; ++r)
    for (int c = 0; c < latent.cols; ++c)
      for (int dy = 0; dy < p; ++dy)
        for (int dx = 0; dx < p; ++dx)
          for (int ch = 0; ch < 3; ++ch) {
            const double v = latent.at(r, c, (dy * p + dx) * 3 + ch);
            double q = std::floor(127.5 * (v + 1.0) + 0.5);
            if (!(q >= 0.0)) q = 0.0;  // also maps NaN to 0
            if (q > 255.0) q = 255.0;
            const std::size_t i = ((std::size_t(r) * p + dy) * image.width() + (c * p + dx)) * 3 + ch;
            px[i] = static_cast<std::uint8_t>(q);
          }
  return image;
}

RasterImage resize_bilinear(const RasterImage& image, int height, int width) {
  if (height < 1 || width < 1) throw InvalidArgument("resize target must be positive");
  if (image.empty()) throw InvalidArgument("cannot resize an empty image");
  if (height == image.height() && width == image.width()) return image;

  RasterImage out(height, width);
  const double sy = double(image.height()) / height;
  const double sx = double(image.width()) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, double(image.height() - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, image.height() - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, double(image.width() - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, image.width() - 1);
      const double wx = fx - x0;
      std::uint8_t rgb[3];
      for (int ch = 0; ch < 3; ++ch) {
        const double top = image.channel(y0, x0, ch) * (1 - wx) + image.channel(y0, x1, ch) * wx;
        const double bot = image.channel(y1, x0, ch) * (1 - wx) + image.channel(y1, x1, ch) * wx;
        rgb[ch] = static_cast<std::uint8_t>(std::clamp(std::floor(top * (1 - wy) + bot * wy + 0.5), 0.0, 255.0));
      }
      out.set(y, x, {rgb[0], rgb[1], rgb[2]});
    }
  }
  return out;
}

}  // namespace uniref
