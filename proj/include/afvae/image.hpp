#pragma once

#include <string>
#include <vector>

#include "afvae/tensor.hpp"

namespace afvae {

/// Interleaved RGB, row-major, values in [0,1].
struct RgbImage {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  RgbImage() = default;
  RgbImage(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, 0.0) {}

  double& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  double at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  bool operator==(const RgbImage&) const = default;
};

struct GrayImage {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  GrayImage() = default;
  GrayImage(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, 0.0) {}

  double& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  double at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

/// 1 x 3 x H x W tensor.
Tensor to_tensor(const RgbImage& img);
/// Sample n of an N x 3 x H x W tensor, clamped to [0,1].
RgbImage rgb_from_tensor(const Tensor& t, int n = 0);

/// Binary PPM (P6) / PGM (P5), 8 bits per channel. Values are rounded from
/// [0,1]; reading returns k/255.
void write_ppm(const RgbImage& img, const std::string& path);
RgbImage read_ppm(const std::string& path);
void write_pgm(const GrayImage& img, const std::string& path);
GrayImage read_pgm(const std::string& path);

/// Rounds every channel to the nearest k/255, the value a PPM round trip yields.
RgbImage quantize8(const RgbImage& img);

/// Images laid side by side; all must share one height.
RgbImage hstack(const std::vector<RgbImage>& images);

}  // namespace afvae
