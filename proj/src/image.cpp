#include "afvae/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>

namespace afvae {

namespace {

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

void write_pnm(const std::string& path, const char* magic, int h, int w,
               const std::vector<double>& values) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << magic << "\n" << w << " " << h << "\n255\n";
  std::vector<std::uint8_t> bytes(values.size());
  std::transform(values.begin(), values.end(), bytes.begin(), to_byte);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<double> read_pnm(const std::string& path, const std::string& magic, int channels,
                             int& h, int& w) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string m;
  int maxval = 0;
  in >> m;
  if (m != magic) throw std::runtime_error(path + ": expected " + magic + " header, got " + m);
  auto skip_comments = [&] {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string line;
      std::getline(in, line);
      in >> std::ws;
    }
  };
  skip_comments();
  in >> w;
  skip_comments();
  in >> h;
  skip_comments();
  in >> maxval;
  in.get();
  if (!in || w <= 0 || h <= 0 || maxval != 255) throw std::runtime_error(path + ": unsupported PNM header");
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(h) * w * channels);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!in) throw std::runtime_error(path + ": truncated pixel data");
  std::vector<double> values(bytes.size());
  std::transform(bytes.begin(), bytes.end(), values.begin(),
                 [](std::uint8_t b) { return b / 255.0; });
  return values;
}

}  // namespace

Tensor to_tensor(const RgbImage& img) {
  Tensor t(Shape{1, 3, img.height, img.width});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) t.at(0, c, y, x) = img.at(y, x, c);
  return t;
}

RgbImage rgb_from_tensor(const Tensor& t, int n) {
  const Shape& s = t.shape();
  require(s.c == 3 && n >= 0 && n < s.n, "rgb_from_tensor expects N x 3 x H x W");
  RgbImage img(s.h, s.w);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) img.at(y, x, c) = std::clamp(t.at(n, c, y, x), 0.0, 1.0);
  return img;
}

void write_ppm(const RgbImage& img, const std::string& path) {
  write_pnm(path, "P6", img.height, img.width, img.pixels);
}

RgbImage read_ppm(const std::string& path) {
  RgbImage img;
  img.pixels = read_pnm(path, "P6", 3, img.height, img.width);
  return img;
}

void write_pgm(const GrayImage& img, const std::string& path) {
  write_pnm(path, "P5", img.height, img.width, img.pixels);
}

GrayImage read_pgm(const std::string& path) {
  GrayImage img;
  img.pixels = read_pnm(path, "P5", 1, img.height, img.width);
  return img;
}

RgbImage quantize8(const RgbImage& img) {
  RgbImage q = img;
  for (double& v : q.pixels) v = to_byte(v) / 255.0;
  return q;
}

RgbImage hstack(const std::vector<RgbImage>& images) {
  require(!images.empty(), "hstack of nothing");
  const int h = images.front().height;
  int w = 0;
  for (const auto& im : images) {
    require(im.height == h, "hstack height mismatch");
    w += im.width;
  }
  RgbImage out(h, w);
  int x0 = 0;
  for (const auto& im : images) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < im.width; ++x)
        for (int c = 0; c < 3; ++c) out.at(y, x0 + x, c) = im.at(y, x, c);
    x0 += im.width;
  }
  return out;
}

}  // namespace afvae
