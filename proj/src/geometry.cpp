#include "afvae/geometry.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace afvae::geometry {

namespace {

double dist_to_segment(double px, double py, const Point& a, const Point& b) {
  const double dx = b.x - a.x;
  const double dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = 0.0;
  if (len2 > 0.0) t = std::clamp(((px - a.x) * dx + (py - a.y) * dy) / len2, 0.0, 1.0);
  const double ex = a.x + t * dx - px;
  const double ey = a.y + t * dy - py;
  return std::sqrt(ex * ex + ey * ey);
}

Point cr_eval(const Point& p0, const Point& p1, const Point& p2, const Point& p3, double t) {
  const double t2 = t * t;
  const double t3 = t2 * t;
  auto f = [&](double a, double b, double c, double d) {
    return 0.5 * ((2.0 * b) + (-a + c) * t + (2.0 * a - 5.0 * b + 4.0 * c - d) * t2 +
                  (-a + 3.0 * b - 3.0 * c + d) * t3);
  };
  return {f(p0.x, p1.x, p2.x, p3.x), f(p0.y, p1.y, p2.y, p3.y)};
}

// Max-composites 1 - distance of the polyline into plane (H x W).
void rasterize_polyline(const std::vector<Point>& line, int h, int w, double* plane) {
  auto splat = [&](const Point& a, const Point& b) {
    const int x0 = std::max(0, static_cast<int>(std::floor(std::min(a.x, b.x) - 1.0)));
    const int x1 = std::min(w - 1, static_cast<int>(std::ceil(std::max(a.x, b.x) + 1.0)));
    const int y0 = std::max(0, static_cast<int>(std::floor(std::min(a.y, b.y) - 1.0)));
    const int y1 = std::min(h - 1, static_cast<int>(std::ceil(std::max(a.y, b.y) + 1.0)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double v = 1.0 - dist_to_segment(x, y, a, b);
        double& dst = plane[static_cast<std::size_t>(y) * w + x];
        if (v > dst) dst = v;
      }
    }
  };
  if (line.size() == 1) {
    splat(line[0], line[0]);
    return;
  }
  for (std::size_t i = 0; i + 1 < line.size(); ++i) splat(line[i], line[i + 1]);
}

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    total += k[i + radius];
  }
  for (double& v : k) v /= total;
  return k;
}

void blur_plane(double* plane, int h, int w, double sigma) {
  const auto k = gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2);
  std::vector<double> tmp(static_cast<std::size_t>(h) * w, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) {
        const int xx = x + i;
        if (xx >= 0 && xx < w) acc += k[i + r] * plane[static_cast<std::size_t>(y) * w + xx];
      }
      tmp[static_cast<std::size_t>(y) * w + x] = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) {
        const int yy = y + i;
        if (yy >= 0 && yy < h) acc += k[i + r] * tmp[static_cast<std::size_t>(yy) * w + x];
      }
      plane[static_cast<std::size_t>(y) * w + x] = acc;
    }
}

void normalize_plane(double* plane, std::size_t n) {
  const double m = *std::max_element(plane, plane + n);
  if (m <= 0.0) return;
  for (std::size_t i = 0; i < n; ++i) plane[i] = std::clamp(plane[i] / m, 0.0, 1.0);
}

std::vector<Point> group_points(const LandmarkSet& lms, const LandmarkGroup& g) {
  return {lms.points.begin() + g.begin, lms.points.begin() + g.end};
}

bool coincident(const std::vector<Point>& pts) {
  return std::all_of(pts.begin(), pts.end(), [&](const Point& p) {
    return std::hypot(p.x - pts[0].x, p.y - pts[0].y) < 1e-9;
  });
}

}  // namespace

void LandmarkSet::validate() const {
  require(height > 0 && width > 0, "landmark set has no image size");
  for (const auto& p : points) {
    require(std::isfinite(p.x) && std::isfinite(p.y) && p.x >= 0.0 && p.x < width &&
                p.y >= 0.0 && p.y < height,
            "landmark (" + std::to_string(p.x) + ", " + std::to_string(p.y) +
                ") outside the image");
  }
  int expected_begin = 0;
  for (const auto& g : groups) {
    require(g.begin == expected_begin, "group '" + g.name + "' does not continue the previous group");
    require(g.size() >= 2, "group '" + g.name + "' has fewer than 2 points");
    require(g.end <= static_cast<int>(points.size()), "group '" + g.name + "' runs past the point list");
    expected_begin = g.end;
  }
}

const std::vector<std::string>& face_group_names() {
  static const std::vector<std::string> names{
      "contour", "left-brow", "right-brow", "left-eye",
      "right-eye", "nose", "mouth-outer", "mouth-inner"};
  return names;
}

Tensor BoundaryMap::to_tensor() const {
  return Tensor(Shape{1, channels, height, width}, pixels);
}

std::vector<Point> catmull_rom(const std::vector<Point>& pts, bool closed,
                               double samples_per_pixel) {
  const std::size_t n = pts.size();
  if (n < 2) return pts;
  auto ctrl = [&](long i) -> Point {
    if (closed) return pts[static_cast<std::size_t>((i % static_cast<long>(n) + n) % n)];
    if (i < 0) return {2.0 * pts[0].x - pts[1].x, 2.0 * pts[0].y - pts[1].y};
    if (i >= static_cast<long>(n))
      return {2.0 * pts[n - 1].x - pts[n - 2].x, 2.0 * pts[n - 1].y - pts[n - 2].y};
    return pts[static_cast<std::size_t>(i)];
  };
  const long segments = closed ? static_cast<long>(n) : static_cast<long>(n) - 1;
  std::vector<Point> out;
  out.push_back(pts[0]);
  for (long s = 0; s < segments; ++s) {
    const Point p0 = ctrl(s - 1), p1 = ctrl(s), p2 = ctrl(s + 1), p3 = ctrl(s + 2);
    const double len = std::hypot(p2.x - p1.x, p2.y - p1.y);
    const int steps = std::max(2, static_cast<int>(std::ceil(len * samples_per_pixel)));
    for (int i = 1; i < steps; ++i) out.push_back(cr_eval(p0, p1, p2, p3, static_cast<double>(i) / steps));
    out.push_back(p2);
  }
  return out;
}

BoundaryMap render_boundary(const LandmarkSet& lms, const BoundaryOptions& opts,
                            std::vector<std::string>* warnings) {
  lms.validate();
  require(opts.blur_sigma >= 0.0, "blur_sigma must be non-negative");
  BoundaryMap map;
  map.height = lms.height;
  map.width = lms.width;
  map.channels = opts.mode == BoundaryMode::per_group ? static_cast<int>(lms.groups.size()) : 1;
  const std::size_t plane = static_cast<std::size_t>(map.height) * map.width;
  map.pixels.assign(plane * map.channels, 0.0);

  for (std::size_t gi = 0; gi < lms.groups.size(); ++gi) {
    const auto& g = lms.groups[gi];
    double* dst = map.pixels.data() + (opts.mode == BoundaryMode::per_group ? gi * plane : 0);
    const auto pts = group_points(lms, g);
    if (coincident(pts)) {
      if (warnings) warnings->push_back("group '" + g.name + "' is degenerate; drawn as a dot");
      rasterize_polyline({pts[0]}, map.height, map.width, dst);
      continue;
    }
    rasterize_polyline(catmull_rom(pts, g.closed), map.height, map.width, dst);
  }

  for (int c = 0; c < map.channels; ++c) {
    double* p = map.pixels.data() + c * plane;
    if (opts.blur_sigma > 0.0) blur_plane(p, map.height, map.width, opts.blur_sigma);
    normalize_plane(p, plane);
  }
  return map;
}

double landmark_distance(const LandmarkSet& a, const LandmarkSet& b) {
  if (a.points.size() != b.points.size())
    throw std::invalid_argument("landmark_distance: point counts differ (" +
                                std::to_string(a.points.size()) + " vs " +
                                std::to_string(b.points.size()) + ")");
  require(a.groups.size() == b.groups.size(), "landmark_distance: group tables differ");
  require(!a.points.empty(), "landmark_distance: empty landmark sets");
  const double diag = std::hypot(static_cast<double>(a.width), static_cast<double>(a.height));
  double total = 0.0;
  for (std::size_t i = 0; i < a.points.size(); ++i)
    total += std::hypot(a.points[i].x - b.points[i].x, a.points[i].y - b.points[i].y);
  return total / static_cast<double>(a.points.size()) / diag;
}

// ---------------------------------------------------------------------------

namespace {

struct TemplatePoint {
  double x, y, z;
};

constexpr double kMaxYawRadians = 35.0 * std::numbers::pi / 180.0;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

double lattice_noise(std::uint64_t seed, int ix, int iy) {
  const std::uint64_t h = splitmix64(seed ^ splitmix64((static_cast<std::uint64_t>(static_cast<std::uint32_t>(ix)) << 32) |
                                                       static_cast<std::uint32_t>(iy)));
  return static_cast<double>(h >> 11) * 0x1.0p-53 * 2.0 - 1.0;
}

// Bilinear value noise in [-1,1] on a lattice of the given cell size.
double value_noise(std::uint64_t seed, double x, double y, double cell) {
  const double fx = x / cell, fy = y / cell;
  const int ix = static_cast<int>(std::floor(fx)), iy = static_cast<int>(std::floor(fy));
  const double tx = fx - ix, ty = fy - iy;
  const double a = lattice_noise(seed, ix, iy), b = lattice_noise(seed, ix + 1, iy);
  const double c = lattice_noise(seed, ix, iy + 1), d = lattice_noise(seed, ix + 1, iy + 1);
  return (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
}

bool inside_polygon(const std::vector<Point>& poly, double x, double y) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Point& a = poly[i];
    const Point& b = poly[j];
    if ((a.y > y) != (b.y > y) && x < (b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x) in = !in;
  }
  return in;
}

double polyline_distance(const std::vector<Point>& line, double x, double y) {
  double best = 1e300;
  for (std::size_t i = 0; i + 1 < line.size(); ++i) best = std::min(best, dist_to_segment(x, y, line[i], line[i + 1]));
  return best;
}

struct Box {
  double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
  explicit Box(const std::vector<Point>& pts, double pad) {
    for (const auto& p : pts) {
      x0 = std::min(x0, p.x - pad);
      y0 = std::min(y0, p.y - pad);
      x1 = std::max(x1, p.x + pad);
      y1 = std::max(y1, p.y + pad);
    }
  }
  bool contains(double x, double y) const { return x >= x0 && x <= x1 && y >= y0 && y <= y1; }
};

}  // namespace

Structure clamp_structure(const Structure& s) {
  return {std::clamp(s.expression, -1.0, 1.0), std::clamp(s.yaw, -1.0, 1.0),
          std::clamp(s.scale, 0.8, 1.2)};
}

LandmarkSet synth_landmarks(const Structure& raw, int height, int width) {
  require(height >= 32 && width >= 32, "synthetic faces need at least 32x32 pixels");
  const Structure s = clamp_structure(raw);
  const double e = s.expression;

  std::vector<std::vector<TemplatePoint>> groups(8);
  // contour: lower half of the face oval, left to right through the chin
  for (int i = 0; i <= 8; ++i) {
    const double phi = std::numbers::pi * i / 8.0;
    groups[0].push_back({-std::cos(phi), std::sin(phi), 0.0});
  }
  const double lift = 0.05 * e;
  groups[1] = {{-0.60, -0.38 - lift, 0.45}, {-0.38, -0.46 - lift, 0.45}, {-0.15, -0.40 - lift, 0.45}};
  const double eh = 0.065 - 0.015 * e;
  groups[3] = {{-0.52, -0.20, 0.5}, {-0.35, -0.20 - eh, 0.5}, {-0.18, -0.20, 0.5}, {-0.35, -0.20 + eh, 0.5}};
  for (const auto& p : groups[1]) groups[2].push_back({-p.x, p.y, p.z});
  for (const auto& p : groups[3]) groups[4].push_back({-p.x, p.y, p.z});
  groups[5] = {{0.0, -0.15, 0.75}, {0.0, 0.05, 0.95}, {0.0, 0.18, 0.85}};

  const double open = 0.02 + 0.05 * (e + 1.0);
  const double mw = 0.30 + 0.05 * e;
  const double ym = 0.45;
  const double corner = ym - 0.04 * e;
  const double top = ym - 0.05 - 0.5 * open;
  const double bottom = ym + 0.05 + 0.5 * open;
  groups[6] = {{-mw, corner, 0.45},        {-0.5 * mw, top, 0.6},    {0.5 * mw, top, 0.6},
               {mw, corner, 0.45},         {0.5 * mw, bottom, 0.6},  {-0.5 * mw, bottom, 0.6}};
  const double inner_corner = ym - 0.02 * e;
  groups[7] = {{-0.6 * mw, inner_corner, 0.55}, {0.0, ym - 0.5 * open, 0.6},
               {0.6 * mw, inner_corner, 0.55},  {0.0, ym + 0.5 * open, 0.6}};

  const double t = s.yaw * kMaxYawRadians;
  const double cx = 0.5 * (width - 1);
  const double cy = 0.5 * (height - 1) + 0.02 * height;
  const double sx = 0.30 * width * s.scale;
  const double sy = 0.38 * height * s.scale;

  LandmarkSet lms;
  lms.height = height;
  lms.width = width;
  const auto& names = face_group_names();
  for (std::size_t g = 0; g < groups.size(); ++g) {
    LandmarkGroup lg{names[g], static_cast<int>(lms.points.size()), 0, g >= 3 && g != 5};
    for (const auto& p : groups[g]) {
      const double x = cx + sx * (p.x * std::cos(t) + p.z * std::sin(t));
      const double y = cy + sy * p.y;
      lms.points.push_back({std::clamp(x, 0.0, width - 1.0), std::clamp(y, 0.0, height - 1.0)});
    }
    lg.end = static_cast<int>(lms.points.size());
    lms.groups.push_back(lg);
  }
  return lms;
}

SyntheticFace synth_face(const SyntheticFaceSpec& spec, int height, int width) {
  const Structure s = clamp_structure(spec.structure);
  SyntheticFace face{RgbImage(height, width), synth_landmarks(s, height, width)};
  const auto& lms = face.landmarks;
  auto group = [&](int i) { return group_points(lms, lms.groups[static_cast<std::size_t>(i)]); };

  const double u = width / 64.0;
  const double t = s.yaw * kMaxYawRadians;
  const double cx = 0.5 * (width - 1);
  const double cy = 0.5 * (height - 1) + 0.02 * height;
  const double rx = 0.30 * width * s.scale * std::cos(t);
  const double ry = 0.38 * height * s.scale;

  const auto brow_l = catmull_rom(group(1), false);
  const auto brow_r = catmull_rom(group(2), false);
  const auto eye_l = catmull_rom(group(3), true);
  const auto eye_r = catmull_rom(group(4), true);
  const auto nose = catmull_rom(group(5), false);
  const auto mouth = catmull_rom(group(6), true);
  const auto inner = catmull_rom(group(7), true);
  const Box brow_box_l(brow_l, 1.5 * u), brow_box_r(brow_r, 1.5 * u);
  const Box eye_box_l(eye_l, 0.5), eye_box_r(eye_r, 0.5);
  const Box nose_box(nose, 1.0 * u), mouth_box(mouth, 0.5), inner_box(inner, 0.5);
  const Point pupil_l{0.5 * (group(3)[0].x + group(3)[2].x), 0.5 * (group(3)[1].y + group(3)[3].y)};
  const Point pupil_r{0.5 * (group(4)[0].x + group(4)[2].x), 0.5 * (group(4)[1].y + group(4)[3].y)};
  const double pupil_radius = 0.8 * std::abs(group(3)[3].y - group(3)[1].y) * 0.5;

  const auto& app = spec.appearance;
  const std::array<double, 3> background{0.82, 0.84, 0.88};
  const std::array<double, 3> lip{app.skin[0] * 0.85, app.skin[1] * 0.45, app.skin[2] * 0.45};
  const std::array<double, 3> mouth_dark{0.22, 0.06, 0.06};
  const std::array<double, 3> sclera{0.95, 0.95, 0.95};
  const std::array<double, 3> pupil{0.08, 0.08, 0.10};
  const std::array<double, 3> brow{app.hair[0] * 0.7, app.hair[1] * 0.7, app.hair[2] * 0.7};

  auto shade = [&](double x, double y) -> std::array<double, 3> {
    const double fx = (x - cx) / rx, fy = (y - cy) / ry;
    const double hx = (x - cx) / (rx * 1.12 + 1.0), hy = (y - (cy - 0.10 * ry)) / (ry * 1.02);
    std::array<double, 3> col = background;
    if (hx * hx + hy * hy <= 1.0 && y < cy + 0.25 * ry) col = app.hair;
    if (fx * fx + fy * fy > 1.0) return col;
    const double grain = 1.0 + 0.04 * value_noise(app.texture_seed, x, y, 3.0 * u);
    for (int c = 0; c < 3; ++c) col[c] = app.skin[c] * grain;
    if (nose_box.contains(x, y) && polyline_distance(nose, x, y) < 0.6 * u)
      for (int c = 0; c < 3; ++c) col[c] = app.skin[c] * 0.72;
    if (brow_box_l.contains(x, y) && polyline_distance(brow_l, x, y) < 1.0 * u) col = brow;
    if (brow_box_r.contains(x, y) && polyline_distance(brow_r, x, y) < 1.0 * u) col = brow;
    for (const auto* eye : {&eye_l, &eye_r}) {
      const Box& box = eye == &eye_l ? eye_box_l : eye_box_r;
      if (box.contains(x, y) && inside_polygon(*eye, x, y)) {
        const Point& c0 = eye == &eye_l ? pupil_l : pupil_r;
        col = std::hypot(x - c0.x, y - c0.y) < pupil_radius ? pupil : sclera;
      }
    }
    if (mouth_box.contains(x, y) && inside_polygon(mouth, x, y)) col = lip;
    if (inner_box.contains(x, y) && inside_polygon(inner, x, y)) col = mouth_dark;
    return col;
  };

  constexpr int kSuper = 3;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      std::array<double, 3> acc{0.0, 0.0, 0.0};
      for (int sy = 0; sy < kSuper; ++sy)
        for (int sx = 0; sx < kSuper; ++sx) {
          const auto c = shade(x + (sx + 0.5) / kSuper - 0.5, y + (sy + 0.5) / kSuper - 0.5);
          for (int k = 0; k < 3; ++k) acc[k] += c[k];
        }
      for (int k = 0; k < 3; ++k)
        face.image.at(y, x, k) = std::clamp(acc[k] / (kSuper * kSuper), 0.0, 1.0);
    }
  }
  return face;
}

nlohmann::json to_json(const LandmarkSet& lms) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : lms.points) {
    pts.push_back(p.x);
    pts.push_back(p.y);
  }
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& g : lms.groups)
    groups.push_back({{"name", g.name}, {"begin", g.begin}, {"end", g.end}, {"closed", g.closed}});
  return {{"height", lms.height}, {"width", lms.width}, {"points", pts}, {"groups", groups}};
}

LandmarkSet landmarks_from_json(const nlohmann::json& j) {
  LandmarkSet lms;
  lms.height = j.at("height").get<int>();
  lms.width = j.at("width").get<int>();
  const auto& pts = j.at("points");
  require(pts.size() % 2 == 0, "landmark points must be a flat x,y list");
  for (std::size_t i = 0; i < pts.size(); i += 2)
    lms.points.push_back({pts[i].get<double>(), pts[i + 1].get<double>()});
  for (const auto& g : j.at("groups"))
    lms.groups.push_back({g.at("name").get<std::string>(), g.at("begin").get<int>(),
                          g.at("end").get<int>(), g.value("closed", false)});
  lms.validate();
  return lms;
}

}  // namespace afvae::geometry
