#pragma once

#include <nlohmann/json_fwd.hpp>

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "afvae/image.hpp"
#include "afvae/tensor.hpp"

namespace afvae::geometry {

struct Point {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point&) const = default;
};

/// Contiguous index range [begin, end) into LandmarkSet::points.
struct LandmarkGroup {
  std::string name;
  int begin = 0;
  int end = 0;
  bool closed = false;

  int size() const { return end - begin; }
  bool operator==(const LandmarkGroup&) const = default;
};

/// Pixel-space landmarks; pixel (row i, col j) has its centre at (x=j, y=i).
struct LandmarkSet {
  std::vector<Point> points;
  std::vector<LandmarkGroup> groups;
  int height = 0;
  int width = 0;

  /// Throws std::invalid_argument when a point is out of bounds, a group has
  /// fewer than two points, or groups do not tile a prefix of the points.
  void validate() const;
  bool operator==(const LandmarkSet&) const = default;
};

/// Group names of the face layout, in storage order.
const std::vector<std::string>& face_group_names();

enum class BoundaryMode { single, per_group };

struct BoundaryOptions {
  BoundaryMode mode = BoundaryMode::single;
  double blur_sigma = 1.0;
};

/// channels x height x width intensities in [0,1].
struct BoundaryMap {
  int channels = 1;
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  double at(int c, int y, int x) const {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  double& at(int c, int y, int x) {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  /// 1 x channels x H x W.
  Tensor to_tensor() const;
};

/// Uniform Catmull-Rom spline through pts, densely sampled. Open curves get
/// reflected phantom end points so the curve starts and ends on the data.
std::vector<Point> catmull_rom(const std::vector<Point>& pts, bool closed,
                               double samples_per_pixel = 4.0);

/// Splines every group, rasterizes it as an anti-aliased polyline
/// (intensity 1 - distance), blurs with a Gaussian and rescales each channel
/// to max 1. Groups whose points coincide are drawn as a dot and reported in
/// warnings.
BoundaryMap render_boundary(const LandmarkSet& lms, const BoundaryOptions& opts,
                            std::vector<std::string>* warnings = nullptr);

/// Mean per-point Euclidean distance divided by the image diagonal.
double landmark_distance(const LandmarkSet& a, const LandmarkSet& b);

// ---------------------------------------------------------------------------
// Procedural faces.

struct Appearance {
  std::array<double, 3> skin{0.85, 0.68, 0.55};
  std::array<double, 3> hair{0.25, 0.18, 0.12};
  std::uint64_t texture_seed = 0;
  bool operator==(const Appearance&) const = default;
};

struct Structure {
  double expression = 0.0;  // [-1, 1]; -1 closed mouth, 1 wide open smile
  double yaw = 0.0;         // [-1, 1]; maps to +-35 degrees
  double scale = 1.0;       // [0.8, 1.2]
  bool operator==(const Structure&) const = default;
};

struct SyntheticFaceSpec {
  Appearance appearance;
  Structure structure;
  int identity_id = 0;
};

struct SyntheticFace {
  RgbImage image;
  LandmarkSet landmarks;
};

/// Clamps expression/yaw to [-1,1] and scale to [0.8,1.2].
Structure clamp_structure(const Structure& s);

/// Landmark layout of the procedural face. Each landmark is a point of a
/// fixed 3-D template (X, Y in [-1,1] face units, Z depth) deformed by
/// expression, rotated about the vertical axis by yaw * 35 degrees and
/// projected orthographically:
///   x = (W-1)/2 + 0.30 W scale (X cos t + Z sin t)
///   y = (H-1)/2 + 0.02 H + 0.38 H scale Y
/// The mouth's vertical extent is 0.10 + open(e) face units with
/// open(e) = 0.02 + 0.05 (e + 1), increasing in expression e.
LandmarkSet synth_landmarks(const Structure& s, int height, int width);

/// Deterministic render; appearance never moves landmarks.
SyntheticFace synth_face(const SyntheticFaceSpec& spec, int height, int width);

nlohmann::json to_json(const LandmarkSet& lms);
LandmarkSet landmarks_from_json(const nlohmann::json& j);

}  // namespace afvae::geometry
