#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "afvae/focalbank.hpp"
#include "afvae/geometry.hpp"
#include "afvae/image.hpp"
#include "afvae/nn.hpp"

namespace afvae::cli {

/// Entry point of the command-line tool. Returns the process exit code.
int run(int argc, const char* const* argv);

struct ManipulateOptions {
  /// Draw z from the posterior with this seed; the posterior mean otherwise.
  std::optional<std::uint64_t> noise_seed;
  /// Draw z from the focal prior of the target boundary instead of encoding
  /// the source appearance.
  bool sample = false;
};

/// Source appearance rendered with the target structure. source_boundary may
/// be empty unless the model feeds boundaries to its appearance branch.
RgbImage manipulate(nn::AfVae& model, const focal::FocalBank& bank, const RgbImage& source,
                    const Tensor& source_boundary, const geometry::BoundaryMap& target,
                    const ManipulateOptions& opts);

struct Interpolation {
  std::vector<RgbImage> appearance;  // lerp z, structure of A held
  std::vector<RgbImage> structure;   // lerp y and skips, z of A held
  std::vector<Tensor> latents;       // z at every appearance step
};

/// Linear interpolation between the codes of A and B in `steps` frames
/// (endpoints included, steps >= 2).
Interpolation interpolate(nn::AfVae& model, const RgbImage& a, const Tensor& a_boundary, const RgbImage& b,
                          const Tensor& b_boundary, int steps);

}  // namespace afvae::cli
