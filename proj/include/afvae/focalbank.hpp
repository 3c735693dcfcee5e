#pragma once

#include <Eigen/Core>
#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <string>
#include <vector>

#include "afvae/geometry.hpp"

namespace afvae::focal {

/// Rows are data points.
using Features = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct KMeansOptions {
  int k = 8;
  std::uint64_t seed = 0;
  int max_iters = 100;
  double tol = 1e-8;
};

struct KMeansResult {
  Features centroids;                 // K x D
  std::vector<int> assignment;        // N
  std::vector<double> inertia_history;  // after every assignment step
  int iterations = 0;

  double inertia() const { return inertia_history.empty() ? 0.0 : inertia_history.back(); }
};

/// Lloyd iterations from k-means++ seeding. Throws if N < K.
KMeansResult kmeans(const Features& points, const KMeansOptions& opts);

/// The external memory of focal points plus the latent prior components.
struct FocalBank {
  Features centroids;             // K x D, D = feature_side^2 * channels
  Features latent_means;          // K x d_z, unit rows
  Eigen::VectorXd latent_scales;  // K, positive
  int feature_side = 32;

  int k() const { return static_cast<int>(centroids.rows()); }
  int feature_dim() const { return static_cast<int>(centroids.cols()); }
  int latent_dim() const { return static_cast<int>(latent_means.cols()); }

  /// Throws std::invalid_argument naming the first broken invariant.
  void validate() const;
};

/// K standard-normal draws of dimension d_z, each scaled to unit norm.
Features init_latent_means(int k, int latent_dim, std::uint64_t seed);

/// Area-downsampled (to side x side) and flattened boundary map.
Eigen::VectorXd boundary_features(const geometry::BoundaryMap& map, int side);
Features boundary_features(const std::vector<geometry::BoundaryMap>& maps, int side);

/// s_k = (1 + cos(b, c_k)) / 2, w = s / sum(s). A zero feature vector gives
/// uniform weights; warned is set when that fallback fires.
Eigen::VectorXd focal_weights(const Eigen::Ref<const Eigen::VectorXd>& features,
                              const FocalBank& bank, bool* warned = nullptr);
Eigen::VectorXd focal_weights(const geometry::BoundaryMap& map, const FocalBank& bank,
                              bool* warned = nullptr);

struct BankOptions {
  KMeansOptions kmeans;
  int latent_dim = 0;
  int feature_side = 32;
  double latent_scale = 1.0;
};

FocalBank build_bank(const std::vector<geometry::BoundaryMap>& train_maps,
                     const BankOptions& opts);

nlohmann::json to_json(const FocalBank& bank);
FocalBank bank_from_json(const nlohmann::json& j);
void save_bank(const FocalBank& bank, const std::string& path);
FocalBank load_bank(const std::string& path);

/// Grid of centroid images (grayscale, values in [0,1]) for inspection.
afvae::GrayImage centroid_montage(const FocalBank& bank);

}  // namespace afvae::focal
