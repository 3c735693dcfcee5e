#pragma once

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "afvae/datasets.hpp"
#include "afvae/geometry.hpp"
#include "afvae/image.hpp"
#include "afvae/nn.hpp"
#include "afvae/training.hpp"

namespace afvae::eval {

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

/// Sample mean and unbiased covariance of the rows.
GaussianStats gaussian_stats(const Eigen::Ref<const Eigen::MatrixXd>& features);

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)). The square root is
/// taken through the eigen decomposition of S_a^(1/2) S_b S_a^(1/2); negative
/// eigenvalues down to -1e-8 (relative) are clipped to zero, larger ones are
/// reported in warnings and clipped as well.
double fid_from_stats(const GaussianStats& a, const GaussianStats& b, std::vector<std::string>* warnings = nullptr);
/// Warns when either set has no more rows than columns.
double fid(const Eigen::Ref<const Eigen::MatrixXd>& a, const Eigen::Ref<const Eigen::MatrixXd>& b,
           std::vector<std::string>* warnings = nullptr);

/// exp(mean_i KL(p(y|x_i) || mean_j p(y|x_j))). Rows must be probability
/// vectors (non-negative, summing to 1 within 1e-5).
double inception_score(const Eigen::Ref<const Eigen::MatrixXd>& class_probs);

/// Base-2 Shannon entropy of the luminance histogram, luminance being the
/// mean of the channels. Values must lie in [0, 1].
double histogram_entropy(const RgbImage& img, int bins = 256);
double histogram_entropy(const GrayImage& img, int bins = 256);

/// Deterministic image -> feature vector map: a conv stack followed by
/// global average pooling, plus a linear softmax head for class posteriors.
class FeatureEmbedder {
 public:
  static FeatureEmbedder random(std::uint64_t seed, const std::vector<int>& channels = {16, 32, 64},
                                int classes = 10);
  /// JSON with "layers" (conv stack) and optional "head": {"classes", "weights", "bias"}.
  static FeatureEmbedder external(const std::string& path);
  /// "random" or "external:<path>".
  static FeatureEmbedder parse(const std::string& spec, std::uint64_t seed);

  int dim() const { return stack_.out_channels(); }
  int classes() const { return static_cast<int>(head_bias_.size()); }
  Eigen::MatrixXd embed(const std::vector<RgbImage>& images) const;
  /// Softmax of the head applied to the embeddings.
  Eigen::MatrixXd class_probs(const Eigen::Ref<const Eigen::MatrixXd>& embeddings) const;
  const std::string& description() const { return description_; }

 private:
  nn::ConvStack stack_;
  Eigen::MatrixXd head_weights_;  // classes x dim
  Eigen::VectorXd head_bias_;
  std::string description_;
};

/// Recovers landmarks from a rendered face by normalized cross-correlation of
/// its luminance against a grid of procedural renders with a neutral
/// appearance, returning the landmarks of the best template.
class LandmarkExtractor {
 public:
  struct Options {
    int size = 64;
    int expression_steps = 9;
    int yaw_steps = 9;
    int scale_steps = 5;
    /// Best correlation below this counts as an extraction failure.
    double min_ncc = 0.5;
  };
  LandmarkExtractor() : LandmarkExtractor(Options{}) {}
  explicit LandmarkExtractor(const Options& opts);

  struct Match {
    geometry::Structure structure;
    geometry::LandmarkSet landmarks;
    double ncc = 0.0;
  };
  /// nullopt when the best correlation is below min_ncc.
  std::optional<Match> extract(const RgbImage& img) const;
  int templates() const { return static_cast<int>(structures_.size()); }

 private:
  Options opts_;
  std::vector<geometry::Structure> structures_;
  std::vector<Eigen::VectorXd> normalized_;  // zero-mean, unit-norm luminance
};

/// Decodes the appearance of each source with the structure of each target.
/// noise == nullptr uses the posterior mean. Source boundaries are only read
/// when the model routes them into the appearance branch.
Tensor generate(nn::AfVae& model, const Tensor& source_images, const Tensor& source_boundaries,
                const Tensor& target_boundaries, const Tensor* noise = nullptr);

/// d(extracted(x_hat), target) - d(extracted(x_hat), source); nullopt when
/// extraction fails.
std::optional<double> boundary_consistency(const RgbImage& generated, const geometry::LandmarkSet& source,
                                           const geometry::LandmarkSet& target, const LandmarkExtractor& extractor);

struct ConsistencySummary {
  double mean = 0.0;
  int count = 0;
  int missing = 0;
  std::vector<double> scores;
};

/// Scores `pairs` seeded (source, target) pairs of distinct test records.
ConsistencySummary boundary_consistency(nn::AfVae& model, const data::Corpus& corpus,
                                        const geometry::BoundaryOptions& boundary, int pairs, std::uint64_t seed,
                                        const LandmarkExtractor& extractor);

struct MetricReport {
  double fid = 0.0;
  double is_score = 1.0;
  double entropy = 0.0;
  double source_entropy = 0.0;
  double boundary_consistency = 0.0;
  int consistency_count = 0;
  int consistency_missing = 0;
  double reconstruction_l1 = 0.0;
  std::string embedder;
  std::vector<std::string> warnings;

  void validate() const;
};
nlohmann::json to_json(const MetricReport& r);

struct EvaluateOptions {
  std::string embedder = "random";
  int pairs = 50;
  std::uint64_t seed = 0;
};

/// Metrics of a trained model on the test split: FID/IS between test images
/// and cross-structure generations, mean histogram entropy, reconstruction
/// L1 and boundary consistency.
MetricReport evaluate(nn::AfVae& model, const train::TrainConfig& cfg, const data::Corpus& corpus,
                      const EvaluateOptions& opts);

}  // namespace afvae::eval
