#pragma once

#include <memory>
#include <string>
#include <vector>

#include "afvae/autograd.hpp"
#include "afvae/nn.hpp"

namespace afvae::losses {

/// Image -> list of activations compared by the feature-matching term.
class FeatureExtractor {
 public:
  /// No feature layers; the reconstruction loss reduces to pixel L1.
  static FeatureExtractor identity();
  /// Fixed random-weight conv stack on RGB input.
  static FeatureExtractor random(std::uint64_t seed, const std::vector<int>& channels = {8, 16, 32});
  /// Conv stack weights read from a JSON file (see nn::conv_stack_from_json).
  static FeatureExtractor external(const std::string& path);
  /// "identity", "random", "random:<seed>" or "external:<path>".
  static FeatureExtractor parse(const std::string& spec, std::uint64_t default_seed);

  int layers() const { return stack_ ? stack_->size() : 0; }
  std::vector<ag::Var> features(const ag::Var& x) const;
  const std::string& description() const { return description_; }

 private:
  std::shared_ptr<const nn::ConvStack> stack_;
  std::string description_ = "identity";
};

enum class FeatureNorm { l1, l2 };

struct LossWeights {
  /// lambda_l per extractor layer; empty means 1/L for each of the L layers.
  std::vector<double> feature_weights;
  double kl_coeff = 1.0;
  FeatureNorm feature_norm = FeatureNorm::l1;

  std::vector<double> resolved(int layers) const;
};

struct ReconstructionTerms {
  ag::Var rec_l1;
  ag::Var rec_feat;
  std::vector<ag::Var> feature_terms;
  std::vector<double> lambdas;
};

/// Pixel L1 mean plus the lambda-weighted mean distances between extractor
/// activations of x and x_hat. Gradients flow into x_hat.
ReconstructionTerms reconstruction_terms(const ag::Var& x, const ag::Var& x_hat,
                                         const FeatureExtractor& extractor, const LossWeights& w);

struct Reconstruction {
  double rec_l1 = 0.0;
  double rec_feat = 0.0;
};
Reconstruction reconstruction_loss(const Tensor& x, const Tensor& x_hat,
                                   const FeatureExtractor& extractor, const LossWeights& w);

struct LossBreakdown {
  double rec_l1 = 0.0;
  double rec_feat = 0.0;
  std::vector<double> feature_terms;
  std::vector<double> lambdas;
  double kl = 0.0;
  double kl_coeff = 1.0;
  double total = 0.0;
};

/// total = rec_l1 + rec_feat + kl_coeff * kl, as a differentiable scalar.
struct Objective {
  ag::Var total;
  LossBreakdown breakdown;
};
Objective combine(const ReconstructionTerms& rec, const ag::Var& kl, double kl_coeff);

/// Per-sample prior parameters for one batch.
struct PriorBatch {
  enum class Kind { additive, mixture };
  Kind kind = Kind::additive;
  // additive: N x d_z means and N variances
  Tensor mean;
  std::vector<double> var;
  // mixture: N x K weights, K x d_z component means, K scales, and the
  // standard-normal draws of the Monte Carlo estimate
  Tensor weights;
  Tensor component_means;
  std::vector<double> component_scales;
  std::vector<Tensor> mc_noise;
};

struct ForwardPass {
  Objective objective;
  ag::Var reconstruction;
  nn::Posterior posterior;
};

/// Encodes both branches, samples z = mean + exp(log_var/2) * noise, decodes
/// and scores the batch.
ForwardPass total_loss(nn::AfVae& model, const Tensor& images, const Tensor& boundaries,
                       const PriorBatch& prior, const Tensor& noise, const FeatureExtractor& extractor,
                       const LossWeights& w);

}  // namespace afvae::losses
