#include "afvae/losses.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <stdexcept>

namespace afvae::losses {

FeatureExtractor FeatureExtractor::identity() { return FeatureExtractor{}; }

FeatureExtractor FeatureExtractor::random(std::uint64_t seed, const std::vector<int>& channels) {
  FeatureExtractor f;
  f.stack_ = std::make_shared<nn::ConvStack>(nn::ConvStack::random(seed, 3, channels));
  f.description_ = "random:" + std::to_string(seed);
  return f;
}

FeatureExtractor FeatureExtractor::external(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read feature extractor " + path);
  FeatureExtractor f;
  f.stack_ = std::make_shared<nn::ConvStack>(nn::conv_stack_from_json(nlohmann::json::parse(in)));
  require(f.stack_->size() == 0 || f.stack_->layers().front().weight.shape().c == 3,
          "external feature extractor must take 3 input channels");
  f.description_ = "external:" + path;
  return f;
}

FeatureExtractor FeatureExtractor::parse(const std::string& spec, std::uint64_t default_seed) {
  if (spec == "identity") return identity();
  if (spec == "random") return random(default_seed);
  if (spec.starts_with("random:")) return random(std::stoull(spec.substr(7)));
  if (spec.starts_with("external:")) return external(spec.substr(9));
  throw std::invalid_argument("unknown feature extractor '" + spec + "'");
}

std::vector<ag::Var> FeatureExtractor::features(const ag::Var& x) const {
  if (!stack_) return {};
  return stack_->forward(x);
}

std::vector<double> LossWeights::resolved(int layers) const {
  if (feature_weights.empty()) return std::vector<double>(layers, layers > 0 ? 1.0 / layers : 0.0);
  require(static_cast<int>(feature_weights.size()) == layers,
          "got " + std::to_string(feature_weights.size()) + " feature weights for " +
              std::to_string(layers) + " extractor layers");
  return feature_weights;
}

ReconstructionTerms reconstruction_terms(const ag::Var& x, const ag::Var& x_hat,
                                         const FeatureExtractor& extractor, const LossWeights& w) {
  if (!(x->value.shape() == x_hat->value.shape()))
    throw std::invalid_argument("reconstruction_loss: shapes differ (" + x->value.shape().str() + " vs " +
                                x_hat->value.shape().str() + ")");
  ReconstructionTerms r;
  r.rec_l1 = ag::l1_mean(x, x_hat);
  r.lambdas = w.resolved(extractor.layers());
  const auto fx = extractor.features(x);
  const auto fy = extractor.features(x_hat);
  for (std::size_t l = 0; l < fx.size(); ++l)
    r.feature_terms.push_back(w.feature_norm == FeatureNorm::l1 ? ag::l1_mean(fx[l], fy[l])
                                                                : ag::l2_mean(fx[l], fy[l]));
  r.rec_feat = ag::weighted_sum(r.feature_terms, r.lambdas);
  return r;
}

Reconstruction reconstruction_loss(const Tensor& x, const Tensor& x_hat, const FeatureExtractor& extractor,
                                   const LossWeights& w) {
  const auto r = reconstruction_terms(ag::constant(x), ag::constant(x_hat), extractor, w);
  return {r.rec_l1->value[0], r.rec_feat->value[0]};
}

Objective combine(const ReconstructionTerms& rec, const ag::Var& kl, double kl_coeff) {
  const std::vector<ag::Var> terms{rec.rec_l1, rec.rec_feat, kl};
  const std::vector<double> coeffs{1.0, 1.0, kl_coeff};
  Objective o;
  o.total = ag::weighted_sum(terms, coeffs);
  auto& b = o.breakdown;
  b.rec_l1 = rec.rec_l1->value[0];
  b.rec_feat = rec.rec_feat->value[0];
  for (const auto& t : rec.feature_terms) b.feature_terms.push_back(t->value[0]);
  b.lambdas = rec.lambdas;
  b.kl = kl->value[0];
  b.kl_coeff = kl_coeff;
  b.total = o.total->value[0];
  return o;
}

ForwardPass total_loss(nn::AfVae& model, const Tensor& images, const Tensor& boundaries, const PriorBatch& prior,
                       const Tensor& noise, const FeatureExtractor& extractor, const LossWeights& w) {
  const ag::Var x = ag::constant(images);
  const ag::Var b = ag::constant(boundaries);
  ForwardPass out;
  out.posterior = model.encode_appearance(x, b);
  const auto structure = model.encode_structure(b);
  const ag::Var z = ag::reparameterize(out.posterior.mean, out.posterior.log_var, noise);
  out.reconstruction = model.decode(z, structure);

  ag::Var kl;
  if (prior.kind == PriorBatch::Kind::additive) {
    kl = ag::kl_additive(out.posterior.mean, out.posterior.log_var, prior.mean, prior.var);
  } else {
    kl = ag::kl_mixture_mc(out.posterior.mean, out.posterior.log_var, prior.mc_noise, prior.weights,
                           prior.component_means, prior.component_scales);
  }
  out.objective = combine(reconstruction_terms(x, out.reconstruction, extractor, w), kl, w.kl_coeff);
  return out;
}

}  // namespace afvae::losses
