#include "afvae/prior.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

namespace afvae::prior {

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

void require_finite(const Eigen::Ref<const Eigen::VectorXd>& v, const char* what) {
  if (!v.allFinite()) throw std::invalid_argument(std::string(what) + " contains non-finite values");
}

}  // namespace

void GaussianPosterior::validate() const {
  require(mean.size() == log_var.size(), "posterior mean/log_var sizes differ");
  require_finite(mean, "posterior mean");
  require_finite(log_var, "posterior log_var");
}

AdditiveFocalPrior make_prior(const Eigen::Ref<const Eigen::VectorXd>& weights,
                              const focal::Features& latent_means,
                              const Eigen::Ref<const Eigen::VectorXd>& latent_scales) {
  if (weights.size() != latent_means.rows() || weights.size() != latent_scales.size())
    throw std::invalid_argument("make_prior: " + std::to_string(weights.size()) +
                                " weights for " + std::to_string(latent_means.rows()) +
                                " components");
  AdditiveFocalPrior p;
  p.mean = latent_means.transpose() * weights;
  p.var = (weights.array().square() * latent_scales.array().square()).sum();
  require(p.var > 0.0, "make_prior: prior variance must be positive");
  return p;
}

AdditiveFocalPrior make_prior(const Eigen::Ref<const Eigen::VectorXd>& weights,
                              const focal::FocalBank& bank) {
  return make_prior(weights, bank.latent_means, bank.latent_scales);
}

double kl_additive_raw(const double* mean, const double* log_var, const double* prior_mean,
                       double prior_var, int dim, double* d_mean, double* d_log_var) {
  const double log_prior_var = std::log(prior_var);
  const double inv2 = 0.5 / prior_var;
  double total = 0.0;
  for (int d = 0; d < dim; ++d) {
    const double var = std::exp(log_var[d]);
    const double diff = mean[d] - prior_mean[d];
    // log(sigma / sigma_phi) = (log sigma^2 - log sigma_phi^2) / 2
    total += 0.5 * (log_prior_var - log_var[d]) + (var + diff * diff) * inv2 - 0.5;
    if (d_mean) d_mean[d] = 2.0 * diff * inv2;
    if (d_log_var) d_log_var[d] = -0.5 + var * inv2;
  }
  return total;
}

double kl_additive(const GaussianPosterior& q, const AdditiveFocalPrior& p) {
  q.validate();
  require(p.mean.size() == q.mean.size(), "kl_additive: prior/posterior dimensions differ");
  require_finite(p.mean, "prior mean");
  if (!std::isfinite(p.var) || p.var <= 0.0) throw std::invalid_argument("kl_additive: invalid prior variance");
  return kl_additive_raw(q.mean.data(), q.log_var.data(), p.mean.data(), p.var, q.dim(), nullptr, nullptr);
}

KlGradient kl_additive_grad(const GaussianPosterior& q, const AdditiveFocalPrior& p) {
  q.validate();
  require(p.mean.size() == q.mean.size(), "kl_additive_grad: dimension mismatch");
  KlGradient g{Eigen::VectorXd(q.dim()), Eigen::VectorXd(q.dim())};
  kl_additive_raw(q.mean.data(), q.log_var.data(), p.mean.data(), p.var, q.dim(), g.d_mean.data(),
                  g.d_log_var.data());
  return g;
}

double log_density(const GaussianPosterior& q, const Eigen::Ref<const Eigen::VectorXd>& z) {
  const Eigen::ArrayXd diff = (z - q.mean).array();
  return -0.5 * (kLog2Pi * q.dim() + q.log_var.sum() + (diff.square() * (-q.log_var.array()).exp()).sum());
}

double log_mixture_density(const MixtureComponents& mix, const Eigen::Ref<const Eigen::VectorXd>& z,
                           Eigen::VectorXd* d_z) {
  const int k = static_cast<int>(mix.weights.size());
  const int dim = static_cast<int>(z.size());
  Eigen::VectorXd logs(k);
  for (int i = 0; i < k; ++i) {
    const double s2 = mix.scales[i] * mix.scales[i];
    const double sq = (z - mix.means.row(i).transpose()).squaredNorm();
    logs[i] = mix.weights[i] > 0.0
                  ? std::log(mix.weights[i]) - 0.5 * (dim * (kLog2Pi + std::log(s2)) + sq / s2)
                  : -std::numeric_limits<double>::infinity();
  }
  const double top = logs.maxCoeff();
  const Eigen::VectorXd r = (logs.array() - top).exp();
  const double total = r.sum();
  if (d_z) {
    d_z->setZero(dim);
    for (int i = 0; i < k; ++i) {
      if (r[i] == 0.0) continue;
      const double s2 = mix.scales[i] * mix.scales[i];
      *d_z -= (r[i] / total) * (z - mix.means.row(i).transpose()) / s2;
    }
  }
  return top + std::log(total);
}

double kl_mixture_bound(const GaussianPosterior& q, const MixtureComponents& mix,
                        const Eigen::Ref<const Eigen::MatrixXd>& noise) {
  q.validate();
  if (noise.cols() < 1) throw std::invalid_argument("kl_mixture_bound needs at least one sample");
  require(noise.rows() == q.dim(), "kl_mixture_bound: noise dimension mismatch");
  require(mix.means.cols() == q.dim() && mix.means.rows() == mix.weights.size() &&
              mix.scales.size() == mix.weights.size(),
          "kl_mixture_bound: malformed mixture components");
  double total = 0.0;
  for (int s = 0; s < noise.cols(); ++s) {
    const Eigen::VectorXd z = sample(q, noise.col(s));
    total += log_density(q, z) - log_mixture_density(mix, z);
  }
  return total / static_cast<double>(noise.cols());
}

double kl_mixture_bound(const GaussianPosterior& q, const MixtureComponents& mix, int samples,
                        std::mt19937_64& rng) {
  if (samples < 1) throw std::invalid_argument("kl_mixture_bound: samples must be >= 1");
  std::normal_distribution<double> normal;
  Eigen::MatrixXd noise(q.dim(), samples);
  for (int s = 0; s < samples; ++s)
    for (int d = 0; d < q.dim(); ++d) noise(d, s) = normal(rng);
  return kl_mixture_bound(q, mix, noise);
}

Eigen::VectorXd sample(const GaussianPosterior& q, const Eigen::Ref<const Eigen::VectorXd>& noise) {
  require(noise.size() == q.mean.size(), "sample: noise dimension mismatch");
  return q.mean.array() + (0.5 * q.log_var.array()).exp() * noise.array();
}

}  // namespace afvae::prior
