#pragma once

// Conditional prior over the appearance code and its KL terms.
//
// The model maximizes the conditional bound
//   log p(x|y) >= E_q[log p(x|y,z)] - KL(q(z|x,y) || p(z|y)).
// p(z|y) is either the additive focal prior
//   N(z | sum_k w_k mu_k, sigma^2 I),  sigma^2 = sum_k w_k^2 sigma_k^2,
// whose KL against a diagonal Gaussian posterior has a closed form, or the
// mixture sum_k w_k N(mu_k, sigma_k^2 I), whose KL is estimated by sampling.

#include <Eigen/Core>

#include <random>

#include "afvae/focalbank.hpp"

namespace afvae::prior {

struct GaussianPosterior {
  Eigen::VectorXd mean;
  Eigen::VectorXd log_var;

  int dim() const { return static_cast<int>(mean.size()); }
  void validate() const;
};

struct AdditiveFocalPrior {
  Eigen::VectorXd mean;
  double var = 1.0;
};

struct MixtureComponents {
  Eigen::VectorXd weights;  // K, convex
  focal::Features means;    // K x d_z
  Eigen::VectorXd scales;   // K, sigma_k > 0
};

AdditiveFocalPrior make_prior(const Eigen::Ref<const Eigen::VectorXd>& weights,
                              const focal::Features& latent_means,
                              const Eigen::Ref<const Eigen::VectorXd>& latent_scales);
AdditiveFocalPrior make_prior(const Eigen::Ref<const Eigen::VectorXd>& weights,
                              const focal::FocalBank& bank);

/// sum_d [ log(sigma / sigma_phi,d) + (sigma_phi,d^2 + (mu_phi,d - m_d)^2) / (2 sigma^2) - 1/2 ].
double kl_additive(const GaussianPosterior& q, const AdditiveFocalPrior& p);

struct KlGradient {
  Eigen::VectorXd d_mean;
  Eigen::VectorXd d_log_var;
};
KlGradient kl_additive_grad(const GaussianPosterior& q, const AdditiveFocalPrior& p);

/// Raw-pointer kernel shared with the autograd op. Writes gradients when the
/// output pointers are non-null.
double kl_additive_raw(const double* mean, const double* log_var, const double* prior_mean,
                       double prior_var, int dim, double* d_mean, double* d_log_var);

/// log N(z | mean, exp(log_var)) with diagonal covariance.
double log_density(const GaussianPosterior& q, const Eigen::Ref<const Eigen::VectorXd>& z);
/// log sum_k w_k N(z | mu_k, sigma_k^2 I); d_z receives d/dz when non-null.
double log_mixture_density(const MixtureComponents& mix,
                           const Eigen::Ref<const Eigen::VectorXd>& z,
                           Eigen::VectorXd* d_z = nullptr);

/// Monte Carlo KL(q || mixture) over the supplied standard-normal draws
/// (one column per sample). Throws when there are no draws.
double kl_mixture_bound(const GaussianPosterior& q, const MixtureComponents& mix,
                        const Eigen::Ref<const Eigen::MatrixXd>& noise);
/// Same estimator with S fresh draws from rng.
double kl_mixture_bound(const GaussianPosterior& q, const MixtureComponents& mix, int samples,
                        std::mt19937_64& rng);

/// z = mean + exp(log_var / 2) * noise.
Eigen::VectorXd sample(const GaussianPosterior& q, const Eigen::Ref<const Eigen::VectorXd>& noise);

}  // namespace afvae::prior
