#include <gtest/gtest.h>

#include <Eigen/QR>

#include <cmath>
#include <numbers>
#include <random>

#include "afvae/prior.hpp"

using namespace afvae;
using namespace afvae::prior;

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

struct McResult {
  double mean;
  double se;
};

// E_q[log q(z) - log p(z)] with both densities written out by hand.
McResult mc_kl_gaussian(const GaussianPosterior& q, const AdditiveFocalPrior& p, int samples, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  double sum = 0.0, sq = 0.0;
  for (int s = 0; s < samples; ++s) {
    double lq = 0.0, lp = 0.0;
    for (int d = 0; d < q.dim(); ++d) {
      const double var_q = std::exp(q.log_var(d));
      const double z = q.mean(d) + std::sqrt(var_q) * n(rng);
      lq += -0.5 * (kLog2Pi + q.log_var(d) + (z - q.mean(d)) * (z - q.mean(d)) / var_q);
      lp += -0.5 * (kLog2Pi + std::log(p.var) + (z - p.mean(d)) * (z - p.mean(d)) / p.var);
    }
    sum += lq - lp;
    sq += (lq - lp) * (lq - lp);
  }
  const double m = sum / samples;
  return {m, std::sqrt((sq / samples - m * m) / samples)};
}

McResult mc_kl_mixture(const GaussianPosterior& q, const MixtureComponents& mix, int samples, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  const int dz = q.dim();
  double sum = 0.0, sq = 0.0;
  Eigen::VectorXd z(dz);
  for (int s = 0; s < samples; ++s) {
    double lq = 0.0;
    for (int d = 0; d < dz; ++d) {
      const double var_q = std::exp(q.log_var(d));
      z(d) = q.mean(d) + std::sqrt(var_q) * n(rng);
      lq += -0.5 * (kLog2Pi + q.log_var(d) + (z(d) - q.mean(d)) * (z(d) - q.mean(d)) / var_q);
    }
    double p = 0.0;
    for (int k = 0; k < mix.weights.size(); ++k) {
      const double v = mix.scales(k) * mix.scales(k);
      const double r2 = (z - mix.means.row(k).transpose()).squaredNorm();
      p += mix.weights(k) * std::exp(-0.5 * (dz * (kLog2Pi + std::log(v)) + r2 / v));
    }
    const double diff = lq - std::log(p);
    sum += diff;
    sq += diff * diff;
  }
  const double m = sum / samples;
  return {m, std::sqrt((sq / samples - m * m) / samples)};
}

GaussianPosterior random_q(int dz, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1, 1);
  GaussianPosterior q{Eigen::VectorXd(dz), Eigen::VectorXd(dz)};
  for (int d = 0; d < dz; ++d) {
    q.mean(d) = u(rng);
    q.log_var(d) = 0.8 * u(rng);
  }
  return q;
}

AdditiveFocalPrior random_p(int dz, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1, 1);
  AdditiveFocalPrior p{Eigen::VectorXd(dz), 0.3 + 0.5 * (u(rng) + 1)};
  for (int d = 0; d < dz; ++d) p.mean(d) = 0.5 * u(rng);
  return p;
}

}  // namespace

TEST(MakePrior, SingleComponentCollapses) {
  focal::Features mu(1, 3);
  mu << 0.6, 0.8, 0.0;
  const auto p = make_prior(Eigen::VectorXd::Ones(1), mu, Eigen::VectorXd::Ones(1));
  EXPECT_EQ(p.mean, Eigen::Vector3d(0.6, 0.8, 0.0));
  EXPECT_DOUBLE_EQ(p.var, 1.0);
}

TEST(MakePrior, HalfHalfGivesHalfVarianceAndCancellingMeans) {
  focal::Features mu(2, 2);
  mu << 1, 0, -1, 0;
  const auto p = make_prior(Eigen::Vector2d(0.5, 0.5), mu, Eigen::Vector2d(1, 1));
  EXPECT_DOUBLE_EQ(p.var, 0.5);
  EXPECT_DOUBLE_EQ(p.mean.norm(), 0.0);
}

TEST(MakePrior, DimensionMismatchThrows) {
  focal::Features mu = focal::Features::Identity(3, 3);
  EXPECT_THROW(make_prior(Eigen::Vector2d(0.5, 0.5), mu, Eigen::Vector3d::Ones()), std::invalid_argument);
  EXPECT_THROW(make_prior(Eigen::Vector3d::Constant(1 / 3.0), mu, Eigen::Vector2d::Ones()), std::invalid_argument);
}

TEST(MakePrior, MeanInsideUnitBallAndVarPermutationInvariant) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 50; ++t) {
    const auto mu = focal::init_latent_means(6, 10, t);
    Eigen::VectorXd w = Eigen::VectorXd::NullaryExpr(6, [&] { return std::uniform_real_distribution<double>(0, 1)(rng); });
    w /= w.sum();
    Eigen::VectorXd s = Eigen::VectorXd::NullaryExpr(6, [&] { return std::uniform_real_distribution<double>(0.5, 2)(rng); });
    const auto p = make_prior(w, mu, s);
    EXPECT_LE(p.mean.norm(), 1.0 + 1e-12);
    EXPECT_GT(p.var, 0.0);
    double expect = 0.0;
    for (int k = 0; k < 6; ++k) expect += w(k) * w(k) * s(k) * s(k);
    EXPECT_NEAR(p.var, expect, 1e-14);

    std::vector<int> perm{5, 3, 1, 0, 2, 4};
    focal::Features mu2(6, 10);
    Eigen::VectorXd w2(6), s2(6);
    for (int k = 0; k < 6; ++k) {
      mu2.row(k) = mu.row(perm[k]);
      w2(k) = w(perm[k]);
      s2(k) = s(perm[k]);
    }
    const auto p2 = make_prior(w2, mu2, s2);
    EXPECT_NEAR(p2.var, p.var, 1e-14);
    EXPECT_LT((p2.mean - p.mean).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(KlAdditive, IdenticalGaussiansGiveZero) {
  std::mt19937_64 rng(2);
  auto p = random_p(7, rng);
  GaussianPosterior q{p.mean, Eigen::VectorXd::Constant(7, std::log(p.var))};
  EXPECT_NEAR(kl_additive(q, p), 0.0, 1e-13);
}

TEST(KlAdditive, UnitShiftIsOneHalf) {
  GaussianPosterior q{Eigen::VectorXd::Ones(1), Eigen::VectorXd::Zero(1)};
  AdditiveFocalPrior p{Eigen::VectorXd::Zero(1), 1.0};
  EXPECT_DOUBLE_EQ(kl_additive(q, p), 0.5);
  const auto mc = mc_kl_gaussian(q, p, 1'000'000, 3);
  EXPECT_NEAR(mc.mean, 0.5, 1e-2);
}

TEST(KlAdditive, MatchesMonteCarloWithinThreeStandardErrors) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 5; ++t) {
    const auto q = random_q(8, rng);
    const auto p = random_p(8, rng);
    const auto mc = mc_kl_gaussian(q, p, 200'000, 10 + t);
    EXPECT_NEAR(kl_additive(q, p), mc.mean, 3 * mc.se) << "trial " << t;
  }
}

TEST(KlAdditive, NonNegativeOverRandomInputs) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 500; ++t) EXPECT_GE(kl_additive(random_q(5, rng), random_p(5, rng)), 0.0);
}

TEST(KlAdditive, RotationInvariantForIsotropicPosterior) {
  // An orthogonal rotation keeps the isotropic prior isotropic; the posterior
  // has to be isotropic too for its covariance to survive the rotation.
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n;
  for (int t = 0; t < 10; ++t) {
    const int dz = 6;
    const Eigen::MatrixXd r = Eigen::MatrixXd::NullaryExpr(dz, dz, [&] { return n(rng); }).householderQr().householderQ();
    const auto mu = focal::init_latent_means(4, dz, 100 + t);
    Eigen::Vector4d w(0.1, 0.2, 0.3, 0.4);
    GaussianPosterior q{Eigen::VectorXd::NullaryExpr(dz, [&] { return n(rng); }), Eigen::VectorXd::Constant(dz, 0.3 * n(rng))};
    const auto p = make_prior(w, mu, Eigen::Vector4d::Ones());
    const focal::Features mu_rot = mu * r.transpose();
    GaussianPosterior q_rot{r * q.mean, q.log_var};
    const auto p_rot = make_prior(w, mu_rot, Eigen::Vector4d::Ones());
    EXPECT_NEAR(kl_additive(q_rot, p_rot), kl_additive(q, p), 1e-10);
  }
}

TEST(KlAdditive, AnalyticGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  const double h = 1e-5;
  for (int t = 0; t < 5; ++t) {
    auto q = random_q(6, rng);
    const auto p = random_p(6, rng);
    const auto g = kl_additive_grad(q, p);
    for (int d = 0; d < 6; ++d) {
      for (int which = 0; which < 2; ++which) {
        Eigen::VectorXd& v = which == 0 ? q.mean : q.log_var;
        const double keep = v(d);
        v(d) = keep + h;
        const double up = kl_additive(q, p);
        v(d) = keep - h;
        const double down = kl_additive(q, p);
        v(d) = keep;
        const double fd = (up - down) / (2 * h);
        const double an = which == 0 ? g.d_mean(d) : g.d_log_var(d);
        EXPECT_LT(std::abs(fd - an) / std::max(1e-6, std::abs(an)), 1e-4) << d << " " << which;
      }
    }
  }
}

TEST(KlAdditive, NonFiniteInputsThrow) {
  GaussianPosterior q{Eigen::VectorXd::Zero(2), Eigen::VectorXd::Zero(2)};
  AdditiveFocalPrior p{Eigen::VectorXd::Zero(2), 1.0};
  q.log_var(1) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(kl_additive(q, p), std::invalid_argument);
  q.log_var(1) = 0.0;
  q.mean(0) = std::nan("");
  EXPECT_THROW(kl_additive(q, p), std::invalid_argument);
}

TEST(KlMixture, SingleComponentConvergesToClosedForm) {
  std::mt19937_64 rng(8);
  const auto q = random_q(4, rng);
  MixtureComponents mix{Eigen::VectorXd::Ones(1), focal::Features(1, 4), Eigen::VectorXd::Constant(1, 0.9)};
  mix.means.row(0) = Eigen::RowVector4d(0.2, -0.1, 0.4, 0.0);
  AdditiveFocalPrior p{mix.means.row(0).transpose(), 0.81};
  std::mt19937_64 draw(9);
  const double est = kl_mixture_bound(q, mix, 200'000, draw);
  EXPECT_NEAR(est, kl_additive(q, p), 2e-2);
}

TEST(KlMixture, QEqualToOnlyComponentGivesZero) {
  MixtureComponents mix{Eigen::VectorXd::Ones(1), focal::Features::Zero(1, 3), Eigen::VectorXd::Ones(1)};
  GaussianPosterior q{Eigen::VectorXd::Zero(3), Eigen::VectorXd::Zero(3)};
  std::mt19937_64 rng(10);
  EXPECT_NEAR(kl_mixture_bound(q, mix, 64, rng), 0.0, 1e-12);
}

TEST(KlMixture, SymmetricPairMatchesHighSampleReference) {
  MixtureComponents mix{Eigen::Vector2d(0.5, 0.5), focal::Features(2, 2), Eigen::Vector2d(1, 1)};
  mix.means << 1.5, 0, -1.5, 0;
  GaussianPosterior q{Eigen::VectorXd::Zero(2), Eigen::VectorXd::Constant(2, -0.5)};
  const auto ref = mc_kl_mixture(q, mix, 1'000'000, 11);
  std::mt19937_64 rng(12);
  const double est = kl_mixture_bound(q, mix, 100'000, rng);
  EXPECT_GT(est, 0.0);
  // both estimators carry noise; the difference has roughly sqrt(11) x the
  // reference standard error
  EXPECT_NEAR(est, ref.mean, 3 * std::sqrt(11.0) * ref.se);
}

TEST(KlMixture, ExplicitNoiseMatchesHandComputation) {
  MixtureComponents mix{Eigen::Vector2d(0.3, 0.7), focal::Features(2, 2), Eigen::Vector2d(0.8, 1.2)};
  mix.means << 1, 0, 0, -1;
  GaussianPosterior q{Eigen::Vector2d(0.2, 0.1), Eigen::Vector2d(-0.4, 0.2)};
  Eigen::MatrixXd noise(2, 3);
  noise << 0.5, -1.0, 0.0, 1.5, 0.3, -0.7;
  double expect = 0.0;
  for (int s = 0; s < 3; ++s) {
    const Eigen::VectorXd z = sample(q, noise.col(s));
    expect += (log_density(q, z) - log_mixture_density(mix, z)) / 3.0;
  }
  EXPECT_NEAR(kl_mixture_bound(q, mix, noise), expect, 1e-12);
  std::mt19937_64 rng(1);
  EXPECT_THROW(kl_mixture_bound(q, mix, 0, rng), std::invalid_argument);
  EXPECT_THROW(kl_mixture_bound(q, mix, Eigen::MatrixXd(2, 0)), std::invalid_argument);
}

TEST(KlMixture, DensityGradientMatchesFiniteDifferences) {
  MixtureComponents mix{Eigen::Vector3d(0.2, 0.5, 0.3), focal::Features(3, 2), Eigen::Vector3d(0.8, 1.0, 1.3)};
  mix.means << 1, 0, 0, -1, -0.5, 0.5;
  Eigen::VectorXd z(2);
  z << 0.3, -0.2;
  Eigen::VectorXd g;
  log_mixture_density(mix, z, &g);
  for (int d = 0; d < 2; ++d) {
    Eigen::VectorXd up = z, down = z;
    up(d) += 1e-5;
    down(d) -= 1e-5;
    const double fd = (log_mixture_density(mix, up) - log_mixture_density(mix, down)) / 2e-5;
    EXPECT_NEAR(g(d), fd, 1e-8);
  }
}

TEST(Sample, ReparameterizationCases) {
  GaussianPosterior q{Eigen::Vector3d(1, -2, 0.5), Eigen::Vector3d(0, 0, 0)};
  EXPECT_EQ(sample(q, Eigen::Vector3d::Zero()), q.mean);
  EXPECT_EQ(sample(q, Eigen::Vector3d::UnitX()), Eigen::Vector3d(2, -2, 0.5));
}

TEST(Sample, EmpiricalMomentsMatch) {
  GaussianPosterior q{Eigen::Vector2d(0.7, -1.3), Eigen::Vector2d(std::log(0.25), std::log(2.0))};
  std::mt19937_64 rng(13);
  std::normal_distribution<double> n;
  const int count = 100'000;
  Eigen::Vector2d sum = Eigen::Vector2d::Zero(), sq = Eigen::Vector2d::Zero();
  for (int i = 0; i < count; ++i) {
    const Eigen::Vector2d z = sample(q, Eigen::Vector2d(n(rng), n(rng)));
    sum += z;
    sq += z.cwiseProduct(z);
  }
  for (int d = 0; d < 2; ++d) {
    const double var = std::exp(q.log_var(d));
    const double mean = sum(d) / count;
    const double emp_var = sq(d) / count - mean * mean;
    EXPECT_NEAR(mean, q.mean(d), 3 * std::sqrt(var / count));
    // Var of the sample variance of a Gaussian is 2 sigma^4 / n
    EXPECT_NEAR(emp_var, var, 3 * std::sqrt(2.0 / count) * var);
  }
}
