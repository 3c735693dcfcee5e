#include <gtest/gtest.h>

#include <cmath>

#include "afvae/autograd.hpp"
#include "afvae/prior.hpp"
#include "test_util.hpp"

using namespace afvae;
using afvae::testing::grad_check;
using afvae::testing::random_tensor;

namespace {

// Scalar probe: sum of out * fixed random weights, so every output entry
// contributes a distinct gradient.
struct Probe {
  Tensor weights;
  ag::Var operator()(const ag::Var& out) {
    if (weights.empty()) {
      std::mt19937_64 rng(99);
      weights = random_tensor(out->value.shape(), rng);
    }
    return ag::l2_mean(out, ag::constant(weights));
  }
};

constexpr double kTol = 1e-6;

}  // namespace

TEST(Autograd, AddScaleWeightedSum) {
  std::mt19937_64 rng(1);
  auto a = ag::parameter(random_tensor({2, 3, 2, 2}, rng));
  auto b = ag::parameter(random_tensor({2, 3, 2, 2}, rng));
  Probe probe;
  auto f = [&] {
    const ag::Var s1 = probe(ag::add(a, ag::scale(b, -1.7)));
    const ag::Var s2 = ag::l1_mean(a, ag::constant(Tensor(a->value.shape(), 0.3)));
    const std::vector<ag::Var> terms{s1, s2};
    const std::vector<double> w{0.5, 2.0};
    return ag::weighted_sum(terms, w);
  };
  EXPECT_LT(grad_check({a, b}, f, 10, rng).max_rel_err, kTol);
}

TEST(Autograd, Conv2dGradients) {
  std::mt19937_64 rng(2);
  auto x = ag::parameter(random_tensor({2, 3, 6, 6}, rng));
  auto w = ag::parameter(random_tensor({4, 3, 3, 3}, rng));
  auto b = ag::parameter(random_tensor({1, 4, 1, 1}, rng));
  Probe probe;
  for (const kernels::ConvParams p : {kernels::ConvParams{1, 1}, kernels::ConvParams{2, 1}}) {
    probe.weights = Tensor();
    auto f = [&] { return probe(ag::conv2d(x, w, b, p)); };
    EXPECT_LT(grad_check({x, w, b}, f, 10, rng).max_rel_err, kTol);
  }
}

TEST(Autograd, ConvTransposeShapeAndGradients) {
  std::mt19937_64 rng(3);
  auto x = ag::parameter(random_tensor({2, 3, 4, 4}, rng));
  auto w = ag::parameter(random_tensor({3, 5, 4, 4}, rng));
  auto b = ag::parameter(random_tensor({1, 5, 1, 1}, rng));
  const kernels::ConvParams p{2, 1};
  const auto y = ag::conv_transpose2d(x, w, b, p);
  EXPECT_EQ(y->value.shape(), (Shape{2, 5, 8, 8}));
  Probe probe;
  auto f = [&] { return probe(ag::conv_transpose2d(x, w, b, p)); };
  EXPECT_LT(grad_check({x, w, b}, f, 10, rng).max_rel_err, kTol);
}

TEST(Autograd, ConvTransposeIsAdjointOfConv) {
  std::mt19937_64 rng(4);
  const Tensor w = random_tensor({3, 5, 4, 4}, rng);  // conv maps 5 -> 3 channels
  const Tensor x = random_tensor({1, 3, 4, 4}, rng);
  const kernels::ConvParams p{2, 1};
  const Tensor y = ag::conv_transpose2d(ag::constant(x), ag::constant(w), nullptr, p)->value;
  const Tensor u = random_tensor(y.shape(), rng);
  const Tensor cu = kernels::conv2d(u, w, {}, p);
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < y.numel(); ++i) lhs += y[i] * u[i];
  for (std::size_t i = 0; i < x.numel(); ++i) rhs += x[i] * cu[i];
  EXPECT_NEAR(lhs, rhs, 1e-9);
}

TEST(Autograd, WeightNormGradients) {
  std::mt19937_64 rng(5);
  auto v = ag::parameter(random_tensor({4, 3, 3, 3}, rng));
  auto g = ag::parameter(random_tensor({4, 1, 1, 1}, rng, 0.5, 2.0));
  Probe probe;
  auto f = [&] { return probe(ag::weight_norm(v, g)); };
  EXPECT_LT(grad_check({v, g}, f, 12, rng).max_rel_err, kTol);
}

TEST(Autograd, WeightNormEffectiveNormEqualsGain) {
  std::mt19937_64 rng(6);
  const Tensor v = random_tensor({5, 2, 3, 3}, rng);
  const Tensor g = random_tensor({5, 1, 1, 1}, rng, -2.0, 2.0);
  const Tensor w = ag::weight_norm(ag::constant(v), ag::constant(g))->value;
  const std::size_t slice = v.shape().sample();
  for (int o = 0; o < 5; ++o) {
    double ss = 0.0;
    for (std::size_t i = 0; i < slice; ++i) ss += w[o * slice + i] * w[o * slice + i];
    EXPECT_NEAR(std::sqrt(ss), std::abs(g[o]), 1e-12);
  }
}

TEST(Autograd, ActivationGradients) {
  std::mt19937_64 rng(7);
  auto x = ag::parameter(random_tensor({2, 3, 3, 3}, rng));
  auto slope = ag::parameter(random_tensor({1, 3, 1, 1}, rng, 0.1, 0.4));
  Probe p1, p2, p3;
  EXPECT_LT(grad_check({x, slope}, [&] { return p1(ag::prelu(x, slope)); }, 10, rng).max_rel_err, kTol);
  EXPECT_LT(grad_check({x}, [&] { return p2(ag::relu(x)); }, 10, rng).max_rel_err, kTol);
  EXPECT_LT(grad_check({x}, [&] { return p3(ag::sigmoid(x)); }, 10, rng).max_rel_err, kTol);
}

TEST(Autograd, PoolShuffleConcatGradients) {
  std::mt19937_64 rng(8);
  auto x = ag::parameter(random_tensor({2, 4, 4, 4}, rng));
  auto y = ag::parameter(random_tensor({2, 2, 8, 8}, rng));
  Probe p1, p2;
  EXPECT_LT(grad_check({x}, [&] { return p1(ag::avg_pool2(x)); }, 10, rng).max_rel_err, kTol);
  EXPECT_LT(grad_check({x, y}, [&] { return p2(ag::concat_channels(ag::pixel_shuffle(x, 2), y)); }, 10, rng)
                .max_rel_err,
            kTol);
}

TEST(Autograd, BatchNormGradients) {
  std::mt19937_64 rng(9);
  auto x = ag::parameter(random_tensor({3, 2, 3, 3}, rng));
  auto gamma = ag::parameter(random_tensor({1, 2, 1, 1}, rng, 0.5, 1.5));
  auto beta = ag::parameter(random_tensor({1, 2, 1, 1}, rng));
  ag::BatchNormStats stats;
  stats.running_mean.assign(2, 0.0);
  stats.running_var.assign(2, 1.0);
  Probe probe;
  auto f = [&] { return probe(ag::batch_norm(x, gamma, beta, stats, true)); };
  EXPECT_LT(grad_check({x, gamma, beta}, f, 10, rng).max_rel_err, 1e-5);
}

TEST(Autograd, LossGradients) {
  std::mt19937_64 rng(10);
  auto a = ag::parameter(random_tensor({2, 3, 4, 4}, rng));
  const ag::Var b = ag::constant(random_tensor({2, 3, 4, 4}, rng));
  EXPECT_LT(grad_check({a}, [&] { return ag::l1_mean(a, b); }, 10, rng).max_rel_err, kTol);
  EXPECT_LT(grad_check({a}, [&] { return ag::l2_mean(a, b); }, 10, rng).max_rel_err, kTol);
}

TEST(Autograd, ReparameterizeGradients) {
  std::mt19937_64 rng(11);
  auto m = ag::parameter(random_tensor({2, 3, 2, 2}, rng));
  auto lv = ag::parameter(random_tensor({2, 3, 2, 2}, rng));
  const Tensor noise = random_tensor({2, 3, 2, 2}, rng);
  Probe probe;
  EXPECT_LT(grad_check({m, lv}, [&] { return probe(ag::reparameterize(m, lv, noise)); }, 10, rng).max_rel_err,
            kTol);
  // noise = 0 gives the mean
  const auto z = ag::reparameterize(m, lv, Tensor(noise.shape(), 0.0));
  EXPECT_EQ(z->value.vec(), m->value.vec());
}

TEST(Autograd, KlAdditiveMatchesPerSampleClosedForm) {
  std::mt19937_64 rng(12);
  const int n = 3, dz = 6;
  auto m = ag::parameter(random_tensor({n, dz, 1, 1}, rng));
  auto lv = ag::parameter(random_tensor({n, dz, 1, 1}, rng));
  const Tensor pm = random_tensor({n, dz, 1, 1}, rng);
  const std::vector<double> pv{0.3, 0.8, 1.7};
  const double kl = ag::kl_additive(m, lv, pm, pv)->value[0];
  double expect = 0.0;
  for (int i = 0; i < n; ++i) {
    prior::GaussianPosterior q{Eigen::Map<const Eigen::VectorXd>(m->value.data() + i * dz, dz),
                               Eigen::Map<const Eigen::VectorXd>(lv->value.data() + i * dz, dz)};
    prior::AdditiveFocalPrior p{Eigen::Map<const Eigen::VectorXd>(pm.data() + i * dz, dz), pv[i]};
    expect += prior::kl_additive(q, p) / n;
  }
  EXPECT_NEAR(kl, expect, 1e-12);
  EXPECT_LT(grad_check({m, lv}, [&] { return ag::kl_additive(m, lv, pm, pv); }, 10, rng).max_rel_err, 1e-6);
}

TEST(Autograd, KlMixtureGradients) {
  std::mt19937_64 rng(13);
  const int n = 2, dz = 5, k = 3;
  auto m = ag::parameter(random_tensor({n, dz, 1, 1}, rng, -0.5, 0.5));
  auto lv = ag::parameter(random_tensor({n, dz, 1, 1}, rng, -0.5, 0.5));
  std::vector<Tensor> noise;
  for (int s = 0; s < 4; ++s) noise.push_back(random_tensor({n, dz, 1, 1}, rng, -2.0, 2.0));
  Tensor w(Shape{n, k, 1, 1}, {0.2, 0.3, 0.5, 0.6, 0.3, 0.1});
  const Tensor means = random_tensor({k, dz, 1, 1}, rng);
  const std::vector<double> scales{0.7, 1.0, 1.3};
  auto f = [&] { return ag::kl_mixture_mc(m, lv, noise, w, means, scales); };
  EXPECT_LT(grad_check({m, lv}, f, 10, rng).max_rel_err, 1e-6);
}

TEST(Autograd, SharedSubgraphAccumulates) {
  auto x = ag::parameter(Tensor(Shape{1, 1, 1, 1}, 3.0));
  // f = x*2 + x*5 through two paths -> df/dx = 7
  const std::vector<ag::Var> terms{ag::scale(x, 2.0), ag::scale(x, 5.0)};
  const std::vector<double> w{1.0, 1.0};
  ag::backward(ag::weighted_sum(terms, w));
  EXPECT_DOUBLE_EQ(x->grad[0], 7.0);
}
