#pragma once

// Define-by-run reverse-mode differentiation over Tensor values.
//
// Every op returns a fresh Var whose backward closure pushes gradients into
// its parents. Parameters are long-lived leaf Vars; a forward pass builds a
// graph that references them and is released with the root.

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "afvae/kernels.hpp"
#include "afvae/tensor.hpp"

namespace afvae::ag {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;

  void accumulate(const Tensor& g);
  void zero_grad();
};

Var constant(Tensor value);
Var parameter(Tensor value);

/// Seeds d(root)/d(root) = 1 and runs the tape. root must hold one element.
void backward(const Var& root);

Var add(const Var& a, const Var& b);
Var scale(const Var& a, double s);
/// Weighted sum of scalar Vars.
Var weighted_sum(std::span<const Var> terms, std::span<const double> weights);

Var conv2d(const Var& x, const Var& weight, const Var& bias,
           const kernels::ConvParams& p);
/// weight is [Cin, Cout, k, k]; output extent (H-1)*stride - 2*pad + k.
Var conv_transpose2d(const Var& x, const Var& weight, const Var& bias,
                     const kernels::ConvParams& p);
/// Effective weight g_o * v_o / ||v_o|| for every slice o along axis 0.
Var weight_norm(const Var& v, const Var& g);

Var prelu(const Var& x, const Var& slope);
Var relu(const Var& x);
Var sigmoid(const Var& x);
Var avg_pool2(const Var& x);
Var pixel_shuffle(const Var& x, int r);
Var concat_channels(const Var& a, const Var& b);

struct BatchNormStats {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};
Var batch_norm(const Var& x, const Var& gamma, const Var& beta,
               BatchNormStats& stats, bool training);

/// Mean over all elements of |a - b|.
Var l1_mean(const Var& a, const Var& b);
/// Mean over all elements of (a - b)^2.
Var l2_mean(const Var& a, const Var& b);

/// z = mean + exp(log_var / 2) * noise; noise is a constant.
Var reparameterize(const Var& mean, const Var& log_var, const Tensor& noise);

/// Batch-averaged closed-form KL(q || N(prior_mean_i, prior_var_i I)) where
/// row i of mean/log_var (flattened per sample) is the posterior of sample i.
Var kl_additive(const Var& mean, const Var& log_var, const Tensor& prior_mean,
                std::span<const double> prior_var);

/// Batch-averaged Monte Carlo KL(q || sum_k w_ik N(mu_k, sigma_k^2 I)) using
/// noise[s] (same shape as mean) as the reparameterized draws.
Var kl_mixture_mc(const Var& mean, const Var& log_var,
                  std::span<const Tensor> noise, const Tensor& weights,
                  const Tensor& component_means,
                  std::span<const double> component_scales);

}  // namespace afvae::ag
