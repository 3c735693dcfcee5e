#pragma once

// Compute kernels for the network. The functions in afvae::kernels are the
// production paths (OpenMP over the batch axis, im2col + GEMM per sample).
// afvae::kernels::reference holds direct serial loop versions that the tests
// and the benchmark compare against.
//
// Layouts: activations NCHW, conv weights [Cout, Cin, k, k], bias length Cout.
// Batch reductions (weight and bias gradients) are summed in sample order so
// results do not depend on the thread count.

#include <span>
#include <vector>

#include "afvae/tensor.hpp"

namespace afvae::kernels {

struct ConvParams {
  int stride = 1;
  int pad = 0;
};

int conv_out_extent(int in, int k, const ConvParams& p);

Tensor conv2d(const Tensor& x, const Tensor& weight,
              std::span<const double> bias, const ConvParams& p);
Tensor conv2d_grad_input(const Tensor& dout, const Tensor& weight,
                         const Shape& input_shape, const ConvParams& p);
Tensor conv2d_grad_weight(const Tensor& x, const Tensor& dout,
                          const Shape& weight_shape, const ConvParams& p);
std::vector<double> conv2d_grad_bias(const Tensor& dout);

/// C*r*r x H x W -> C x rH x rW.
Tensor pixel_shuffle(const Tensor& x, int r);
/// Inverse of pixel_shuffle (space-to-depth).
Tensor pixel_unshuffle(const Tensor& x, int r);

/// 2x2 average pooling, stride 2. H and W must be even.
Tensor avg_pool2(const Tensor& x);
Tensor avg_pool2_grad(const Tensor& dout);

namespace reference {

Tensor conv2d(const Tensor& x, const Tensor& weight,
              std::span<const double> bias, const ConvParams& p);
Tensor conv2d_grad_input(const Tensor& dout, const Tensor& weight,
                         const Shape& input_shape, const ConvParams& p);
Tensor conv2d_grad_weight(const Tensor& x, const Tensor& dout,
                          const Shape& weight_shape, const ConvParams& p);
Tensor pixel_shuffle(const Tensor& x, int r);

}  // namespace reference

}  // namespace afvae::kernels
