#include "afvae/kernels.hpp"

namespace afvae::kernels::reference {

namespace {

struct Extents {
  int ho, wo, k;
};

Extents extents(const Shape& in, const Shape& ws, const ConvParams& p) {
  require(in.c == ws.c && ws.h == ws.w, "reference conv shape mismatch");
  return {conv_out_extent(in.h, ws.h, p), conv_out_extent(in.w, ws.w, p), ws.h};
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight,
              std::span<const double> bias, const ConvParams& p) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  const auto [ho, wo, k] = extents(xs, ws, p);
  Tensor out(Shape{xs.n, ws.n, ho, wo});
  for (int n = 0; n < xs.n; ++n)
    for (int co = 0; co < ws.n; ++co)
      for (int oh = 0; oh < ho; ++oh)
        for (int ow = 0; ow < wo; ++ow) {
          double acc = bias.empty() ? 0.0 : bias[co];
          for (int ci = 0; ci < xs.c; ++ci)
            for (int kh = 0; kh < k; ++kh)
              for (int kw = 0; kw < k; ++kw) {
                const int ih = oh * p.stride - p.pad + kh;
                const int iw = ow * p.stride - p.pad + kw;
                if (ih < 0 || ih >= xs.h || iw < 0 || iw >= xs.w) continue;
                acc += weight.at(co, ci, kh, kw) * x.at(n, ci, ih, iw);
              }
          out.at(n, co, oh, ow) = acc;
        }
  return out;
}

Tensor conv2d_grad_input(const Tensor& dout, const Tensor& weight,
                         const Shape& input_shape, const ConvParams& p) {
  const Shape& ws = weight.shape();
  const auto [ho, wo, k] = extents(input_shape, ws, p);
  Tensor dx(input_shape);
  for (int n = 0; n < input_shape.n; ++n)
    for (int co = 0; co < ws.n; ++co)
      for (int oh = 0; oh < ho; ++oh)
        for (int ow = 0; ow < wo; ++ow) {
          const double d = dout.at(n, co, oh, ow);
          for (int ci = 0; ci < input_shape.c; ++ci)
            for (int kh = 0; kh < k; ++kh)
              for (int kw = 0; kw < k; ++kw) {
                const int ih = oh * p.stride - p.pad + kh;
                const int iw = ow * p.stride - p.pad + kw;
                if (ih < 0 || ih >= input_shape.h || iw < 0 || iw >= input_shape.w) continue;
                dx.at(n, ci, ih, iw) += weight.at(co, ci, kh, kw) * d;
              }
        }
  return dx;
}

Tensor conv2d_grad_weight(const Tensor& x, const Tensor& dout,
                          const Shape& weight_shape, const ConvParams& p) {
  const Shape& xs = x.shape();
  const auto [ho, wo, k] = extents(xs, weight_shape, p);
  Tensor dw(weight_shape);
  for (int n = 0; n < xs.n; ++n)
    for (int co = 0; co < weight_shape.n; ++co)
      for (int oh = 0; oh < ho; ++oh)
        for (int ow = 0; ow < wo; ++ow) {
          const double d = dout.at(n, co, oh, ow);
          for (int ci = 0; ci < xs.c; ++ci)
            for (int kh = 0; kh < k; ++kh)
              for (int kw = 0; kw < k; ++kw) {
                const int ih = oh * p.stride - p.pad + kh;
                const int iw = ow * p.stride - p.pad + kw;
                if (ih < 0 || ih >= xs.h || iw < 0 || iw >= xs.w) continue;
                dw.at(co, ci, kh, kw) += d * x.at(n, ci, ih, iw);
              }
        }
  return dw;
}

Tensor pixel_shuffle(const Tensor& x, int r) {
  const Shape& s = x.shape();
  require(r >= 1 && s.c % (r * r) == 0, "reference pixel_shuffle: bad channel count");
  const int oc = s.c / (r * r);
  Tensor out(Shape{s.n, oc, s.h * r, s.w * r});
  // Walk the input and scatter: input (n, ci, h, w) with ci = c*r*r + i*r + j
  // lands at output (n, c, h*r + i, w*r + j).
  for (int n = 0; n < s.n; ++n)
    for (int ci = 0; ci < s.c; ++ci)
      for (int h = 0; h < s.h; ++h)
        for (int w = 0; w < s.w; ++w) {
          const int c = ci / (r * r);
          const int i = (ci % (r * r)) / r;
          const int j = ci % r;
          out.at(n, c, h * r + i, w * r + j) = x.at(n, ci, h, w);
        }
  return out;
}

}  // namespace afvae::kernels::reference
