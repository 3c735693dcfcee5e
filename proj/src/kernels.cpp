#include "afvae/kernels.hpp"

#include <Eigen/Core>
#include <omp.h>

#include <algorithm>
#include <cstring>

namespace afvae::kernels {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

struct Geometry {
  int cin, h, w, k, ho, wo, stride, pad;
  int rows() const { return cin * k * k; }
  int cols() const { return ho * wo; }
};

// cols is [Cin*k*k, Ho*Wo] row-major.
void im2col(const double* x, const Geometry& g, double* cols) {
  for (int c = 0; c < g.cin; ++c) {
    const double* xc = x + static_cast<std::size_t>(c) * g.h * g.w;
    for (int kh = 0; kh < g.k; ++kh) {
      for (int kw = 0; kw < g.k; ++kw) {
        double* row = cols + static_cast<std::size_t>((c * g.k + kh) * g.k + kw) * g.cols();
        for (int oh = 0; oh < g.ho; ++oh) {
          const int ih = oh * g.stride - g.pad + kh;
          double* out = row + static_cast<std::size_t>(oh) * g.wo;
          if (ih < 0 || ih >= g.h) {
            std::fill(out, out + g.wo, 0.0);
            continue;
          }
          const double* xr = xc + static_cast<std::size_t>(ih) * g.w;
          for (int ow = 0; ow < g.wo; ++ow) {
            const int iw = ow * g.stride - g.pad + kw;
            out[ow] = (iw >= 0 && iw < g.w) ? xr[iw] : 0.0;
          }
        }
      }
    }
  }
}

// Accumulates cols back into an image; dx must be zeroed by the caller.
void col2im(const double* cols, const Geometry& g, double* dx) {
  for (int c = 0; c < g.cin; ++c) {
    double* dc = dx + static_cast<std::size_t>(c) * g.h * g.w;
    for (int kh = 0; kh < g.k; ++kh) {
      for (int kw = 0; kw < g.k; ++kw) {
        const double* row = cols + static_cast<std::size_t>((c * g.k + kh) * g.k + kw) * g.cols();
        for (int oh = 0; oh < g.ho; ++oh) {
          const int ih = oh * g.stride - g.pad + kh;
          if (ih < 0 || ih >= g.h) continue;
          double* dr = dc + static_cast<std::size_t>(ih) * g.w;
          const double* in = row + static_cast<std::size_t>(oh) * g.wo;
          for (int ow = 0; ow < g.wo; ++ow) {
            const int iw = ow * g.stride - g.pad + kw;
            if (iw >= 0 && iw < g.w) dr[iw] += in[ow];
          }
        }
      }
    }
  }
}

bool is_pointwise(const Geometry& g) {
  return g.k == 1 && g.stride == 1 && g.pad == 0;
}

Geometry make_geometry(const Shape& in, const Shape& weight, const ConvParams& p) {
  require(weight.h == weight.w, "conv kernel must be square");
  require(in.c == weight.c, "conv channel mismatch: input " + in.str() +
                                " weight " + weight.str());
  Geometry g{in.c, in.h, in.w, weight.h, 0, 0, p.stride, p.pad};
  g.ho = conv_out_extent(in.h, g.k, p);
  g.wo = conv_out_extent(in.w, g.k, p);
  require(g.ho > 0 && g.wo > 0, "conv output would be empty for input " + in.str());
  return g;
}

}  // namespace

int conv_out_extent(int in, int k, const ConvParams& p) {
  require(p.stride >= 1 && p.pad >= 0, "invalid conv stride/pad");
  return (in + 2 * p.pad - k) / p.stride + 1;
}

Tensor conv2d(const Tensor& x, const Tensor& weight,
              std::span<const double> bias, const ConvParams& p) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  const Geometry g = make_geometry(xs, ws, p);
  require(bias.empty() || static_cast<int>(bias.size()) == ws.n, "conv bias length");
  const int cout = ws.n;
  Tensor out(Shape{xs.n, cout, g.ho, g.wo});
  const ConstMap wmat(weight.data(), cout, g.rows());
  const bool pointwise = is_pointwise(g);

#pragma omp parallel
  {
    std::vector<double> cols(pointwise ? 0 : static_cast<std::size_t>(g.rows()) * g.cols());
#pragma omp for schedule(static)
    for (int n = 0; n < xs.n; ++n) {
      const double* xn = x.data() + n * xs.sample();
      const double* src = xn;
      if (!pointwise) {
        im2col(xn, g, cols.data());
        src = cols.data();
      }
      MutMap o(out.data() + n * out.shape().sample(), cout, g.cols());
      o.noalias() = wmat * ConstMap(src, g.rows(), g.cols());
      if (!bias.empty()) {
        for (int c = 0; c < cout; ++c) o.row(c).array() += bias[c];
      }
    }
  }
  return out;
}

Tensor conv2d_grad_input(const Tensor& dout, const Tensor& weight,
                         const Shape& input_shape, const ConvParams& p) {
  const Shape& ws = weight.shape();
  const Geometry g = make_geometry(input_shape, ws, p);
  require(dout.shape() == (Shape{input_shape.n, ws.n, g.ho, g.wo}),
          "conv2d_grad_input: dout shape " + dout.shape().str());
  Tensor dx(input_shape);
  const ConstMap wmat(weight.data(), ws.n, g.rows());
  const bool pointwise = is_pointwise(g);

#pragma omp parallel
  {
    std::vector<double> cols(pointwise ? 0 : static_cast<std::size_t>(g.rows()) * g.cols());
#pragma omp for schedule(static)
    for (int n = 0; n < input_shape.n; ++n) {
      const ConstMap d(dout.data() + n * dout.shape().sample(), ws.n, g.cols());
      double* dxn = dx.data() + n * input_shape.sample();
      if (pointwise) {
        MutMap(dxn, g.rows(), g.cols()).noalias() = wmat.transpose() * d;
      } else {
        MutMap(cols.data(), g.rows(), g.cols()).noalias() = wmat.transpose() * d;
        col2im(cols.data(), g, dxn);
      }
    }
  }
  return dx;
}

Tensor conv2d_grad_weight(const Tensor& x, const Tensor& dout,
                          const Shape& weight_shape, const ConvParams& p) {
  const Shape& xs = x.shape();
  const Geometry g = make_geometry(xs, weight_shape, p);
  require(dout.shape() == (Shape{xs.n, weight_shape.n, g.ho, g.wo}),
          "conv2d_grad_weight: dout shape " + dout.shape().str());
  const std::size_t wsize = weight_shape.numel();
  std::vector<double> per_sample(wsize * xs.n);
  const bool pointwise = is_pointwise(g);

#pragma omp parallel
  {
    std::vector<double> cols(pointwise ? 0 : static_cast<std::size_t>(g.rows()) * g.cols());
#pragma omp for schedule(static)
    for (int n = 0; n < xs.n; ++n) {
      const double* xn = x.data() + n * xs.sample();
      const double* src = xn;
      if (!pointwise) {
        im2col(xn, g, cols.data());
        src = cols.data();
      }
      const ConstMap d(dout.data() + n * dout.shape().sample(), weight_shape.n, g.cols());
      MutMap(per_sample.data() + n * wsize, weight_shape.n, g.rows()).noalias() =
          d * ConstMap(src, g.rows(), g.cols()).transpose();
    }
  }

  Tensor dw(weight_shape);
  for (int n = 0; n < xs.n; ++n) {
    const double* src = per_sample.data() + n * wsize;
    double* dst = dw.data();
#pragma omp simd
    for (std::size_t i = 0; i < wsize; ++i) dst[i] += src[i];
  }
  return dw;
}

std::vector<double> conv2d_grad_bias(const Tensor& dout) {
  const Shape& s = dout.shape();
  std::vector<double> db(s.c, 0.0);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const double* p = dout.data() + dout.index(n, c, 0, 0);
      double acc = 0.0;
      for (std::size_t i = 0; i < s.plane(); ++i) acc += p[i];
      db[c] += acc;
    }
  }
  return db;
}

Tensor pixel_shuffle(const Tensor& x, int r) {
  const Shape& s = x.shape();
  require(r >= 1, "pixel_shuffle factor must be >= 1");
  require(s.c % (r * r) == 0, "pixel_shuffle: channels " + std::to_string(s.c) +
                                  " not divisible by r^2 = " + std::to_string(r * r));
  const int oc = s.c / (r * r);
  Tensor out(Shape{s.n, oc, s.h * r, s.w * r});
  const int total = s.n * oc;
#pragma omp parallel for schedule(static)
  for (int nc = 0; nc < total; ++nc) {
    const int n = nc / oc;
    const int c = nc % oc;
    for (int oh = 0; oh < s.h * r; ++oh) {
      for (int ow = 0; ow < s.w * r; ++ow) {
        const int src_c = c * r * r + (oh % r) * r + (ow % r);
        out.at(n, c, oh, ow) = x.at(n, src_c, oh / r, ow / r);
      }
    }
  }
  return out;
}

Tensor pixel_unshuffle(const Tensor& x, int r) {
  const Shape& s = x.shape();
  require(r >= 1, "pixel_unshuffle factor must be >= 1");
  require(s.h % r == 0 && s.w % r == 0, "pixel_unshuffle: spatial size not divisible by r");
  const int oc = s.c * r * r;
  Tensor out(Shape{s.n, oc, s.h / r, s.w / r});
  const int total = s.n * s.c;
#pragma omp parallel for schedule(static)
  for (int nc = 0; nc < total; ++nc) {
    const int n = nc / s.c;
    const int c = nc % s.c;
    for (int h = 0; h < s.h; ++h) {
      for (int w = 0; w < s.w; ++w) {
        out.at(n, c * r * r + (h % r) * r + (w % r), h / r, w / r) = x.at(n, c, h, w);
      }
    }
  }
  return out;
}

Tensor avg_pool2(const Tensor& x) {
  const Shape& s = x.shape();
  require(s.h % 2 == 0 && s.w % 2 == 0, "avg_pool2 needs even spatial size, got " + s.str());
  Tensor out(Shape{s.n, s.c, s.h / 2, s.w / 2});
  const int total = s.n * s.c;
#pragma omp parallel for schedule(static)
  for (int nc = 0; nc < total; ++nc) {
    const double* in = x.data() + nc * s.plane();
    double* o = out.data() + nc * out.shape().plane();
    for (int h = 0; h < s.h / 2; ++h) {
      const double* r0 = in + 2 * h * s.w;
      const double* r1 = r0 + s.w;
      for (int w = 0; w < s.w / 2; ++w) {
        o[h * (s.w / 2) + w] = 0.25 * (r0[2 * w] + r0[2 * w + 1] + r1[2 * w] + r1[2 * w + 1]);
      }
    }
  }
  return out;
}

Tensor avg_pool2_grad(const Tensor& dout) {
  const Shape& s = dout.shape();
  Tensor dx(Shape{s.n, s.c, s.h * 2, s.w * 2});
  const int total = s.n * s.c;
  const int W = s.w * 2;
#pragma omp parallel for schedule(static)
  for (int nc = 0; nc < total; ++nc) {
    const double* d = dout.data() + nc * s.plane();
    double* o = dx.data() + nc * dx.shape().plane();
    for (int h = 0; h < s.h; ++h) {
      for (int w = 0; w < s.w; ++w) {
        const double v = 0.25 * d[h * s.w + w];
        o[2 * h * W + 2 * w] = v;
        o[2 * h * W + 2 * w + 1] = v;
        o[(2 * h + 1) * W + 2 * w] = v;
        o[(2 * h + 1) * W + 2 * w + 1] = v;
      }
    }
  }
  return dx;
}

}  // namespace afvae::kernels
