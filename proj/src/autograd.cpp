#include "afvae/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "afvae/prior.hpp"

namespace afvae::ag {

void Node::accumulate(const Tensor& g) {
  if (grad.empty()) {
    grad = g;
    return;
  }
  require(grad.numel() == g.numel(), "gradient shape mismatch " + grad.shape().str() + " vs " + g.shape().str());
  double* dst = grad.data();
  const double* src = g.data();
  for (std::size_t i = 0; i < g.numel(); ++i) dst[i] += src[i];
}

void Node::zero_grad() { grad = Tensor(); }

Var constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return n;
}

Var parameter(Tensor value) {
  auto n = constant(std::move(value));
  n->requires_grad = true;
  return n;
}

namespace {

Var make(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = std::any_of(parents.begin(), parents.end(),
                                 [](const Var& p) { return p && p->requires_grad; });
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(fn);
  }
  return n;
}

bool wants(const Var& v) { return v && v->requires_grad; }

Tensor scalar(double v) { return Tensor(Shape{1, 1, 1, 1}, v); }

}  // namespace

void backward(const Var& root) {
  require(root && root->value.numel() == 1, "backward needs a scalar root");
  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p && p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->accumulate(scalar(1.0));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

Var add(const Var& a, const Var& b) {
  require(a->value.shape() == b->value.shape(), "add: shape mismatch " + a->value.shape().str() +
                                                     " vs " + b->value.shape().str());
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
  return make(std::move(out), {a, b}, [a, b](Node& self) {
    if (wants(a)) a->accumulate(self.grad);
    if (wants(b)) b->accumulate(self.grad);
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a->value;
  for (double& v : out.vec()) v *= s;
  return make(std::move(out), {a}, [a, s](Node& self) {
    Tensor g = self.grad;
    for (double& v : g.vec()) v *= s;
    a->accumulate(g);
  });
}

Var weighted_sum(std::span<const Var> terms, std::span<const double> weights) {
  require(terms.size() == weights.size(), "weighted_sum: term/weight count mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    require(terms[i]->value.numel() == 1, "weighted_sum expects scalars");
    total += weights[i] * terms[i]->value[0];
  }
  std::vector<Var> parents(terms.begin(), terms.end());
  std::vector<double> w(weights.begin(), weights.end());
  return make(scalar(total), parents, [parents, w](Node& self) {
    for (std::size_t i = 0; i < parents.size(); ++i)
      if (wants(parents[i])) parents[i]->accumulate(scalar(w[i] * self.grad[0]));
  });
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, const kernels::ConvParams& p) {
  std::span<const double> b;
  if (bias) b = bias->value.span();
  Tensor out = kernels::conv2d(x->value, weight->value, b, p);
  return make(std::move(out), {x, weight, bias}, [x, weight, bias, p](Node& self) {
    if (wants(x)) x->accumulate(kernels::conv2d_grad_input(self.grad, weight->value, x->value.shape(), p));
    if (wants(weight))
      weight->accumulate(kernels::conv2d_grad_weight(x->value, self.grad, weight->value.shape(), p));
    if (wants(bias)) {
      auto db = kernels::conv2d_grad_bias(self.grad);
      bias->accumulate(Tensor(bias->value.shape(), std::move(db)));
    }
  });
}

Var conv_transpose2d(const Var& x, const Var& weight, const Var& bias, const kernels::ConvParams& p) {
  // A transposed conv is the input-gradient of a conv whose weight is
  // [Cout_conv = Cin_t, Cin_conv = Cout_t, k, k], i.e. this weight as stored.
  const Shape& xs = x->value.shape();
  const Shape& ws = weight->value.shape();
  require(xs.c == ws.n, "conv_transpose2d: channel mismatch " + xs.str() + " vs " + ws.str());
  const int k = ws.h;
  const Shape out_shape{xs.n, ws.c, (xs.h - 1) * p.stride - 2 * p.pad + k,
                        (xs.w - 1) * p.stride - 2 * p.pad + k};
  Tensor out = kernels::conv2d_grad_input(x->value, weight->value, out_shape, p);
  if (bias) {
    for (int n = 0; n < out_shape.n; ++n)
      for (int c = 0; c < out_shape.c; ++c) {
        double* o = out.data() + out.index(n, c, 0, 0);
        for (std::size_t i = 0; i < out_shape.plane(); ++i) o[i] += bias->value[c];
      }
  }
  return make(std::move(out), {x, weight, bias}, [x, weight, bias, p](Node& self) {
    if (wants(x)) x->accumulate(kernels::conv2d(self.grad, weight->value, {}, p));
    if (wants(weight))
      weight->accumulate(kernels::conv2d_grad_weight(self.grad, x->value, weight->value.shape(), p));
    if (wants(bias)) {
      auto db = kernels::conv2d_grad_bias(self.grad);
      bias->accumulate(Tensor(bias->value.shape(), std::move(db)));
    }
  });
}

Var weight_norm(const Var& v, const Var& g) {
  const Shape& vs = v->value.shape();
  require(static_cast<int>(g->value.numel()) == vs.n, "weight_norm: need one gain per slice");
  const std::size_t slice = vs.sample();
  std::vector<double> norms(vs.n);
  Tensor w(vs);
  for (int o = 0; o < vs.n; ++o) {
    const double* vp = v->value.data() + o * slice;
    double ss = 0.0;
    for (std::size_t i = 0; i < slice; ++i) ss += vp[i] * vp[i];
    norms[o] = std::sqrt(ss);
    require(norms[o] > 0.0, "weight_norm: zero direction vector");
    const double f = g->value[o] / norms[o];
    double* wp = w.data() + o * slice;
    for (std::size_t i = 0; i < slice; ++i) wp[i] = f * vp[i];
  }
  return make(std::move(w), {v, g}, [v, g, norms, slice](Node& self) {
    const int n = static_cast<int>(norms.size());
    Tensor dv(v->value.shape());
    Tensor dg(g->value.shape());
    for (int o = 0; o < n; ++o) {
      const double* vp = v->value.data() + o * slice;
      const double* gw = self.grad.data() + o * slice;
      double dot = 0.0;  // dL/dw . v/||v||
      for (std::size_t i = 0; i < slice; ++i) dot += gw[i] * vp[i];
      dot /= norms[o];
      dg[o] = dot;
      const double f = g->value[o] / norms[o];
      double* dvp = dv.data() + o * slice;
      for (std::size_t i = 0; i < slice; ++i) dvp[i] = f * (gw[i] - dot * vp[i] / norms[o]);
    }
    if (wants(v)) v->accumulate(dv);
    if (wants(g)) g->accumulate(dg);
  });
}

Var prelu(const Var& x, const Var& slope) {
  const Shape& s = x->value.shape();
  require(static_cast<int>(slope->value.numel()) == s.c, "prelu: one slope per channel");
  Tensor out(s);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const double a = slope->value[c];
      const double* in = x->value.data() + x->value.index(n, c, 0, 0);
      double* o = out.data() + out.index(n, c, 0, 0);
      for (std::size_t i = 0; i < s.plane(); ++i) o[i] = in[i] > 0.0 ? in[i] : a * in[i];
    }
  return make(std::move(out), {x, slope}, [x, slope](Node& self) {
    const Shape& s = x->value.shape();
    Tensor dx(s);
    Tensor ds(slope->value.shape());
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const double a = slope->value[c];
        const std::size_t base = x->value.index(n, c, 0, 0);
        double acc = 0.0;
        for (std::size_t i = 0; i < s.plane(); ++i) {
          const double in = x->value[base + i];
          const double g = self.grad[base + i];
          if (in > 0.0) {
            dx[base + i] = g;
          } else {
            dx[base + i] = a * g;
            acc += in * g;
          }
        }
        ds[c] += acc;
      }
    if (wants(x)) x->accumulate(dx);
    if (wants(slope)) slope->accumulate(ds);
  });
}

Var relu(const Var& x) {
  Tensor out = x->value;
  for (double& v : out.vec()) v = std::max(v, 0.0);
  return make(std::move(out), {x}, [x](Node& self) {
    Tensor dx = self.grad;
    for (std::size_t i = 0; i < dx.numel(); ++i)
      if (x->value[i] <= 0.0) dx[i] = 0.0;
    x->accumulate(dx);
  });
}

Var sigmoid(const Var& x) {
  Tensor out = x->value;
  for (double& v : out.vec()) v = 1.0 / (1.0 + std::exp(-v));
  return make(std::move(out), {x}, [x](Node& self) {
    Tensor dx = self.grad;
    for (std::size_t i = 0; i < dx.numel(); ++i) {
      const double y = self.value[i];
      dx[i] *= y * (1.0 - y);
    }
    x->accumulate(dx);
  });
}

Var avg_pool2(const Var& x) {
  return make(kernels::avg_pool2(x->value), {x},
              [x](Node& self) { x->accumulate(kernels::avg_pool2_grad(self.grad)); });
}

Var pixel_shuffle(const Var& x, int r) {
  return make(kernels::pixel_shuffle(x->value, r), {x},
              [x, r](Node& self) { x->accumulate(kernels::pixel_unshuffle(self.grad, r)); });
}

Var concat_channels(const Var& a, const Var& b) {
  const Shape& sa = a->value.shape();
  const Shape& sb = b->value.shape();
  require(sa.n == sb.n && sa.h == sb.h && sa.w == sb.w,
          "concat_channels: " + sa.str() + " vs " + sb.str());
  Tensor out(Shape{sa.n, sa.c + sb.c, sa.h, sa.w});
  for (int n = 0; n < sa.n; ++n) {
    std::copy_n(a->value.data() + n * sa.sample(), sa.sample(), out.data() + n * out.shape().sample());
    std::copy_n(b->value.data() + n * sb.sample(), sb.sample(),
                out.data() + n * out.shape().sample() + sa.sample());
  }
  return make(std::move(out), {a, b}, [a, b](Node& self) {
    const Shape& sa = a->value.shape();
    const Shape& sb = b->value.shape();
    const std::size_t stride = self.value.shape().sample();
    if (wants(a)) {
      Tensor da(sa);
      for (int n = 0; n < sa.n; ++n)
        std::copy_n(self.grad.data() + n * stride, sa.sample(), da.data() + n * sa.sample());
      a->accumulate(da);
    }
    if (wants(b)) {
      Tensor db(sb);
      for (int n = 0; n < sb.n; ++n)
        std::copy_n(self.grad.data() + n * stride + sa.sample(), sb.sample(), db.data() + n * sb.sample());
      b->accumulate(db);
    }
  });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormStats& stats, bool training) {
  const Shape& s = x->value.shape();
  if (stats.running_mean.empty()) {
    stats.running_mean.assign(s.c, 0.0);
    stats.running_var.assign(s.c, 1.0);
  }
  require(static_cast<int>(stats.running_mean.size()) == s.c, "batch_norm: channel mismatch");
  const double count = static_cast<double>(s.n) * s.plane();
  std::vector<double> mean(s.c), inv_std(s.c);
  for (int c = 0; c < s.c; ++c) {
    if (training) {
      double m = 0.0, v = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const double* p = x->value.data() + x->value.index(n, c, 0, 0);
        for (std::size_t i = 0; i < s.plane(); ++i) m += p[i];
      }
      m /= count;
      for (int n = 0; n < s.n; ++n) {
        const double* p = x->value.data() + x->value.index(n, c, 0, 0);
        for (std::size_t i = 0; i < s.plane(); ++i) v += (p[i] - m) * (p[i] - m);
      }
      v /= count;
      mean[c] = m;
      inv_std[c] = 1.0 / std::sqrt(v + stats.eps);
      const double unbiased = count > 1 ? v * count / (count - 1) : v;
      stats.running_mean[c] = (1 - stats.momentum) * stats.running_mean[c] + stats.momentum * m;
      stats.running_var[c] = (1 - stats.momentum) * stats.running_var[c] + stats.momentum * unbiased;
    } else {
      mean[c] = stats.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(stats.running_var[c] + stats.eps);
    }
  }
  Tensor xhat(s), out(s);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const std::size_t base = x->value.index(n, c, 0, 0);
      for (std::size_t i = 0; i < s.plane(); ++i) {
        xhat[base + i] = (x->value[base + i] - mean[c]) * inv_std[c];
        out[base + i] = gamma->value[c] * xhat[base + i] + beta->value[c];
      }
    }
  return make(std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, inv_std, training, count](Node& self) {
    const Shape& s = x->value.shape();
    Tensor dgamma(gamma->value.shape()), dbeta(beta->value.shape()), dx(s);
    for (int c = 0; c < s.c; ++c) {
      double sg = 0.0, sgx = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const std::size_t base = x->value.index(n, c, 0, 0);
        for (std::size_t i = 0; i < s.plane(); ++i) {
          sg += self.grad[base + i];
          sgx += self.grad[base + i] * xhat[base + i];
        }
      }
      dgamma[c] = sgx;
      dbeta[c] = sg;
      const double gm = gamma->value[c] * inv_std[c];
      for (int n = 0; n < s.n; ++n) {
        const std::size_t base = x->value.index(n, c, 0, 0);
        for (std::size_t i = 0; i < s.plane(); ++i) {
          const double g = self.grad[base + i];
          dx[base + i] = training ? gm * (g - sg / count - xhat[base + i] * sgx / count) : gm * g;
        }
      }
    }
    if (wants(x)) x->accumulate(dx);
    if (wants(gamma)) gamma->accumulate(dgamma);
    if (wants(beta)) beta->accumulate(dbeta);
  });
}

Var l1_mean(const Var& a, const Var& b) {
  require(a->value.shape() == b->value.shape(), "l1_mean: shape mismatch " + a->value.shape().str() +
                                                     " vs " + b->value.shape().str());
  const std::size_t n = a->value.numel();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += std::abs(a->value[i] - b->value[i]);
  return make(scalar(total / static_cast<double>(n)), {a, b}, [a, b, n](Node& self) {
    const double g = self.grad[0] / static_cast<double>(n);
    Tensor da(a->value.shape());
    for (std::size_t i = 0; i < n; ++i) {
      const double d = a->value[i] - b->value[i];
      da[i] = d > 0.0 ? g : (d < 0.0 ? -g : 0.0);
    }
    if (wants(a)) a->accumulate(da);
    if (wants(b)) {
      for (double& v : da.vec()) v = -v;
      b->accumulate(da);
    }
  });
}

Var l2_mean(const Var& a, const Var& b) {
  require(a->value.shape() == b->value.shape(), "l2_mean: shape mismatch");
  const std::size_t n = a->value.numel();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += (a->value[i] - b->value[i]) * (a->value[i] - b->value[i]);
  return make(scalar(total / static_cast<double>(n)), {a, b}, [a, b, n](Node& self) {
    const double g = 2.0 * self.grad[0] / static_cast<double>(n);
    Tensor da(a->value.shape());
    for (std::size_t i = 0; i < n; ++i) da[i] = g * (a->value[i] - b->value[i]);
    if (wants(a)) a->accumulate(da);
    if (wants(b)) {
      for (double& v : da.vec()) v = -v;
      b->accumulate(da);
    }
  });
}

Var reparameterize(const Var& mean, const Var& log_var, const Tensor& noise) {
  require(mean->value.shape() == log_var->value.shape() && noise.shape() == mean->value.shape(),
          "reparameterize: shape mismatch");
  Tensor z(mean->value.shape());
  std::vector<double> sd(z.numel());
  for (std::size_t i = 0; i < z.numel(); ++i) {
    sd[i] = std::exp(0.5 * log_var->value[i]);
    z[i] = mean->value[i] + sd[i] * noise[i];
  }
  return make(std::move(z), {mean, log_var}, [mean, log_var, noise, sd](Node& self) {
    if (wants(mean)) mean->accumulate(self.grad);
    if (wants(log_var)) {
      Tensor d(log_var->value.shape());
      for (std::size_t i = 0; i < d.numel(); ++i) d[i] = self.grad[i] * 0.5 * sd[i] * noise[i];
      log_var->accumulate(d);
    }
  });
}

Var kl_additive(const Var& mean, const Var& log_var, const Tensor& prior_mean,
                std::span<const double> prior_var) {
  const Shape& s = mean->value.shape();
  const int batch = s.n;
  const int dim = static_cast<int>(s.sample());
  require(log_var->value.shape() == s, "kl_additive: mean/log_var shapes differ");
  require(static_cast<int>(prior_mean.numel()) == batch * dim && static_cast<int>(prior_var.size()) == batch,
          "kl_additive: prior does not match the batch");
  Tensor d_mean(s), d_log_var(s);
  double total = 0.0;
  for (int n = 0; n < batch; ++n) {
    const std::size_t off = static_cast<std::size_t>(n) * dim;
    total += prior::kl_additive_raw(mean->value.data() + off, log_var->value.data() + off,
                                    prior_mean.data() + off, prior_var[n], dim, d_mean.data() + off,
                                    d_log_var.data() + off);
  }
  const double inv_batch = 1.0 / batch;
  return make(scalar(total * inv_batch), {mean, log_var},
              [mean, log_var, d_mean, d_log_var, inv_batch](Node& self) {
                const double g = self.grad[0] * inv_batch;
                auto scaled = [g](Tensor t) {
                  for (double& v : t.vec()) v *= g;
                  return t;
                };
                if (wants(mean)) mean->accumulate(scaled(d_mean));
                if (wants(log_var)) log_var->accumulate(scaled(d_log_var));
              });
}

Var kl_mixture_mc(const Var& mean, const Var& log_var, std::span<const Tensor> noise,
                  const Tensor& weights, const Tensor& component_means,
                  std::span<const double> component_scales) {
  const Shape& s = mean->value.shape();
  const int batch = s.n;
  const int dim = static_cast<int>(s.sample());
  const int k = static_cast<int>(component_scales.size());
  require(!noise.empty(), "kl_mixture_mc needs at least one sample");
  require(static_cast<int>(weights.numel()) == batch * k, "kl_mixture_mc: weights must be N x K");
  require(static_cast<int>(component_means.numel()) == k * dim, "kl_mixture_mc: means must be K x d_z");

  prior::MixtureComponents mix;
  mix.means = Eigen::Map<const focal::Features>(component_means.data(), k, dim);
  mix.scales = Eigen::Map<const Eigen::VectorXd>(component_scales.data(), k);

  Tensor d_mean(s), d_log_var(s);
  double total = 0.0;
  const double inv_samples = 1.0 / static_cast<double>(noise.size());
  Eigen::VectorXd dz;
  for (int n = 0; n < batch; ++n) {
    const std::size_t off = static_cast<std::size_t>(n) * dim;
    mix.weights = Eigen::Map<const Eigen::VectorXd>(weights.data() + static_cast<std::size_t>(n) * k, k);
    prior::GaussianPosterior q{Eigen::Map<const Eigen::VectorXd>(mean->value.data() + off, dim),
                               Eigen::Map<const Eigen::VectorXd>(log_var->value.data() + off, dim)};
    const Eigen::ArrayXd sd = (0.5 * q.log_var.array()).exp();
    Eigen::Map<Eigen::VectorXd> dm(d_mean.data() + off, dim);
    Eigen::Map<Eigen::VectorXd> dl(d_log_var.data() + off, dim);
    dl.setConstant(-0.5);  // d/dlog_var of log q(z(eps)) = -1/2 per dimension
    for (const Tensor& eps_t : noise) {
      require(eps_t.shape() == s, "kl_mixture_mc: noise shape mismatch");
      const Eigen::Map<const Eigen::VectorXd> eps(eps_t.data() + off, dim);
      const Eigen::VectorXd z = prior::sample(q, eps);
      total += inv_samples * (prior::log_density(q, z) - prior::log_mixture_density(mix, z, &dz));
      // z = mean + sd * eps; the KL term subtracts log p(z).
      dm -= inv_samples * dz;
      dl.array() -= inv_samples * dz.array() * 0.5 * sd * eps.array();
    }
  }
  const double inv_batch = 1.0 / batch;
  return make(scalar(total * inv_batch), {mean, log_var},
              [mean, log_var, d_mean, d_log_var, inv_batch](Node& self) {
                const double g = self.grad[0] * inv_batch;
                auto scaled = [g](Tensor t) {
                  for (double& v : t.vec()) v *= g;
                  return t;
                };
                if (wants(mean)) mean->accumulate(scaled(d_mean));
                if (wants(log_var)) log_var->accumulate(scaled(d_log_var));
              });
}

}  // namespace afvae::ag
