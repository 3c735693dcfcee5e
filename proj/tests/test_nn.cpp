#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include <map>

#include "afvae/nn.hpp"
#include "test_util.hpp"

using namespace afvae;
using namespace afvae::nn;
using afvae::testing::max_abs_diff;
using afvae::testing::random_tensor;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.input_size = 16;
  c.channels = {4, 6};
  c.latent_channels = 3;
  c.init_seed = 5;
  return c;
}

std::map<std::string, Shape> param_shapes(const AfVae& m) {
  std::map<std::string, Shape> out;
  for (const auto& p : m.parameters()) out[p.name] = p.var->value.shape();
  return out;
}

struct Outputs {
  Tensor mean, log_var, y, image;
  std::vector<Tensor> skips;
};

Outputs run(AfVae& m, const Tensor& x, const Tensor& b) {
  Outputs o;
  const auto q = m.encode_appearance(ag::constant(x));
  const auto s = m.encode_structure(ag::constant(b));
  o.mean = q.mean->value;
  o.log_var = q.log_var->value;
  o.y = s.y->value;
  for (const auto& k : s.skips) o.skips.push_back(k->value);
  o.image = m.decode(q.mean, s)->value;
  return o;
}

Tensor slice(const Tensor& t, int n) {
  Shape s = t.shape();
  s.n = 1;
  Tensor out(s);
  std::copy(t.data() + n * s.sample(), t.data() + (n + 1) * s.sample(), out.data());
  return out;
}

}  // namespace

TEST(Model, FullScaleShapes) {
  const ModelConfig cfg = ModelConfig::full();
  ASSERT_EQ(cfg.input_size, 256);
  AfVae m(cfg);
  m.set_training(false);
  std::mt19937_64 rng(1);
  const Tensor x = random_tensor({1, 3, 256, 256}, rng, 0, 1);
  const Tensor b = random_tensor({1, 1, 256, 256}, rng, 0, 1);
  const auto q = m.encode_appearance(ag::constant(x));
  EXPECT_EQ(q.mean->value.shape(), (Shape{1, 512, 4, 4}));
  EXPECT_EQ(q.log_var->value.shape(), (Shape{1, 512, 4, 4}));
  const auto s = m.encode_structure(ag::constant(b));
  EXPECT_EQ(s.y->value.shape(), (Shape{1, 512, 4, 4}));
  ASSERT_EQ(s.skips.size(), 5u);
  const Shape expect_skips[] = {{1, 64, 128, 128}, {1, 128, 64, 64}, {1, 256, 32, 32}, {1, 512, 16, 16}, {1, 512, 8, 8}};
  for (int i = 0; i < 5; ++i) EXPECT_EQ(s.skips[i]->value.shape(), expect_skips[i]) << i;
  const auto img = m.decode(q.mean, s);
  EXPECT_EQ(img->value.shape(), (Shape{1, 3, 256, 256}));

  // decoder conv rows: in channels after concatenation, out channels before pixel shuffle
  const auto shapes = param_shapes(m);
  const int outs[] = {2048, 2048, 1024, 512, 256, 12};
  const int ins[] = {1024, 1024, 1024, 512, 256, 128};
  for (int t = 0; t < 6; ++t) {
    const auto& s = shapes.at("decoder.level" + std::to_string(t) + ".conv.v");
    EXPECT_EQ(s.n, outs[t]) << t;
    EXPECT_EQ(s.c, ins[t]) << t;
  }
}

TEST(Model, DeskScaleShapes) {
  AfVae m(ModelConfig::desk());
  EXPECT_EQ(m.config().latent_dim(), 4096);
  std::mt19937_64 rng(2);
  const auto o = run(m, random_tensor({2, 3, 64, 64}, rng, 0, 1), random_tensor({2, 1, 64, 64}, rng, 0, 1));
  EXPECT_EQ(o.mean.shape(), (Shape{2, 256, 4, 4}));
  EXPECT_EQ(o.y.shape(), (Shape{2, 256, 4, 4}));
  EXPECT_EQ(o.image.shape(), (Shape{2, 3, 64, 64}));
  for (double v : o.image.vec()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Model, BatchedForwardMatchesLoop) {
  AfVae m(tiny());
  m.set_training(false);
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({3, 3, 16, 16}, rng, 0, 1);
  const Tensor b = random_tensor({3, 1, 16, 16}, rng, 0, 1);
  const auto all = run(m, x, b);
  for (int n = 0; n < 3; ++n) {
    const auto one = run(m, slice(x, n), slice(b, n));
    EXPECT_LT(max_abs_diff(slice(all.mean, n), one.mean), 1e-5);
    EXPECT_LT(max_abs_diff(slice(all.log_var, n), one.log_var), 1e-5);
    EXPECT_LT(max_abs_diff(slice(all.y, n), one.y), 1e-5);
    EXPECT_LT(max_abs_diff(slice(all.image, n), one.image), 1e-5);
  }
}

TEST(Model, ZeroInputsStayFinite) {
  AfVae m(ModelConfig::desk());
  const auto s = m.encode_structure(ag::constant(Tensor(Shape{1, 1, 64, 64})));
  for (double v : s.y->value.vec()) ASSERT_TRUE(std::isfinite(v));
  const auto img = m.decode(ag::constant(Tensor(Shape{1, 256, 4, 4})), s);
  for (double v : img->value.vec()) ASSERT_TRUE(std::isfinite(v));
}

TEST(Model, ForwardIsDeterministic) {
  std::mt19937_64 rng(4);
  const Tensor x = random_tensor({2, 3, 16, 16}, rng, 0, 1);
  const Tensor b = random_tensor({2, 1, 16, 16}, rng, 0, 1);
  AfVae a(tiny()), c(tiny());
  const auto oa = run(a, x, b), ob = run(a, x, b), oc = run(c, x, b);
  EXPECT_EQ(oa.image.vec(), ob.image.vec());
  EXPECT_EQ(oa.image.vec(), oc.image.vec());
  EXPECT_EQ(oa.skips.size(), oc.skips.size());
}

TEST(WeightNorm, DirectionScaleInvariance) {
  Registry reg;
  Conv conv(reg, "c", 2, 3, 3, 1, 1, true, false, 7);
  std::mt19937_64 rng(5);
  const auto x = ag::constant(random_tensor({1, 2, 5, 5}, rng));
  const Tensor before = conv.forward(x)->value;
  for (double& v : conv.direction()->value.vec()) v *= 3.7;
  EXPECT_LT(max_abs_diff(conv.forward(x)->value, before), 1e-12);
}

TEST(WeightNorm, ZeroGainLeavesBias) {
  Registry reg;
  Conv conv(reg, "c", 2, 3, 3, 1, 1, true, false, 7);
  for (double& g : conv.gain()->value.vec()) g = 0.0;
  conv.bias()->value.vec() = {0.1, -0.2, 0.3};
  std::mt19937_64 rng(6);
  const Tensor y = conv.forward(ag::constant(random_tensor({2, 2, 4, 4}, rng)))->value;
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      for (int h = 0; h < 4; ++h)
        for (int w = 0; w < 4; ++w) EXPECT_DOUBLE_EQ(y.at(n, c, h, w), conv.bias()->value[c]);
}

TEST(WeightNorm, OneByOneHandComputation) {
  Registry reg;
  Conv conv(reg, "c", 2, 1, 1, 1, 0, true, false, 7);
  conv.direction()->value.vec() = {3.0, 4.0};  // ||v|| = 5
  conv.gain()->value.vec() = {2.0};            // w = (1.2, 1.6)
  conv.bias()->value.vec() = {0.5};
  const Tensor x(Shape{1, 2, 2, 2}, {1, 2, 3, 4, 10, 20, 30, 40});
  const Tensor y = conv.forward(ag::constant(x))->value;
  const double expect[] = {1.2 * 1 + 1.6 * 10 + 0.5, 1.2 * 2 + 1.6 * 20 + 0.5, 1.2 * 3 + 1.6 * 30 + 0.5,
                           1.2 * 4 + 1.6 * 40 + 0.5};
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(y[i], expect[i], 1e-12);
}

TEST(WeightNorm, EffectiveNormEqualsGainAtInit) {
  Registry reg;
  Conv conv(reg, "c", 5, 4, 3, 1, 1, true, false, 9);
  const Tensor w = conv.effective_weight()->value;
  const std::size_t per = w.shape().sample();
  for (int o = 0; o < 4; ++o) {
    double ss = 0.0;
    for (std::size_t i = 0; i < per; ++i) ss += w[o * per + i] * w[o * per + i];
    EXPECT_NEAR(std::sqrt(ss), std::abs(conv.gain()->value[o]), 1e-5);
  }
}

TEST(Model, GradientsMatchFiniteDifferences) {
  ModelConfig cfg = tiny();
  AfVae m(cfg);
  m.set_training(false);
  std::mt19937_64 rng(7);
  const Tensor x = random_tensor({2, 3, 16, 16}, rng, 0, 1);
  const Tensor b = random_tensor({2, 1, 16, 16}, rng, 0, 1);
  const Tensor noise = random_tensor({2, 3, 4, 4}, rng);
  auto loss = [&] {
    const auto q = m.encode_appearance(ag::constant(x));
    const auto z = ag::reparameterize(q.mean, q.log_var, noise);
    const auto out = m.decode(z, m.encode_structure(ag::constant(b)));
    return ag::l1_mean(out, ag::constant(x));
  };
  std::vector<ag::Var> probes;
  int v = 0, g = 0, bias = 0, slope = 0;
  for (const auto& p : m.parameters()) {
    const auto& n = p.name;
    auto ends = [&](const std::string& s) { return n.size() >= s.size() && n.compare(n.size() - s.size(), s.size(), s) == 0; };
    if (ends(".v")) ++v;
    else if (ends(".g")) ++g;
    else if (ends(".b")) ++bias;
    else if (ends(".slope")) ++slope;
    else continue;
    probes.push_back(p.var);
  }
  ASSERT_GT(v, 0);
  ASSERT_GT(g, 0);
  ASSERT_GT(bias, 0);
  ASSERT_GT(slope, 0);
  const auto r = afvae::testing::grad_check(probes, loss, 1, rng);
  EXPECT_GE(r.probes, 20);
  EXPECT_LT(r.max_rel_err, 1e-3);
}

TEST(Model, NormSwitchKeepsActivationShapes) {
  std::mt19937_64 rng(8);
  const Tensor x = random_tensor({2, 3, 16, 16}, rng, 0, 1);
  const Tensor b = random_tensor({2, 1, 16, 16}, rng, 0, 1);
  ModelConfig base = tiny();
  AfVae wn(base);
  const auto ref = run(wn, x, b);
  for (Norm n : {Norm::batch_norm, Norm::none}) {
    ModelConfig c = base;
    c.norm = n;
    AfVae m(c);
    const auto o = run(m, x, b);
    EXPECT_EQ(o.mean.shape(), ref.mean.shape());
    EXPECT_EQ(o.y.shape(), ref.y.shape());
    EXPECT_EQ(o.image.shape(), ref.image.shape());
    ASSERT_EQ(o.skips.size(), ref.skips.size());
    for (std::size_t i = 0; i < o.skips.size(); ++i) EXPECT_EQ(o.skips[i].shape(), ref.skips[i].shape());
  }
}

TEST(Model, AblationSwitchesTouchOnlyTheirComponent) {
  const auto base = param_shapes(AfVae(tiny()));

  ModelConfig plain = tiny();
  plain.norm = Norm::none;
  for (const auto& [name, shape] : param_shapes(AfVae(plain))) {
    ASSERT_FALSE(name.ends_with(".g")) << name;
    if (name.ends_with(".w")) {
      const auto v = name.substr(0, name.size() - 2) + ".v";
      ASSERT_TRUE(base.count(v)) << name;
      EXPECT_EQ(base.at(v), shape);
    } else {
      ASSERT_TRUE(base.count(name)) << name;
      EXPECT_EQ(base.at(name), shape);
    }
  }

  ModelConfig deconv = tiny();
  deconv.upsample = Upsample::transposed;
  const auto d = param_shapes(AfVae(deconv));
  for (const auto& [name, shape] : d) {
    if (name.starts_with("decoder.")) continue;
    ASSERT_TRUE(base.count(name)) << name;
    EXPECT_EQ(base.at(name), shape) << name;
  }
  for (const auto& [name, shape] : base)
    if (!name.starts_with("decoder.")) EXPECT_TRUE(d.count(name)) << name;
  EXPECT_TRUE(d.count("decoder.level0.deconv.v"));
  EXPECT_FALSE(d.count("decoder.level0.conv.v"));
}

TEST(Model, MissingSkipAndWrongSizesThrow) {
  AfVae m(tiny());
  std::mt19937_64 rng(9);
  auto s = m.encode_structure(ag::constant(random_tensor({1, 1, 16, 16}, rng)));
  const auto z = ag::constant(random_tensor({1, 3, 4, 4}, rng));
  auto broken = s;
  broken.skips.pop_back();
  EXPECT_THROW(m.decode(z, broken), std::invalid_argument);
  broken = s;
  broken.skips[0] = nullptr;
  EXPECT_THROW(m.decode(z, broken), std::invalid_argument);
  EXPECT_THROW(m.encode_appearance(ag::constant(Tensor(Shape{1, 3, 32, 32}))), std::invalid_argument);
  EXPECT_THROW(m.encode_structure(ag::constant(Tensor(Shape{1, 1, 8, 8}))), std::invalid_argument);
  EXPECT_THROW(m.decode(ag::constant(Tensor(Shape{1, 5, 4, 4})), s), std::invalid_argument);
}

TEST(ModelConfig, ValidationAndJsonRoundTrip) {
  ModelConfig c = tiny();
  c.input_size = 18;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_THROW(AfVae{c}, std::invalid_argument);
  ModelConfig d = ModelConfig::desk();
  d.norm = Norm::batch_norm;
  d.upsample = Upsample::transposed;
  d.fusion_levels = 2;
  const auto back = model_config_from_json(to_json(d));
  EXPECT_EQ(to_json(back), to_json(d));
  EXPECT_EQ(back.fused_levels(), 2);
  EXPECT_EQ(ModelConfig::desk().fused_levels(), 3);
}

TEST(Model, AppearanceBoundaryFlagAddsInputChannels) {
  ModelConfig c = tiny();
  c.appearance_uses_boundary = true;
  AfVae m(c);
  std::mt19937_64 rng(10);
  const auto x = ag::constant(random_tensor({1, 3, 16, 16}, rng));
  EXPECT_THROW(m.encode_appearance(x), std::invalid_argument);
  const auto q = m.encode_appearance(x, ag::constant(random_tensor({1, 1, 16, 16}, rng)));
  EXPECT_EQ(q.mean->value.shape(), (Shape{1, 3, 4, 4}));
}

TEST(ConvStack, JsonRoundTripPreservesFeatures) {
  const ConvStack s = ConvStack::random(3, 3, {4, 5});
  const ConvStack t = conv_stack_from_json(to_json(s));
  std::mt19937_64 rng(11);
  const auto x = ag::constant(random_tensor({1, 3, 8, 8}, rng));
  const auto a = s.forward(x), b = t.forward(x);
  ASSERT_EQ(a.size(), 2u);
  EXPECT_EQ(a[1]->value.shape(), (Shape{1, 5, 4, 4}));
  for (int i = 0; i < 2; ++i) EXPECT_EQ(a[i]->value.vec(), b[i]->value.vec());
}
