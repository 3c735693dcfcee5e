#include "afvae/nn.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "afvae/rng.hpp"

namespace afvae::nn {

std::string to_string(Norm n) {
  switch (n) {
    case Norm::weight_norm: return "wn";
    case Norm::batch_norm: return "bn";
    case Norm::none: return "none";
  }
  return "?";
}

std::string to_string(Upsample u) {
  return u == Upsample::pixel_shuffle ? "pixel-shuffle" : "transposed";
}

std::string to_string(BlockKind b) { return b == BlockKind::residual ? "residual" : "plain"; }

namespace {

Norm parse_norm(const std::string& s) {
  if (s == "wn") return Norm::weight_norm;
  if (s == "bn") return Norm::batch_norm;
  if (s == "none") return Norm::none;
  throw std::invalid_argument("unknown norm '" + s + "'");
}

Upsample parse_upsample(const std::string& s) {
  if (s == "pixel-shuffle") return Upsample::pixel_shuffle;
  if (s == "transposed") return Upsample::transposed;
  throw std::invalid_argument("unknown upsample '" + s + "'");
}

BlockKind parse_block(const std::string& s) {
  if (s == "residual") return BlockKind::residual;
  if (s == "plain") return BlockKind::plain;
  throw std::invalid_argument("unknown block kind '" + s + "'");
}

Tensor he_normal(Shape shape, double fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / fan_in));
  Tensor t(shape);
  for (double& v : t.vec()) v = normal(rng);
  return t;
}

}  // namespace

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::full() {
  ModelConfig c;
  c.input_size = 256;
  c.channels = {64, 128, 256, 512, 512, 512};
  c.latent_channels = 512;
  return c;
}

int ModelConfig::fused_levels() const {
  const int max_levels = levels() - 1;
  return fusion_levels < 0 ? max_levels : std::min(fusion_levels, max_levels);
}

void ModelConfig::validate() const {
  require(levels() >= 1, "model needs at least one downsampling level");
  require(input_size > 0 && input_size % (1 << levels()) == 0,
          "input_size " + std::to_string(input_size) + " is not divisible by 2^" +
              std::to_string(levels()));
  require(image_channels >= 1 && boundary_channels >= 1 && latent_channels >= 1,
          "channel counts must be positive");
  for (int c : channels) require(c >= 1, "level channels must be positive");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"input_size", c.input_size},
          {"image_channels", c.image_channels},
          {"boundary_channels", c.boundary_channels},
          {"channels", c.channels},
          {"latent_channels", c.latent_channels},
          {"norm", to_string(c.norm)},
          {"upsample", to_string(c.upsample)},
          {"block", to_string(c.block)},
          {"appearance_uses_boundary", c.appearance_uses_boundary},
          {"fusion_levels", c.fusion_levels},
          {"init_seed", c.init_seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.input_size = j.value("input_size", c.input_size);
  c.image_channels = j.value("image_channels", c.image_channels);
  c.boundary_channels = j.value("boundary_channels", c.boundary_channels);
  c.channels = j.value("channels", c.channels);
  c.latent_channels = j.value("latent_channels", c.latent_channels);
  c.norm = parse_norm(j.value("norm", to_string(c.norm)));
  c.upsample = parse_upsample(j.value("upsample", to_string(c.upsample)));
  c.block = parse_block(j.value("block", to_string(c.block)));
  c.appearance_uses_boundary = j.value("appearance_uses_boundary", c.appearance_uses_boundary);
  c.fusion_levels = j.value("fusion_levels", c.fusion_levels);
  c.init_seed = j.value("init_seed", c.init_seed);
  c.validate();
  return c;
}

ag::Var Registry::add(const std::string& name, Tensor value) {
  for (const auto& p : params_) require(p.name != name, "duplicate parameter name " + name);
  auto v = ag::parameter(std::move(value));
  params_.push_back({name, v});
  return v;
}

void Registry::add_buffer(const std::string& name, std::vector<double>* values) {
  buffers_.push_back({name, values});
}

Conv::Conv(Registry& reg, const std::string& name, int in, int out, int kernel, int stride, int pad,
           bool weight_norm, bool transposed, std::uint64_t seed, double init_scale)
    : params_{stride, pad}, transposed_(transposed) {
  const Shape shape = transposed ? Shape{in, out, kernel, kernel} : Shape{out, in, kernel, kernel};
  const double fan_in = transposed ? static_cast<double>(in) * kernel * kernel / (stride * stride)
                                   : static_cast<double>(in) * kernel * kernel;
  // Each layer draws from its own stream keyed by name, so swapping one
  // layer's type leaves every other layer's initial weights unchanged.
  std::mt19937_64 rng(derive_seed(seed, name));
  Tensor w = he_normal(shape, fan_in, rng);
  for (double& v : w.vec()) v *= init_scale;
  if (weight_norm) {
    Tensor g(Shape{shape.n, 1, 1, 1});
    for (int o = 0; o < shape.n; ++o) {
      double ss = 0.0;
      for (std::size_t i = 0; i < shape.sample(); ++i) ss += w[o * shape.sample() + i] * w[o * shape.sample() + i];
      g[o] = std::sqrt(ss);
    }
    weight_ = reg.add(name + ".v", std::move(w));
    gain_ = reg.add(name + ".g", std::move(g));
  } else {
    weight_ = reg.add(name + ".w", std::move(w));
  }
  bias_ = reg.add(name + ".b", Tensor(Shape{1, out, 1, 1}));
}

ag::Var Conv::effective_weight() const {
  return gain_ ? ag::weight_norm(weight_, gain_) : weight_;
}

ag::Var Conv::forward(const ag::Var& x) const {
  const ag::Var w = effective_weight();
  return transposed_ ? ag::conv_transpose2d(x, w, bias_, params_) : ag::conv2d(x, w, bias_, params_);
}

BatchNorm::BatchNorm(Registry& reg, const std::string& name, int channels) {
  gamma_ = reg.add(name + ".gamma", Tensor(Shape{1, channels, 1, 1}, 1.0));
  beta_ = reg.add(name + ".beta", Tensor(Shape{1, channels, 1, 1}, 0.0));
  stats_.running_mean.assign(channels, 0.0);
  stats_.running_var.assign(channels, 1.0);
  reg.add_buffer(name + ".running_mean", &stats_.running_mean);
  reg.add_buffer(name + ".running_var", &stats_.running_var);
}

ag::Var BatchNorm::forward(const ag::Var& x, bool training) {
  return ag::batch_norm(x, gamma_, beta_, stats_, training);
}

PRelu::PRelu(Registry& reg, const std::string& name, int channels, double init) {
  slope_ = reg.add(name + ".slope", Tensor(Shape{1, channels, 1, 1}, init));
}

DownBlock::DownBlock(Registry& reg, const std::string& name, int in, int out, const ModelConfig& cfg,
                     std::uint64_t seed)
    : conv_(reg, name + ".conv", in, out, 3, 1, 1, cfg.norm == Norm::weight_norm, false, seed),
      act_(reg, name + ".act", out) {
  if (cfg.norm == Norm::batch_norm) bn_ = std::make_unique<BatchNorm>(reg, name + ".bn", out);
  if (cfg.block == BlockKind::residual)
    shortcut_ = std::make_unique<Conv>(reg, name + ".shortcut", in, out, 1, 2, 0,
                                       cfg.norm == Norm::weight_norm, false, seed);
}

ag::Var DownBlock::forward(const ag::Var& x, bool training) {
  ag::Var h = conv_.forward(x);
  if (bn_) h = bn_->forward(h, training);
  h = ag::avg_pool2(act_.forward(h));
  if (shortcut_) h = ag::add(h, shortcut_->forward(x));
  return h;
}

Encoder::Encoder(Registry& reg, const std::string& name, int in_channels, const ModelConfig& cfg,
                 std::uint64_t seed) {
  int in = in_channels;
  for (int l = 0; l < cfg.levels(); ++l) {
    blocks_.emplace_back(reg, name + ".level" + std::to_string(l), in, cfg.channels[l], cfg, seed);
    in = cfg.channels[l];
  }
}

std::vector<ag::Var> Encoder::forward(const ag::Var& x, bool training) {
  std::vector<ag::Var> outs;
  ag::Var h = x;
  for (auto& b : blocks_) {
    h = b.forward(h, training);
    outs.push_back(h);
  }
  return outs;
}

UpBlock::UpBlock(Registry& reg, const std::string& name, int in, int out, bool last,
                 const ModelConfig& cfg, std::uint64_t seed)
    : conv_(cfg.upsample == Upsample::pixel_shuffle
                ? Conv(reg, name + ".conv", in, 4 * out, 3, 1, 1, cfg.norm == Norm::weight_norm, false, seed)
                : Conv(reg, name + ".deconv", in, out, 4, 2, 1, cfg.norm == Norm::weight_norm, true, seed)),
      mode_(cfg.upsample) {
  if (last) return;
  if (cfg.norm == Norm::batch_norm) bn_ = std::make_unique<BatchNorm>(reg, name + ".bn", out);
  act_ = std::make_unique<PRelu>(reg, name + ".act", out);
}

ag::Var UpBlock::forward(const ag::Var& x, bool training) {
  ag::Var h = conv_.forward(x);
  if (mode_ == Upsample::pixel_shuffle) h = ag::pixel_shuffle(h, 2);
  if (bn_) h = bn_->forward(h, training);
  if (act_) h = act_->forward(h);
  return h;
}

Decoder::Decoder(Registry& reg, const std::string& name, const ModelConfig& cfg, std::uint64_t seed)
    : levels_(cfg.levels()) {
  const int levels = cfg.levels();
  const int fused = cfg.fused_levels();
  int in = cfg.latent_channels + cfg.channels.back();
  for (int t = 0; t < levels; ++t) {
    const bool last = t == levels - 1;
    const int out = last ? cfg.image_channels : cfg.channels[levels - 2 - t];
    blocks_.emplace_back(reg, name + ".level" + std::to_string(t), in, out, last, cfg, seed);
    fuse_.push_back(!last && t < fused);
    in = fuse_.back() ? 2 * out : out;
  }
}

ag::Var Decoder::forward(const ag::Var& z, const StructureCode& s, bool training) {
  const int needed = static_cast<int>(std::count(fuse_.begin(), fuse_.end(), true));
  if (static_cast<int>(s.skips.size()) < levels_ - 1 || !s.y)
    throw std::invalid_argument("decode: structure code has " + std::to_string(s.skips.size()) +
                                " skip levels, need " + std::to_string(std::max(needed, levels_ - 1)));
  ag::Var h = ag::concat_channels(z, s.y);
  for (int t = 0; t < levels_; ++t) {
    h = blocks_[t].forward(h, training);
    if (fuse_[t]) {
      const auto& skip = s.skips[static_cast<std::size_t>(levels_ - 2 - t)];
      if (!skip) throw std::invalid_argument("decode: missing skip level " + std::to_string(levels_ - 2 - t));
      h = ag::concat_channels(h, skip);
    }
  }
  return ag::sigmoid(h);
}

// The posterior heads start close to zero so the initial posterior is near
// N(0, I) instead of having log-variances in the tens.
constexpr double kHeadInitScale = 0.01;

AfVae::AfVae(const ModelConfig& cfg)
    : cfg_((cfg.validate(), cfg)),
      seed_(cfg.init_seed),
      appearance_(reg_, "appearance",
                  cfg.image_channels + (cfg.appearance_uses_boundary ? cfg.boundary_channels : 0), cfg, seed_),
      mean_head_(reg_, "posterior.mean", cfg.channels.back(), cfg.latent_channels, 3, 1, 1,
                 cfg.norm == Norm::weight_norm, false, seed_, kHeadInitScale),
      log_var_head_(reg_, "posterior.log_var", cfg.channels.back(), cfg.latent_channels, 3, 1, 1,
                    cfg.norm == Norm::weight_norm, false, seed_, kHeadInitScale),
      structure_(reg_, "structure", cfg.boundary_channels, cfg, seed_),
      decoder_(reg_, "decoder", cfg, seed_) {}

std::size_t AfVae::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : reg_.params()) n += p.var->value.numel();
  return n;
}

void AfVae::zero_grad() {
  for (const auto& p : reg_.params()) p.var->zero_grad();
}

namespace {

void check_input(const ag::Var& v, int channels, int size, const char* what) {
  const Shape& s = v->value.shape();
  if (s.c != channels || s.h != size || s.w != size)
    throw std::invalid_argument(std::string(what) + " must be N x " + std::to_string(channels) + " x " +
                                std::to_string(size) + " x " + std::to_string(size) + ", got " + s.str());
}

}  // namespace

Posterior AfVae::encode_appearance(const ag::Var& image, const ag::Var& boundary) {
  check_input(image, cfg_.image_channels, cfg_.input_size, "image");
  ag::Var in = image;
  if (cfg_.appearance_uses_boundary) {
    if (!boundary) throw std::invalid_argument("appearance branch expects a boundary map");
    check_input(boundary, cfg_.boundary_channels, cfg_.input_size, "boundary map");
    in = ag::concat_channels(image, boundary);
  }
  const ag::Var trunk = appearance_.forward(in, training_).back();
  return {mean_head_.forward(trunk), log_var_head_.forward(trunk)};
}

StructureCode AfVae::encode_structure(const ag::Var& boundary) {
  check_input(boundary, cfg_.boundary_channels, cfg_.input_size, "boundary map");
  auto levels = structure_.forward(boundary, training_);
  StructureCode code;
  code.y = levels.back();
  levels.pop_back();
  code.skips = std::move(levels);
  return code;
}

ag::Var AfVae::decode(const ag::Var& z, const StructureCode& s) {
  const Shape& zs = z->value.shape();
  const int side = cfg_.latent_side();
  if (zs.c != cfg_.latent_channels || zs.h != side || zs.w != side)
    throw std::invalid_argument("latent must be N x " + std::to_string(cfg_.latent_channels) + " x " +
                                std::to_string(side) + " x " + std::to_string(side) + ", got " + zs.str());
  return decoder_.forward(z, s, training_);
}

// ---------------------------------------------------------------------------

ConvStack ConvStack::random(std::uint64_t seed, int in_channels, const std::vector<int>& channels) {
  std::mt19937_64 rng(seed);
  std::vector<Layer> layers;
  int in = in_channels;
  for (int out : channels) {
    layers.push_back({he_normal(Shape{out, in, 3, 3}, in * 9.0, rng), std::vector<double>(out, 0.0)});
    in = out;
  }
  return ConvStack(std::move(layers));
}

std::vector<ag::Var> ConvStack::forward(const ag::Var& x) const {
  std::vector<ag::Var> outs;
  ag::Var h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (i > 0) h = ag::avg_pool2(h);
    const auto& l = layers_[i];
    h = ag::relu(ag::conv2d(h, ag::constant(l.weight),
                            ag::constant(Tensor(Shape{1, static_cast<int>(l.bias.size()), 1, 1}, l.bias)),
                            {1, 1}));
    outs.push_back(h);
  }
  return outs;
}

int ConvStack::out_channels() const { return layers_.empty() ? 0 : layers_.back().weight.shape().n; }

nlohmann::json to_json(const ConvStack& s) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : s.layers()) {
    const Shape& ws = l.weight.shape();
    layers.push_back({{"in", ws.c}, {"out", ws.n}, {"kernel", ws.h}, {"weights", l.weight.vec()}, {"bias", l.bias}});
  }
  return {{"layers", layers}};
}

ConvStack conv_stack_from_json(const nlohmann::json& j) {
  std::vector<ConvStack::Layer> layers;
  for (const auto& l : j.at("layers")) {
    const int in = l.at("in").get<int>(), out = l.at("out").get<int>(), k = l.at("kernel").get<int>();
    require(k == 3, "conv stack layers must be 3x3");
    auto w = l.at("weights").get<std::vector<double>>();
    auto b = l.at("bias").get<std::vector<double>>();
    require(static_cast<int>(b.size()) == out, "conv stack bias length");
    layers.push_back({Tensor(Shape{out, in, k, k}, std::move(w)), std::move(b)});
  }
  return ConvStack(std::move(layers));
}

}  // namespace afvae::nn
