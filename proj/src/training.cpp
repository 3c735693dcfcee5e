#include "afvae/training.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include "afvae/prior.hpp"
#include "afvae/rng.hpp"

namespace afvae::train {

namespace fs = std::filesystem;

void AdamConfig::validate() const {
  require(lr >= 0.0 && std::isfinite(lr), "adam: learning rate must be finite and >= 0");
  require(beta1 >= 0.0 && beta1 < 1.0, "adam: beta1 must lie in [0, 1)");
  require(beta2 >= 0.0 && beta2 < 1.0, "adam: beta2 must lie in [0, 1)");
  require(eps > 0.0, "adam: eps must be positive");
}

void TrainConfig::validate() const {
  adam.validate();
  require(batch_size >= 1, "batch_size must be >= 1");
  require(steps >= 0, "steps must be >= 0");
  require(checkpoint_every >= 0, "checkpoint_every must be >= 0");
  require(gmm_samples >= 1, "gmm_samples must be >= 1");
  require(loss.kl_coeff >= 0.0, "kl_coeff must be >= 0");
  require(ema_decay >= 0.0 && ema_decay < 1.0, "ema_decay must lie in [0, 1)");
  effective_model().validate();
}

nn::ModelConfig TrainConfig::effective_model() const {
  nn::ModelConfig m = model;
  if (ablations.no_wn && m.norm == nn::Norm::weight_norm) m.norm = nn::Norm::none;
  if (ablations.no_pixel_shuffle) m.upsample = nn::Upsample::transposed;
  m.init_seed = derive_seed(seed, "init");
  return m;
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"model", nn::to_json(c.model)},
          {"adam", {{"lr", c.adam.lr}, {"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
          {"batch_size", c.batch_size},
          {"steps", c.steps},
          {"seed", c.seed},
          {"ablations",
           {{"no_kl", c.ablations.no_kl},
            {"gmm_prior", c.ablations.gmm_prior},
            {"no_pixel_shuffle", c.ablations.no_pixel_shuffle},
            {"no_wn", c.ablations.no_wn}}},
          {"checkpoint_every", c.checkpoint_every},
          {"loss",
           {{"feature_weights", c.loss.feature_weights},
            {"kl_coeff", c.loss.kl_coeff},
            {"feature_norm", c.loss.feature_norm == losses::FeatureNorm::l1 ? "l1" : "l2"},
            {"kl_reduction", "sum over latent dims, mean over batch"}}},
          {"extractor", c.extractor},
          {"boundary",
           {{"mode", c.boundary.mode == geometry::BoundaryMode::single ? "single" : "per-group"},
            {"blur_sigma", c.boundary.blur_sigma}}},
          {"gmm_samples", c.gmm_samples},
          {"ema_decay", c.ema_decay}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("model")) c.model = nn::model_config_from_json(j.at("model"));
  if (j.contains("adam")) {
    const auto& a = j.at("adam");
    c.adam.lr = a.value("lr", c.adam.lr);
    c.adam.beta1 = a.value("beta1", c.adam.beta1);
    c.adam.beta2 = a.value("beta2", c.adam.beta2);
    c.adam.eps = a.value("eps", c.adam.eps);
  }
  c.batch_size = j.value("batch_size", c.batch_size);
  c.steps = j.value("steps", c.steps);
  c.seed = j.value("seed", c.seed);
  if (j.contains("ablations")) {
    const auto& a = j.at("ablations");
    c.ablations.no_kl = a.value("no_kl", false);
    c.ablations.gmm_prior = a.value("gmm_prior", false);
    c.ablations.no_pixel_shuffle = a.value("no_pixel_shuffle", false);
    c.ablations.no_wn = a.value("no_wn", false);
  }
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    c.loss.feature_weights = l.value("feature_weights", c.loss.feature_weights);
    c.loss.kl_coeff = l.value("kl_coeff", c.loss.kl_coeff);
    const std::string norm = l.value("feature_norm", std::string("l1"));
    require(norm == "l1" || norm == "l2", "feature_norm must be l1 or l2");
    c.loss.feature_norm = norm == "l1" ? losses::FeatureNorm::l1 : losses::FeatureNorm::l2;
  }
  c.extractor = j.value("extractor", c.extractor);
  if (j.contains("boundary")) {
    const auto& b = j.at("boundary");
    const std::string mode = b.value("mode", std::string("single"));
    require(mode == "single" || mode == "per-group", "boundary mode must be single or per-group");
    c.boundary.mode = mode == "single" ? geometry::BoundaryMode::single : geometry::BoundaryMode::per_group;
    c.boundary.blur_sigma = b.value("blur_sigma", c.boundary.blur_sigma);
  }
  c.gmm_samples = j.value("gmm_samples", c.gmm_samples);
  c.ema_decay = j.value("ema_decay", c.ema_decay);
  c.validate();
  return c;
}

namespace {

std::string describe(int step, const losses::LossBreakdown& b) {
  std::ostringstream os;
  os << "non-finite loss at step " << step << ": rec_l1=" << b.rec_l1 << " rec_feat=" << b.rec_feat;
  for (std::size_t l = 0; l < b.feature_terms.size(); ++l) os << " feat[" << l << "]=" << b.feature_terms[l];
  os << " kl=" << b.kl << " kl_coeff=" << b.kl_coeff << " total=" << b.total;
  return os.str();
}

Tensor standard_normal(Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Tensor t(shape);
  for (double& v : t.vec()) v = normal(rng);
  return t;
}

}  // namespace

NonFiniteLoss::NonFiniteLoss(int step, const losses::LossBreakdown& b)
    : std::runtime_error(describe(step, b)), breakdown(b) {}

Trainer::Trainer(TrainConfig cfg, const data::Corpus& corpus, focal::FocalBank bank)
    : cfg_(std::move(cfg)), corpus_(&corpus), bank_(std::move(bank)) {
  cfg_.validate();
  model_ = std::make_unique<nn::AfVae>(cfg_.effective_model());
  bank_.validate();
  require(bank_.latent_dim() == model_->config().latent_dim(),
          "focal bank latent dimension " + std::to_string(bank_.latent_dim()) + " does not match the model's " +
              std::to_string(model_->config().latent_dim()));
  extractor_ = losses::FeatureExtractor::parse(cfg_.extractor, derive_seed(cfg_.seed, "extractor"));
  train_positions_ = corpus.indices(data::Split::train);
  require(!train_positions_.empty(), "corpus has no train records");
  for (const auto& p : model_->parameters()) {
    state_.adam_m.emplace_back(p.var->value.shape());
    state_.adam_v.emplace_back(p.var->value.shape());
  }
}

std::vector<int> Trainer::batch_positions(int step) const {
  const int per_epoch =
      static_cast<int>((train_positions_.size() + cfg_.batch_size - 1) / static_cast<std::size_t>(cfg_.batch_size));
  const int epoch = step / per_epoch;
  const auto batches = data::epoch_batches(train_positions_, cfg_.batch_size, true,
                                           derive_seed(cfg_.seed, "data", static_cast<std::uint64_t>(epoch)));
  return batches[static_cast<std::size_t>(step % per_epoch)];
}

losses::PriorBatch Trainer::prior_for(const data::Batch& batch, std::mt19937_64& rng) const {
  const int n = static_cast<int>(batch.maps.size());
  const int dz = bank_.latent_dim();
  const int k = bank_.k();
  losses::PriorBatch p;
  std::vector<Eigen::VectorXd> weights;
  for (const auto& map : batch.maps) weights.push_back(focal::focal_weights(map, bank_));

  if (!cfg_.ablations.gmm_prior) {
    p.kind = losses::PriorBatch::Kind::additive;
    p.mean = Tensor(Shape{n, dz, 1, 1});
    for (int i = 0; i < n; ++i) {
      const auto prior = prior::make_prior(weights[i], bank_);
      std::copy(prior.mean.data(), prior.mean.data() + dz, p.mean.data() + static_cast<std::size_t>(i) * dz);
      p.var.push_back(prior.var);
    }
    return p;
  }
  p.kind = losses::PriorBatch::Kind::mixture;
  p.weights = Tensor(Shape{n, k, 1, 1});
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < k; ++c) p.weights[static_cast<std::size_t>(i) * k + c] = weights[i][c];
  p.component_means = Tensor(Shape{k, dz, 1, 1},
                             std::vector<double>(bank_.latent_means.data(), bank_.latent_means.data() + k * dz));
  p.component_scales.assign(bank_.latent_scales.data(), bank_.latent_scales.data() + k);
  const auto& cfg = model_->config();
  for (int s = 0; s < cfg_.gmm_samples; ++s)
    p.mc_noise.push_back(standard_normal(Shape{n, cfg.latent_channels, cfg.latent_side(), cfg.latent_side()}, rng));
  return p;
}

losses::ForwardPass Trainer::forward(const data::Batch& batch, std::mt19937_64& rng) {
  const auto& cfg = model_->config();
  const int n = batch.images.shape().n;
  const Tensor noise = standard_normal(Shape{n, cfg.latent_channels, cfg.latent_side(), cfg.latent_side()}, rng);
  const auto prior = prior_for(batch, rng);
  losses::LossWeights w = cfg_.loss;
  w.kl_coeff = cfg_.effective_kl_coeff();
  return losses::total_loss(*model_, batch.images, batch.boundaries, prior, noise, extractor_, w);
}

losses::LossBreakdown Trainer::train_step(const data::Batch& batch) {
  std::mt19937_64 rng(derive_seed(cfg_.seed, "noise", static_cast<std::uint64_t>(state_.step)));
  model_->set_training(true);
  model_->zero_grad();
  auto pass = forward(batch, rng);
  const auto& b = pass.objective.breakdown;
  if (!std::isfinite(b.total) || !std::isfinite(b.kl) || !std::isfinite(b.rec_l1) || !std::isfinite(b.rec_feat))
    throw NonFiniteLoss(state_.step, b);
  ag::backward(pass.objective.total);
  adam_update();

  auto& r = state_.running;
  const double d = cfg_.ema_decay;
  r.rec_l1 = d * r.rec_l1 + (1 - d) * b.rec_l1;
  r.rec_feat = d * r.rec_feat + (1 - d) * b.rec_feat;
  r.kl = d * r.kl + (1 - d) * b.kl;
  r.total = d * r.total + (1 - d) * b.total;
  state_.running_weight = d * state_.running_weight + (1 - d);
  ++state_.step;
  return b;
}

losses::LossBreakdown Trainer::step() { return train_step(data::make_batch(*corpus_, batch_positions(state_.step), cfg_.boundary)); }

losses::LossBreakdown Trainer::evaluate(const data::Batch& batch, std::uint64_t noise_seed) {
  const bool was = model_->training();
  model_->set_training(false);
  std::mt19937_64 rng(noise_seed);
  auto pass = forward(batch, rng);
  model_->set_training(was);
  return pass.objective.breakdown;
}

void Trainer::adam_update() {
  const auto& params = model_->parameters();
  const double t = state_.step + 1;
  const AdamConfig& a = cfg_.adam;
  const double c1 = 1.0 - std::pow(a.beta1, t);
  const double c2 = 1.0 - std::pow(a.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& node = *params[i].var;
    if (node.grad.empty()) continue;
    double* p = node.value.data();
    const double* g = node.grad.data();
    double* m = state_.adam_m[i].data();
    double* v = state_.adam_v[i].data();
    const std::size_t n = node.value.numel();
    for (std::size_t j = 0; j < n; ++j) {
      m[j] = a.beta1 * m[j] + (1.0 - a.beta1) * g[j];
      v[j] = a.beta2 * v[j] + (1.0 - a.beta2) * g[j] * g[j];
      p[j] -= a.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + a.eps);
    }
  }
}

void Trainer::save(const std::string& path) const {
  Checkpoint c;
  c.config = cfg_;
  c.step = state_.step;
  c.bank = bank_;
  const auto& params = model_->parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    c.tensors["param/" + params[i].name] = params[i].var->value;
    c.tensors["adam_m/" + params[i].name] = state_.adam_m[i];
    c.tensors["adam_v/" + params[i].name] = state_.adam_v[i];
  }
  for (const auto& b : model_->buffers())
    c.tensors["buffer/" + b.name] = Tensor(Shape{1, static_cast<int>(b.values->size()), 1, 1}, *b.values);
  const auto& r = state_.running;
  c.extra = {{"running", {{"rec_l1", r.rec_l1}, {"rec_feat", r.rec_feat}, {"kl", r.kl}, {"total", r.total}}},
             {"running_weight", state_.running_weight}};
  save_checkpoint(c, path);
}

namespace {

const Tensor& find_tensor(const Checkpoint& c, const std::string& name, const Shape& shape) {
  auto it = c.tensors.find(name);
  if (it == c.tensors.end()) throw std::runtime_error("checkpoint is missing tensor " + name);
  if (!(it->second.shape() == shape))
    throw std::runtime_error("checkpoint tensor " + name + " has shape " + it->second.shape().str() +
                             ", model expects " + shape.str());
  return it->second;
}

void load_model_state(nn::AfVae& model, const Checkpoint& c) {
  for (const auto& p : model.parameters())
    p.var->value = find_tensor(c, "param/" + p.name, p.var->value.shape());
  for (const auto& b : model.buffers())
    *b.values = find_tensor(c, "buffer/" + b.name, Shape{1, static_cast<int>(b.values->size()), 1, 1}).vec();
}

}  // namespace

std::unique_ptr<Trainer> Trainer::resume(const std::string& path, const data::Corpus& corpus) {
  const Checkpoint c = load_checkpoint(path);
  auto t = std::make_unique<Trainer>(c.config, corpus, c.bank);
  load_model_state(*t->model_, c);
  const auto& params = t->model_->parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    t->state_.adam_m[i] = find_tensor(c, "adam_m/" + params[i].name, params[i].var->value.shape());
    t->state_.adam_v[i] = find_tensor(c, "adam_v/" + params[i].name, params[i].var->value.shape());
  }
  t->state_.step = c.step;
  if (c.extra.contains("running")) {
    const auto& r = c.extra.at("running");
    t->state_.running.rec_l1 = r.at("rec_l1").get<double>();
    t->state_.running.rec_feat = r.at("rec_feat").get<double>();
    t->state_.running.kl = r.at("kl").get<double>();
    t->state_.running.total = r.at("total").get<double>();
    t->state_.running_weight = c.extra.at("running_weight").get<double>();
  }
  return t;
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'A', 'F', 'V', 'A', 'E', 'C', 'K', 'P'};
constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  nlohmann::json table = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    const Shape& s = t.shape();
    table.push_back({{"name", name}, {"shape", {s.n, s.c, s.h, s.w}}, {"offset", offset}});
    offset += t.numel();
  }
  const nlohmann::json header{{"config", to_json(ckpt.config)},
                              {"step", ckpt.step},
                              {"bank", focal::to_json(ckpt.bank)},
                              {"tensors", table},
                              {"extra", ckpt.extra}};
  const std::string text = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path);
    const std::uint64_t len = text.size();
    out.write(kMagic, sizeof kMagic);
    out.write(reinterpret_cast<const char*>(&kCheckpointVersion), sizeof kCheckpointVersion);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(len));
    for (const auto& [name, t] : ckpt.tensors)
      out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!out) throw std::runtime_error("failed writing checkpoint " + path);
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) throw std::runtime_error(path + " is not a checkpoint");
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  if (version != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("truncated checkpoint header in " + path);
  const auto header = nlohmann::json::parse(text);

  Checkpoint c;
  c.config = train_config_from_json(header.at("config"));
  c.step = header.at("step").get<int>();
  c.bank = focal::bank_from_json(header.at("bank"));
  c.extra = header.value("extra", nlohmann::json::object());
  for (const auto& e : header.at("tensors")) {
    const auto dims = e.at("shape").get<std::vector<int>>();
    require(dims.size() == 4, "checkpoint tensor shape must have 4 dims");
    Tensor t(Shape{dims[0], dims[1], dims[2], dims[3]});
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!in) throw std::runtime_error("truncated checkpoint payload in " + path);
    c.tensors.emplace(e.at("name").get<std::string>(), std::move(t));
  }
  return c;
}

std::unique_ptr<nn::AfVae> restore_model(const Checkpoint& ckpt) {
  auto model = std::make_unique<nn::AfVae>(ckpt.config.effective_model());
  load_model_state(*model, ckpt);
  model->set_training(false);
  return model;
}

// ---------------------------------------------------------------------------

namespace {

std::string checkpoint_name(int step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%06d.ckpt", step);
  return buf;
}

void require_writable(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  const fs::path probe = dir / ".write_probe";
  std::ofstream out(probe);
  if (ec || !out) throw std::runtime_error("checkpoint directory " + dir.string() + " is not writable");
  out.close();
  fs::remove(probe, ec);
}

// Keeps the header and every row with step <= last_step.
void truncate_metrics(const fs::path& path, int last_step) {
  std::ifstream in(path);
  std::vector<std::string> keep;
  std::string line;
  while (std::getline(in, line)) {
    if (keep.empty() || line.empty()) {
      if (!line.empty()) keep.push_back(line);
      continue;
    }
    if (std::stoi(line.substr(0, line.find(','))) <= last_step) keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << "\n";
}

}  // namespace

RunResult run_training(const TrainConfig& cfg, const data::Corpus& corpus, const focal::FocalBank& bank,
                       const RunOptions& opts) {
  const fs::path dir(opts.out_dir);
  require_writable(dir);

  std::unique_ptr<Trainer> trainer;
  if (opts.resume_from.empty()) {
    trainer = std::make_unique<Trainer>(cfg, corpus, bank);
  } else {
    trainer = Trainer::resume(opts.resume_from, corpus);
  }
  const int target = cfg.steps;
  const int every = cfg.checkpoint_every;

  RunResult result;
  result.metrics_path = (dir / "metrics.csv").string();
  const int start = trainer->state().step;
  if (opts.resume_from.empty()) {
    result.final_checkpoint = (dir / checkpoint_name(0)).string();
    trainer->save(result.final_checkpoint);
    if (target == 0) return result;
    std::ofstream(result.metrics_path, std::ios::trunc) << "step,rec_l1,rec_feat,kl,total\n";
  } else {
    if (fs::exists(result.metrics_path))
      truncate_metrics(result.metrics_path, start);
    else
      std::ofstream(result.metrics_path) << "step,rec_l1,rec_feat,kl,total\n";
    result.final_checkpoint = opts.resume_from;
  }

  std::ofstream log(result.metrics_path, std::ios::app);
  log.precision(17);
  while (trainer->state().step < target) {
    const auto b = trainer->step();
    const int s = trainer->state().step;
    log << s << "," << b.rec_l1 << "," << b.rec_feat << "," << b.kl << "," << b.total << "\n";
    result.history.push_back(b);
    if (opts.verbose && (s % 50 == 0 || s == target))
      std::cerr << "step " << s << "  total " << b.total << "  rec_l1 " << b.rec_l1 << "  kl " << b.kl << "\n";
    if ((every > 0 && s % every == 0) || s == target) {
      log.flush();
      result.final_checkpoint = (dir / checkpoint_name(s)).string();
      trainer->save(result.final_checkpoint);
    }
  }
  return result;
}

double window_mean(const std::vector<double>& v, std::size_t end, std::size_t window) {
  require(end <= v.size() && window >= 1, "window_mean: range out of bounds");
  const std::size_t begin = end >= window ? end - window : 0;
  require(end > begin, "window_mean: empty window");
  double s = 0.0;
  for (std::size_t i = begin; i < end; ++i) s += v[i];
  return s / static_cast<double>(end - begin);
}

}  // namespace afvae::train
