#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "afvae/datasets.hpp"
#include "afvae/focalbank.hpp"
#include "afvae/losses.hpp"
#include "afvae/nn.hpp"

namespace afvae::train {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
  void validate() const;
};

struct Ablations {
  bool no_kl = false;             // kl_coeff forced to 0, KL still logged
  bool gmm_prior = false;         // sampled mixture KL instead of the additive prior
  bool no_pixel_shuffle = false;  // transposed-conv upsampling
  bool no_wn = false;             // plain convolutions
};

struct TrainConfig {
  nn::ModelConfig model;
  AdamConfig adam;
  int batch_size = 4;
  int steps = 2000;
  std::uint64_t seed = 0;
  Ablations ablations;
  /// Checkpoint every N steps (0 disables periodic checkpoints; the initial
  /// and final ones are always written).
  int checkpoint_every = 500;
  losses::LossWeights loss;
  std::string extractor = "random";
  geometry::BoundaryOptions boundary;
  int gmm_samples = 16;
  /// Decay of the running loss averages.
  double ema_decay = 0.98;

  void validate() const;
  /// Model config with the ablation switches applied.
  nn::ModelConfig effective_model() const;
  double effective_kl_coeff() const { return ablations.no_kl ? 0.0 : loss.kl_coeff; }
};

nlohmann::json to_json(const TrainConfig& c);
/// Missing keys keep their defaults.
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Thrown when a step produces a non-finite objective; what() lists every term.
class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(int step, const losses::LossBreakdown& b);
  losses::LossBreakdown breakdown;
};

struct TrainState {
  int step = 0;
  std::vector<Tensor> adam_m;
  std::vector<Tensor> adam_v;
  /// Bias-corrected exponential moving averages of the loss terms.
  losses::LossBreakdown running;
  double running_weight = 0.0;
};

/// Owns the model, optimizer state and focal bank for one run.
class Trainer {
 public:
  Trainer(TrainConfig cfg, const data::Corpus& corpus, focal::FocalBank bank);

  /// Runs the step for state().step on the batch that step is scheduled to
  /// see, then advances the counter.
  losses::LossBreakdown step();
  /// One forward/backward/Adam update on an explicit batch. Noise is a
  /// function of (seed, step) only.
  losses::LossBreakdown train_step(const data::Batch& batch);

  /// Record positions seen at a given step: epochs are seeded permutations
  /// of the train split.
  std::vector<int> batch_positions(int step) const;

  /// Loss of the current parameters on a batch without updating anything.
  losses::LossBreakdown evaluate(const data::Batch& batch, std::uint64_t noise_seed);

  nn::AfVae& model() { return *model_; }
  const nn::AfVae& model() const { return *model_; }
  const TrainConfig& config() const { return cfg_; }
  const focal::FocalBank& bank() const { return bank_; }
  TrainState& state() { return state_; }
  const TrainState& state() const { return state_; }
  const losses::FeatureExtractor& extractor() const { return extractor_; }

  void save(const std::string& path) const;
  /// Restores model, optimizer and counters from a checkpoint; the corpus
  /// must be the one the run was started on.
  static std::unique_ptr<Trainer> resume(const std::string& path, const data::Corpus& corpus);

 private:
  losses::PriorBatch prior_for(const data::Batch& batch, std::mt19937_64& rng) const;
  losses::ForwardPass forward(const data::Batch& batch, std::mt19937_64& rng);
  void adam_update();

  TrainConfig cfg_;
  const data::Corpus* corpus_;
  focal::FocalBank bank_;
  std::unique_ptr<nn::AfVae> model_;
  losses::FeatureExtractor extractor_;
  TrainState state_;
  std::vector<int> train_positions_;
};

// ---------------------------------------------------------------------------
// Checkpoints: "AFVAECKP", u32 version, u64 header length, JSON header,
// then the raw little-endian f64 payload of every tensor in header order.

struct Checkpoint {
  TrainConfig config;
  int step = 0;
  focal::FocalBank bank;
  std::map<std::string, Tensor> tensors;  // param/..., buffer/..., adam_m/..., adam_v/...
  nlohmann::json extra;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Model with the checkpoint's parameters and buffers, in inference mode.
std::unique_ptr<nn::AfVae> restore_model(const Checkpoint& ckpt);

struct RunOptions {
  std::string out_dir;
  /// Continue from this checkpoint instead of starting fresh.
  std::string resume_from;
  bool verbose = false;
};

struct RunResult {
  std::string final_checkpoint;
  std::string metrics_path;
  std::vector<losses::LossBreakdown> history;  // steps run in this call
};

/// Builds the bank-conditioned trainer and runs cfg.steps steps. Writes
/// step_<n>.ckpt files and metrics.csv (step,rec_l1,rec_feat,kl,total) under
/// out_dir. Throws before training when out_dir is not writable.
RunResult run_training(const TrainConfig& cfg, const data::Corpus& corpus, const focal::FocalBank& bank,
                       const RunOptions& opts);

/// Mean of the last `window` values ending at position `end` (exclusive).
double window_mean(const std::vector<double>& v, std::size_t end, std::size_t window);

}  // namespace afvae::train
