#pragma once

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "afvae/autograd.hpp"

namespace afvae::nn {

enum class Norm { weight_norm, batch_norm, none };
enum class Upsample { pixel_shuffle, transposed };
enum class BlockKind { residual, plain };

std::string to_string(Norm n);
std::string to_string(Upsample u);
std::string to_string(BlockKind b);

struct ModelConfig {
  int input_size = 64;
  int image_channels = 3;
  int boundary_channels = 1;
  /// Output channels of each downsampling level; its length is the number of
  /// downsamples.
  std::vector<int> channels{32, 64, 128, 256};
  int latent_channels = 256;
  Norm norm = Norm::weight_norm;
  Upsample upsample = Upsample::pixel_shuffle;
  BlockKind block = BlockKind::residual;
  /// Feed the boundary map to the appearance encoder as extra channels.
  bool appearance_uses_boundary = false;
  /// Number of skip levels concatenated into the decoder, deepest first.
  /// -1 fuses every level.
  int fusion_levels = -1;
  std::uint64_t init_seed = 1;

  static ModelConfig desk();
  /// 256x256, six levels of 64..512 channels, 512 latent channels.
  static ModelConfig full();

  int levels() const { return static_cast<int>(channels.size()); }
  int latent_side() const { return input_size >> levels(); }
  /// Flattened size of the appearance code.
  int latent_dim() const { return latent_channels * latent_side() * latent_side(); }
  int fused_levels() const;
  void validate() const;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct NamedParam {
  std::string name;
  ag::Var var;
};

struct NamedBuffer {
  std::string name;
  std::vector<double>* values;
};

/// Collects parameters and persistent buffers under hierarchical names.
class Registry {
 public:
  ag::Var add(const std::string& name, Tensor value);
  void add_buffer(const std::string& name, std::vector<double>* values);
  const std::vector<NamedParam>& params() const { return params_; }
  const std::vector<NamedBuffer>& buffers() const { return buffers_; }

 private:
  std::vector<NamedParam> params_;
  std::vector<NamedBuffer> buffers_;
};

/// Convolution whose weight is either a plain tensor or the weight-normalized
/// g * v / ||v|| (one gain per output slice).
class Conv {
 public:
  Conv(Registry& reg, const std::string& name, int in, int out, int kernel, int stride, int pad,
       bool weight_norm, bool transposed, std::uint64_t seed, double init_scale = 1.0);

  ag::Var forward(const ag::Var& x) const;
  /// Weight actually applied by forward().
  ag::Var effective_weight() const;

  const ag::Var& direction() const { return weight_; }
  const ag::Var& gain() const { return gain_; }
  const ag::Var& bias() const { return bias_; }
  bool weight_normalized() const { return static_cast<bool>(gain_); }

 private:
  ag::Var weight_;
  ag::Var gain_;
  ag::Var bias_;
  kernels::ConvParams params_;
  bool transposed_ = false;
};

class BatchNorm {
 public:
  BatchNorm(Registry& reg, const std::string& name, int channels);
  ag::Var forward(const ag::Var& x, bool training);

 private:
  ag::Var gamma_, beta_;
  ag::BatchNormStats stats_;
};

class PRelu {
 public:
  PRelu(Registry& reg, const std::string& name, int channels, double init = 0.25);
  ag::Var forward(const ag::Var& x) const { return ag::prelu(x, slope_); }

 private:
  ag::Var slope_;
};

/// One downsampling level: conv3x3 -> [BN] -> PReLU -> 2x2 average pool, plus
/// a strided 1x1 projection shortcut in residual mode.
class DownBlock {
 public:
  DownBlock(Registry& reg, const std::string& name, int in, int out, const ModelConfig& cfg,
            std::uint64_t seed);
  ag::Var forward(const ag::Var& x, bool training);

 private:
  Conv conv_;
  std::unique_ptr<BatchNorm> bn_;
  PRelu act_;
  std::unique_ptr<Conv> shortcut_;
};

class Encoder {
 public:
  Encoder(Registry& reg, const std::string& name, int in_channels, const ModelConfig& cfg,
          std::uint64_t seed);
  /// Output of every level, shallowest first.
  std::vector<ag::Var> forward(const ag::Var& x, bool training);

 private:
  std::vector<DownBlock> blocks_;
};

struct Posterior {
  ag::Var mean;
  ag::Var log_var;
};

struct StructureCode {
  ag::Var y;
  /// Level outputs except the last, shallowest first.
  std::vector<ag::Var> skips;
};

/// One decoder level: upsample 2x (conv3x3 to 4C + pixel shuffle, or a 4x4
/// stride-2 transposed conv to C), then [BN] and PReLU except on the output.
class UpBlock {
 public:
  UpBlock(Registry& reg, const std::string& name, int in, int out, bool last,
          const ModelConfig& cfg, std::uint64_t seed);
  ag::Var forward(const ag::Var& x, bool training);

 private:
  Conv conv_;
  Upsample mode_;
  std::unique_ptr<BatchNorm> bn_;
  std::unique_ptr<PRelu> act_;
};

class Decoder {
 public:
  Decoder(Registry& reg, const std::string& name, const ModelConfig& cfg, std::uint64_t seed);
  ag::Var forward(const ag::Var& z, const StructureCode& s, bool training);

 private:
  std::vector<UpBlock> blocks_;
  std::vector<bool> fuse_;
  int levels_ = 0;
};

/// Two-branch encoder plus skip-connected decoder.
class AfVae {
 public:
  explicit AfVae(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  const std::vector<NamedParam>& parameters() const { return reg_.params(); }
  const std::vector<NamedBuffer>& buffers() const { return reg_.buffers(); }
  std::size_t parameter_count() const;
  void set_training(bool on) { training_ = on; }
  bool training() const { return training_; }
  void zero_grad();

  /// image: N x 3 x S x S. boundary is only used when the config routes it to
  /// the appearance branch.
  Posterior encode_appearance(const ag::Var& image, const ag::Var& boundary = nullptr);
  StructureCode encode_structure(const ag::Var& boundary);
  ag::Var decode(const ag::Var& z, const StructureCode& s);

 private:
  ModelConfig cfg_;
  Registry reg_;
  std::uint64_t seed_;
  Encoder appearance_;
  Conv mean_head_;
  Conv log_var_head_;
  Encoder structure_;
  Decoder decoder_;
  bool training_ = true;
};

/// Fixed-weight conv stack used as a feature extractor and embedder:
/// conv3x3 -> ReLU, with 2x2 average pooling between layers.
class ConvStack {
 public:
  struct Layer {
    Tensor weight;
    std::vector<double> bias;
  };

  ConvStack() = default;
  explicit ConvStack(std::vector<Layer> layers) : layers_(std::move(layers)) {}
  static ConvStack random(std::uint64_t seed, int in_channels, const std::vector<int>& channels);

  /// Activations after every layer.
  std::vector<ag::Var> forward(const ag::Var& x) const;
  int size() const { return static_cast<int>(layers_.size()); }
  int out_channels() const;
  const std::vector<Layer>& layers() const { return layers_; }

 private:
  std::vector<Layer> layers_;
};

nlohmann::json to_json(const ConvStack& s);
ConvStack conv_stack_from_json(const nlohmann::json& j);

}  // namespace afvae::nn
