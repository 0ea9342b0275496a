#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "urnet/ops.hpp"
#include "urnet/tensor.hpp"

namespace urnet {

using Rng = std::mt19937_64;

/// Desired fraction of residual blocks to execute, in [0, 1].
class ScaleParam {
 public:
  explicit ScaleParam(double value);
  double value() const noexcept { return value_; }

 private:
  double value_;
};

enum class GateMode { Sigmoid, Binary };

const char* to_string(GateMode mode);

/// Architecture of a gated residual network. Serialized into checkpoints.
struct ModelSpec {
  std::size_t in_channels = 3;
  std::size_t image_size = 8;
  std::vector<std::size_t> stage_channels{16, 32, 64};
  std::size_t blocks_per_stage = 4;
  std::size_t num_classes = 10;
  std::size_t reduction = 2;  // CGM bottleneck: hidden = ceil((C + 1) / reduction)
  bool use_feature_input = true;
  double gate_training_probability = 0.1;
  double cgm_init_bias = 1.0;
  std::uint64_t init_seed = 1;

  std::size_t num_blocks() const { return stage_channels.size() * blocks_per_stage; }
  void validate() const;
  bool same_architecture(const ModelSpec& other) const;
};

/// Convolution followed by batch normalization.
struct ConvBn {
  Tensor weight;  // [Cout, Cin, k, k]
  Tensor gamma;
  Tensor shift;
  BatchNormStats stats;
  std::size_t stride = 1;
  std::size_t pad = 0;

  Tensor forward(const Tensor& x, NormMode mode);
};

struct ResidualBlockParams {
  ConvBn conv1;
  ConvBn conv2;
  std::optional<ConvBn> projection;  // 1x1 conv + bn when the shape changes

  /// F(X): conv-bn-relu-conv-bn.
  Tensor residual(const Tensor& x, NormMode mode);
  /// X itself, or the projection of X for shape-changing blocks.
  Tensor shortcut(const Tensor& x, NormMode mode);
};

/// Conditional gating module: pooled features and the scale go through two
/// affine maps around a bottleneck of size hidden.
struct CgmParams {
  Tensor w1;  // [C + 1, hidden]
  Tensor b1;  // [hidden]
  Tensor w2;  // [hidden, 1]
  Tensor b2;  // [1]

  std::size_t channels() const { return w1.dim(0) - 1; }
  std::size_t hidden() const { return w1.dim(1); }
};

std::size_t cgm_hidden_size(std::size_t channels, std::size_t reduction);

enum class ParamGroup { Backbone, Cgm };

struct NamedParam {
  std::string name;
  Tensor tensor;
  ParamGroup group;
};

/// Running batch-norm statistics exposed for persistence.
struct NamedBuffer {
  std::string name;
  std::vector<double>* values;
};

class UrnetModel {
 public:
  explicit UrnetModel(ModelSpec spec);

  const ModelSpec& spec() const noexcept { return spec_; }
  std::size_t num_blocks() const noexcept { return blocks_.size(); }
  double gate_training_probability() const noexcept { return spec_.gate_training_probability; }
  void set_gate_training_probability(double p);
  bool use_feature_input() const noexcept { return spec_.use_feature_input; }

  ConvBn& stem() { return stem_; }
  std::vector<ResidualBlockParams>& blocks() { return blocks_; }
  std::vector<CgmParams>& cgms() { return cgms_; }
  Tensor& head_weight() { return head_weight_; }
  Tensor& head_bias() { return head_bias_; }

  std::vector<NamedParam> parameters();
  std::vector<NamedBuffer> buffers();
  /// Enables or disables gradients for one parameter group.
  void set_trainable(ParamGroup group, bool trainable);
  void zero_grad();

 private:
  ModelSpec spec_;
  ConvBn stem_;
  std::vector<ResidualBlockParams> blocks_;
  std::vector<CgmParams> cgms_;
  Tensor head_weight_;
  Tensor head_bias_;
};

/// Sigmoid: differentiable. Binary: 1 iff z > 0, no gradient.
Tensor gate_activation(const Tensor& z, GateMode mode);

/// Each of n modes is Sigmoid with probability p, Binary otherwise.
std::vector<GateMode> sample_gate_modes(double p, std::size_t n, Rng& rng);

/// Gate of one block for every sample: shape [B].
Tensor cgm_forward(const Tensor& x, ScaleParam scale, const CgmParams& params, GateMode mode,
                   bool use_feature_input);

/// One gated residual block. With skip_compute (Binary gates only) and a gate
/// that is uniform across the batch, F is not evaluated when the gate is 0.
Tensor gated_block_forward(const Tensor& x, ResidualBlockParams& block, const Tensor& gate, GateMode mode,
                           bool skip_compute, NormMode norm);

struct GateRecord {
  Tensor gates;                 // [B, N]
  std::vector<GateMode> modes;  // one per block

  std::size_t batch() const { return gates.dim(0); }
  std::size_t blocks() const { return gates.dim(1); }
  /// Number of open gates (value 1) of sample b. Only meaningful for Binary gates.
  double usage(std::size_t sample) const;
};

namespace policy {
/// Training: modes sampled per block with probability p.
struct Train {
  double p;
  Rng* rng;
};
/// Evaluation: every gate Binary.
struct Eval {};
/// Every gate uses the given mode.
struct Override {
  GateMode mode;
};
/// Caller-chosen mode per block.
struct Fixed {
  std::vector<GateMode> modes;
};
}  // namespace policy

using ModePolicy = std::variant<policy::Train, policy::Eval, policy::Override, policy::Fixed>;

struct ForwardOptions {
  NormMode norm = NormMode::Eval;
  bool skip_compute = true;  // honoured only for Binary gates
};

struct ForwardResult {
  Tensor logits;
  GateRecord record;
};

ForwardResult urnet_forward(const Tensor& x, ScaleParam scale, UrnetModel& model, const ModePolicy& policy,
                            const ForwardOptions& options = {});

/// Forward with an explicit keep-mask instead of CGM decisions. Dropped blocks
/// act as identity (through the shortcut).
Tensor masked_forward(const Tensor& x, UrnetModel& model, const std::vector<bool>& keep, NormMode norm);

/// Uniform random subset of round(S * N) blocks.
std::vector<bool> sample_random_keep_mask(ScaleParam scale, std::size_t n, Rng& rng);

/// Random-drop baseline: CGMs ignored, a random subset of blocks kept.
Tensor random_drop_forward(const Tensor& x, ScaleParam scale, UrnetModel& model, Rng& rng,
                           NormMode norm = NormMode::Eval);

}  // namespace urnet
