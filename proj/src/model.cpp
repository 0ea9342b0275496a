#include "urnet/model.hpp"

#include <algorithm>
#include <cmath>

#include "urnet/errors.hpp"

namespace urnet {

ScaleParam::ScaleParam(double value) : value_(value) {
  if (!(value >= 0.0 && value <= 1.0)) {
    throw ContractError("scale parameter must lie in [0, 1], got " + std::to_string(value));
  }
}

const char* to_string(GateMode mode) { return mode == GateMode::Sigmoid ? "sigmoid" : "binary"; }

void ModelSpec::validate() const {
  if (in_channels == 0 || image_size == 0 || num_classes < 2 || blocks_per_stage == 0 ||
      stage_channels.empty() || reduction == 0) {
    throw ConfigError("model spec: sizes must be positive and num_classes >= 2");
  }
  if (std::any_of(stage_channels.begin(), stage_channels.end(), [](auto c) { return c == 0; })) {
    throw ConfigError("model spec: stage channels must be positive");
  }
  if (!(gate_training_probability >= 0.0 && gate_training_probability <= 1.0)) {
    throw ConfigError("model spec: gate training probability must lie in [0, 1]");
  }
  std::size_t size = image_size;
  for (std::size_t s = 1; s < stage_channels.size(); ++s) size = (size - 1) / 2 + 1;
  if (size < 1) throw ConfigError("model spec: image too small for the number of stages");
}

bool ModelSpec::same_architecture(const ModelSpec& o) const {
  return in_channels == o.in_channels && image_size == o.image_size && stage_channels == o.stage_channels &&
         blocks_per_stage == o.blocks_per_stage && num_classes == o.num_classes && reduction == o.reduction &&
         use_feature_input == o.use_feature_input;
}

Tensor ConvBn::forward(const Tensor& x, NormMode mode) {
  return batch_norm(conv2d(x, weight, stride, pad), gamma, shift, stats, mode);
}

Tensor ResidualBlockParams::residual(const Tensor& x, NormMode mode) {
  return conv2.forward(relu(conv1.forward(x, mode)), mode);
}

Tensor ResidualBlockParams::shortcut(const Tensor& x, NormMode mode) {
  return projection ? projection->forward(x, mode) : x;
}

std::size_t cgm_hidden_size(std::size_t channels, std::size_t reduction) {
  return (channels + 1 + reduction - 1) / reduction;
}

namespace {

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> values(shape_volume(shape));
  for (auto& v : values) v = dist(rng);
  return Tensor::from(std::move(shape), std::move(values), true);
}

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> values(shape_volume(shape));
  for (auto& v : values) v = dist(rng);
  return Tensor::from(std::move(shape), std::move(values), true);
}

ConvBn make_conv_bn(std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride, Rng& rng) {
  ConvBn layer;
  // He initialization for ReLU networks.
  layer.weight = normal_tensor({cout, cin, k, k}, std::sqrt(2.0 / static_cast<double>(cin * k * k)), rng);
  layer.gamma = Tensor::filled({cout}, 1.0, true);
  layer.shift = Tensor::zeros({cout}, true);
  layer.stats = BatchNormStats(cout);
  layer.stride = stride;
  layer.pad = k / 2;
  return layer;
}

// The output projection starts near zero so every gate opens at init
// through the +bias alone.
constexpr double kCgmOutputInitStd = 0.01;

CgmParams make_cgm(std::size_t channels, std::size_t reduction, double init_bias, Rng& rng) {
  CgmParams cgm;
  const auto hidden = cgm_hidden_size(channels, reduction);
  cgm.w1 = uniform_tensor({channels + 1, hidden}, std::sqrt(6.0 / static_cast<double>(channels + 1)), rng);
  cgm.b1 = Tensor::zeros({hidden}, true);
  cgm.w2 = normal_tensor({hidden, 1}, kCgmOutputInitStd, rng);
  cgm.b2 = Tensor::filled({1}, init_bias, true);
  return cgm;
}

}  // namespace

UrnetModel::UrnetModel(ModelSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  Rng rng(spec_.init_seed);
  stem_ = make_conv_bn(spec_.in_channels, spec_.stage_channels.front(), 3, 1, rng);
  std::size_t channels = spec_.stage_channels.front();
  for (std::size_t s = 0; s < spec_.stage_channels.size(); ++s) {
    const auto out = spec_.stage_channels[s];
    for (std::size_t i = 0; i < spec_.blocks_per_stage; ++i) {
      const std::size_t stride = (s > 0 && i == 0) ? 2 : 1;
      ResidualBlockParams block;
      block.conv1 = make_conv_bn(channels, out, 3, stride, rng);
      block.conv2 = make_conv_bn(out, out, 3, 1, rng);
      if (stride != 1 || channels != out) block.projection = make_conv_bn(channels, out, 1, stride, rng);
      cgms_.push_back(make_cgm(channels, spec_.reduction, spec_.cgm_init_bias, rng));
      blocks_.push_back(std::move(block));
      channels = out;
    }
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
  head_weight_ = uniform_tensor({channels, spec_.num_classes}, bound, rng);
  head_bias_ = uniform_tensor({spec_.num_classes}, bound, rng);
}

void UrnetModel::set_gate_training_probability(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("gate training probability must lie in [0, 1]");
  spec_.gate_training_probability = p;
}

std::vector<NamedParam> UrnetModel::parameters() {
  std::vector<NamedParam> out;
  auto add_conv_bn = [&out](const std::string& prefix, ConvBn& layer) {
    out.push_back({prefix + ".weight", layer.weight, ParamGroup::Backbone});
    out.push_back({prefix + ".gamma", layer.gamma, ParamGroup::Backbone});
    out.push_back({prefix + ".shift", layer.shift, ParamGroup::Backbone});
  };
  add_conv_bn("stem", stem_);
  for (std::size_t n = 0; n < blocks_.size(); ++n) {
    const auto prefix = "block" + std::to_string(n);
    add_conv_bn(prefix + ".conv1", blocks_[n].conv1);
    add_conv_bn(prefix + ".conv2", blocks_[n].conv2);
    if (blocks_[n].projection) add_conv_bn(prefix + ".projection", *blocks_[n].projection);
  }
  out.push_back({"head.weight", head_weight_, ParamGroup::Backbone});
  out.push_back({"head.bias", head_bias_, ParamGroup::Backbone});
  for (std::size_t n = 0; n < cgms_.size(); ++n) {
    const auto prefix = "cgm" + std::to_string(n);
    out.push_back({prefix + ".w1", cgms_[n].w1, ParamGroup::Cgm});
    out.push_back({prefix + ".b1", cgms_[n].b1, ParamGroup::Cgm});
    out.push_back({prefix + ".w2", cgms_[n].w2, ParamGroup::Cgm});
    out.push_back({prefix + ".b2", cgms_[n].b2, ParamGroup::Cgm});
  }
  return out;
}

std::vector<NamedBuffer> UrnetModel::buffers() {
  std::vector<NamedBuffer> out;
  auto add = [&out](const std::string& prefix, ConvBn& layer) {
    out.push_back({prefix + ".running_mean", &layer.stats.running_mean});
    out.push_back({prefix + ".running_var", &layer.stats.running_var});
  };
  add("stem", stem_);
  for (std::size_t n = 0; n < blocks_.size(); ++n) {
    const auto prefix = "block" + std::to_string(n);
    add(prefix + ".conv1", blocks_[n].conv1);
    add(prefix + ".conv2", blocks_[n].conv2);
    if (blocks_[n].projection) add(prefix + ".projection", *blocks_[n].projection);
  }
  return out;
}

void UrnetModel::set_trainable(ParamGroup group, bool trainable) {
  for (auto& p : parameters()) {
    if (p.group == group) p.tensor.set_requires_grad(trainable);
  }
}

void UrnetModel::zero_grad() {
  for (auto& p : parameters()) p.tensor.zero_grad();
}

Tensor gate_activation(const Tensor& z, GateMode mode) {
  if (mode == GateMode::Sigmoid) return sigmoid(z);
  std::vector<double> out(z.numel());
  const auto v = z.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] > 0.0 ? 1.0 : 0.0;
  return Tensor::from(z.shape(), std::move(out));
}

std::vector<GateMode> sample_gate_modes(double p, std::size_t n, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw ContractError("gate training probability must lie in [0, 1]");
  std::vector<GateMode> modes(n, GateMode::Binary);
  std::bernoulli_distribution sigmoid_draw(p);
  for (auto& m : modes) m = sigmoid_draw(rng) ? GateMode::Sigmoid : GateMode::Binary;
  return modes;
}

Tensor cgm_forward(const Tensor& x, ScaleParam scale, const CgmParams& params, GateMode mode,
                   bool use_feature_input) {
  if (x.rank() != 4 || x.dim(1) != params.channels()) {
    throw DimensionError("cgm_forward: input channel axis 1 (" +
                         std::to_string(x.rank() == 4 ? x.dim(1) : 0) + ") != CGM channels (" +
                         std::to_string(params.channels()) + ")");
  }
  const Tensor pooled = use_feature_input ? global_avg_pool(x) : Tensor::zeros({x.dim(0), x.dim(1)});
  const Tensor joint = append_constant_column(pooled, scale.value());
  const Tensor hidden = relu(affine(joint, params.w1, params.b1));
  const Tensor logit = affine(hidden, params.w2, params.b2);  // [B, 1]
  // Reinterpret [B, 1] as [B] without copying through the graph.
  const auto batch = x.dim(0);
  std::vector<double> z(logit.data().begin(), logit.data().end());
  Tensor flat = Tensor::make_result({batch}, std::move(z), "flatten", {logit},
                                    [logit](std::span<const double> g) { logit.accumulate_grad(g); });
  return gate_activation(flat, mode);
}

Tensor gated_block_forward(const Tensor& x, ResidualBlockParams& block, const Tensor& gate, GateMode mode,
                           bool skip_compute, NormMode norm) {
  if (skip_compute && mode != GateMode::Binary) {
    throw ContractError("gated_block_forward: skip_compute requires Binary gates");
  }
  if (gate.rank() != 1 || gate.dim(0) != x.dim(0)) {
    throw DimensionError("gated_block_forward: gate shape " + shape_to_string(gate.shape()) +
                         " does not match batch " + std::to_string(x.dim(0)));
  }
  if (skip_compute) {
    const auto g = gate.data();
    const bool uniform = std::all_of(g.begin(), g.end(), [&](double v) { return v == g[0]; });
    if (uniform && g[0] == 0.0) {
      if (!block.projection) return x;
      return relu(block.shortcut(x, norm));
    }
    if (uniform) return relu(add(block.shortcut(x, norm), block.residual(x, norm)));
  }
  return relu(add(block.shortcut(x, norm), scale_features(block.residual(x, norm), gate)));
}

double GateRecord::usage(std::size_t sample) const {
  const auto n = blocks();
  const auto g = gates.data();
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) sum += g[sample * n + j];
  return sum;
}

namespace {

std::vector<GateMode> resolve_modes(const ModePolicy& policy, std::size_t n) {
  return std::visit(
      [n](const auto& p) -> std::vector<GateMode> {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, policy::Train>) {
          return sample_gate_modes(p.p, n, *p.rng);
        } else if constexpr (std::is_same_v<P, policy::Eval>) {
          return std::vector<GateMode>(n, GateMode::Binary);
        } else if constexpr (std::is_same_v<P, policy::Override>) {
          return std::vector<GateMode>(n, p.mode);
        } else {
          if (p.modes.size() != n) {
            throw ContractError("fixed gate policy lists " + std::to_string(p.modes.size()) + " modes for " +
                                std::to_string(n) + " blocks");
          }
          return p.modes;
        }
      },
      policy);
}

Tensor head_forward(const Tensor& features, UrnetModel& model) {
  return affine(global_avg_pool(features), model.head_weight(), model.head_bias());
}

}  // namespace

ForwardResult urnet_forward(const Tensor& x, ScaleParam scale, UrnetModel& model, const ModePolicy& policy,
                            const ForwardOptions& options) {
  if (x.rank() != 4 || x.dim(1) != model.spec().in_channels) {
    throw DimensionError("urnet_forward: expected input [B," + std::to_string(model.spec().in_channels) +
                         ",H,W], got " + shape_to_string(x.shape()));
  }
  const auto n = model.num_blocks();
  auto modes = resolve_modes(policy, n);
  Tensor h = relu(model.stem().forward(x, options.norm));
  std::vector<Tensor> gates;
  gates.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Tensor gate = cgm_forward(h, scale, model.cgms()[i], modes[i], model.use_feature_input());
    const bool skip = options.skip_compute && modes[i] == GateMode::Binary;
    h = gated_block_forward(h, model.blocks()[i], gate, modes[i], skip, options.norm);
    gates.push_back(std::move(gate));
  }
  return {head_forward(h, model), GateRecord{stack_columns(gates), std::move(modes)}};
}

Tensor masked_forward(const Tensor& x, UrnetModel& model, const std::vector<bool>& keep, NormMode norm) {
  if (keep.size() != model.num_blocks()) {
    throw ContractError("keep mask has " + std::to_string(keep.size()) + " entries for " +
                        std::to_string(model.num_blocks()) + " blocks");
  }
  const auto batch = x.dim(0);
  Tensor h = relu(model.stem().forward(x, norm));
  for (std::size_t i = 0; i < keep.size(); ++i) {
    const Tensor gate = Tensor::filled({batch}, keep[i] ? 1.0 : 0.0);
    h = gated_block_forward(h, model.blocks()[i], gate, GateMode::Binary, true, norm);
  }
  return head_forward(h, model);
}

std::vector<bool> sample_random_keep_mask(ScaleParam scale, std::size_t n, Rng& rng) {
  const auto kept = static_cast<std::size_t>(std::lround(scale.value() * static_cast<double>(n)));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<bool> keep(n, false);
  for (std::size_t i = 0; i < kept; ++i) keep[order[i]] = true;
  return keep;
}

Tensor random_drop_forward(const Tensor& x, ScaleParam scale, UrnetModel& model, Rng& rng, NormMode norm) {
  return masked_forward(x, model, sample_random_keep_mask(scale, model.num_blocks(), rng), norm);
}

}  // namespace urnet
