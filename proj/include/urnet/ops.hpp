#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "urnet/tensor.hpp"

namespace urnet {

/// 2-D convolution, NCHW input and [Cout, C, k, k] weight, no bias.
Tensor conv2d(const Tensor& input, const Tensor& weight, std::size_t stride, std::size_t pad);

/// input[B, Din] * weight[Din, Dout] + bias[Dout].
Tensor affine(const Tensor& input, const Tensor& weight, const Tensor& bias);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
double stable_sigmoid(double x);

/// Same-shape elementwise sum.
Tensor add(const Tensor& a, const Tensor& b);
/// a * factor; the factor is a constant, only `a` is differentiated.
Tensor scale(const Tensor& a, double factor);

/// Multiplies every element of sample b's feature map by gate[b].
Tensor scale_features(const Tensor& features, const Tensor& gate);

/// [B, C, H, W] -> [B, C], mean over the spatial plane.
Tensor global_avg_pool(const Tensor& input);

/// Appends one constant column holding `value` to a [B, C] tensor.
Tensor append_constant_column(const Tensor& input, double value);

/// Stacks N tensors of shape [B] into one [B, N] tensor, column n from input n.
Tensor stack_columns(const std::vector<Tensor>& columns);

/// Per-channel running statistics owned by a batch-norm layer.
struct BatchNormStats {
  std::vector<double> running_mean;
  std::vector<double> running_var;

  explicit BatchNormStats(std::size_t channels = 0)
      : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

enum class NormMode { Train, Eval };

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Batch normalization over (B, H, W) per channel. Train mode normalizes by the
/// batch statistics and folds them into `stats`; eval mode reads `stats`.
Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& shift,
                  BatchNormStats& stats, NormMode mode);

/// Mean over the batch of -log softmax(logits)[label].
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

}  // namespace urnet
