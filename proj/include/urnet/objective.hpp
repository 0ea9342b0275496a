#pragma once

#include <span>

#include "urnet/model.hpp"
#include "urnet/tensor.hpp"

namespace urnet {

struct LossBreakdown {
  double total = 0.0;
  double classification = 0.0;
  double scale = 0.0;
  double beta = 0.0;
};

/// Mean over samples of (mean_n gate_n - S)^2. Only gates that carry a
/// gradient (Sigmoid mode) receive one.
Tensor scale_loss(const GateRecord& record, ScaleParam scale);

struct TotalLoss {
  Tensor loss;
  LossBreakdown breakdown;
};

/// classification + beta * scale_loss.
TotalLoss total_loss(const Tensor& logits, std::span<const int> labels, const GateRecord& record,
                     ScaleParam scale, double beta);

}  // namespace urnet
