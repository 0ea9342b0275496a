#include "urnet/objective.hpp"

#include "urnet/errors.hpp"
#include "urnet/ops.hpp"

namespace urnet {

Tensor scale_loss(const GateRecord& record, ScaleParam scale) {
  if (!record.gates.defined() || record.gates.rank() != 2) {
    throw ContractError("scale_loss: empty gate record");
  }
  const auto batch = record.batch(), n = record.blocks();
  const auto g = record.gates.data();
  const double target = scale.value();
  auto deviation = std::make_shared<std::vector<double>>(batch);
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) sum += g[b * n + j];
    const double d = sum / static_cast<double>(n) - target;
    (*deviation)[b] = d;
    total += d * d;
  }
  const Tensor gates = record.gates;
  auto backward = [gates, deviation, batch, n](std::span<const double> grad) {
    std::vector<double> gg(batch * n);
    const double factor = 2.0 * grad[0] / (static_cast<double>(n) * static_cast<double>(batch));
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t j = 0; j < n; ++j) gg[b * n + j] = factor * (*deviation)[b];
    }
    gates.accumulate_grad(gg);
  };
  return Tensor::make_result({1}, {total / static_cast<double>(batch)}, "scale_loss", {gates},
                             std::move(backward));
}

TotalLoss total_loss(const Tensor& logits, std::span<const int> labels, const GateRecord& record,
                     ScaleParam scale, double beta) {
  if (!(beta >= 0.0)) throw ContractError("total_loss: beta must be non-negative");
  const Tensor classification = softmax_cross_entropy(logits, labels);
  const Tensor scale_term = scale_loss(record, scale);
  Tensor loss = beta == 0.0 ? classification : add(classification, urnet::scale(scale_term, beta));
  LossBreakdown breakdown{loss.item(), classification.item(), scale_term.item(), beta};
  return {std::move(loss), breakdown};
}

}  // namespace urnet
