#include "urnet/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace urnet {

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

double grad_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& point, double eps) {
  const std::vector<double> base(point.data().begin(), point.data().end());
  auto leaf = Tensor::from(point.shape(), base, true);
  backward(fn(leaf));
  const auto analytic = leaf.grad();

  double worst = 0.0;
  auto probe = base;
  for (std::size_t i = 0; i < base.size(); ++i) {
    probe[i] = base[i] + eps;
    const double up = fn(Tensor::from(point.shape(), probe)).item();
    probe[i] = base[i] - eps;
    const double down = fn(Tensor::from(point.shape(), probe)).item();
    probe[i] = base[i];
    worst = std::max(worst, relative_error(analytic[i], (up - down) / (2.0 * eps)));
  }
  return worst;
}

double grad_check_params(const std::function<Tensor()>& loss_fn,
                         const std::vector<ParamCoordinate>& coordinates, double eps) {
  for (auto c : coordinates) c.param.zero_grad();
  backward(loss_fn());
  std::vector<double> analytic;
  analytic.reserve(coordinates.size());
  for (const auto& c : coordinates) analytic.push_back(c.param.grad()[c.index]);
  for (auto c : coordinates) c.param.zero_grad();

  double worst = 0.0;
  for (std::size_t k = 0; k < coordinates.size(); ++k) {
    auto param = coordinates[k].param;
    auto values = param.mutable_data();
    const auto i = coordinates[k].index;
    const double saved = values[i];
    values[i] = saved + eps;
    const double up = loss_fn().item();
    values[i] = saved - eps;
    const double down = loss_fn().item();
    values[i] = saved;
    worst = std::max(worst, relative_error(analytic[k], (up - down) / (2.0 * eps)));
  }
  return worst;
}

}  // namespace urnet
