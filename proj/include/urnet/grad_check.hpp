#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "urnet/tensor.hpp"

namespace urnet {

/// |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
double relative_error(double analytic, double numeric);

/// Compares backward() of `fn` at `point` against central differences and
/// returns the worst relative error over all coordinates. `fn` must return a
/// scalar tensor.
double grad_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& point,
                  double eps = 1e-5);

/// Same comparison for a loss over existing parameter tensors. Each listed
/// coordinate is perturbed in place and restored afterwards. Gradients on the
/// parameters are cleared before and after.
struct ParamCoordinate {
  Tensor param;
  std::size_t index;
};
double grad_check_params(const std::function<Tensor()>& loss_fn,
                         const std::vector<ParamCoordinate>& coordinates, double eps = 1e-5);

}  // namespace urnet
