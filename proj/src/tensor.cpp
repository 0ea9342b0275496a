#include "urnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "urnet/errors.hpp"

namespace urnet {

std::size_t shape_volume(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

namespace detail {

std::vector<double>& TensorImpl::grad_buffer() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  return grad;
}

}  // namespace detail

namespace {

std::shared_ptr<detail::TensorImpl> new_impl(Shape shape, std::vector<double> values,
                                             bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_to_string(shape));
  }
  if (shape_volume(shape) != values.size()) {
    throw DimensionError("shape " + shape_to_string(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return impl;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return filled(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::filled(Shape shape, double value, bool requires_grad) {
  const auto n = shape_volume(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (!all_finite(values)) throw NonFiniteError("non-finite value in tensor construction");
  return Tensor(new_impl(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_to_string(impl_->shape));
  }
  return impl_->shape[axis];
}

std::span<const double> Tensor::data() const { return impl_->data; }
std::span<double> Tensor::mutable_data() { return impl_->data; }

double Tensor::item() const {
  if (impl_->data.size() != 1) {
    throw DimensionError("item() on tensor of shape " + shape_to_string(impl_->shape));
  }
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }
void Tensor::set_requires_grad(bool value) { impl_->requires_grad = value; }
bool Tensor::has_grad() const { return !impl_->grad.empty(); }

std::vector<double> Tensor::grad() const {
  if (impl_->grad.empty()) return std::vector<double>(impl_->data.size(), 0.0);
  return impl_->grad;
}

std::span<const double> Tensor::grad_view() const { return impl_->grad; }

void Tensor::zero_grad() { impl_->grad.clear(); }

bool Tensor::is_leaf() const { return impl_->creator == nullptr; }

Tensor Tensor::detach() const {
  return Tensor(new_impl(impl_->shape, impl_->data, false));
}

void Tensor::accumulate_grad(std::span<const double> values) const {
  auto& g = impl_->grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += values[i];
}

Tensor Tensor::make_result(Shape shape, std::vector<double> values, std::string op_name,
                           const std::vector<Tensor>& inputs,
                           std::function<void(std::span<const double>)> backward_fn) {
  if (!all_finite(values)) throw NonFiniteError("non-finite output from " + op_name);
  auto impl = new_impl(std::move(shape), std::move(values), false);
  const bool needs_grad = std::any_of(inputs.begin(), inputs.end(),
                                      [](const Tensor& t) { return t.requires_grad(); });
  if (needs_grad) {
    impl->requires_grad = true;
    auto record = std::make_unique<detail::OpRecord>();
    record->name = std::move(op_name);
    record->inputs.reserve(inputs.size());
    for (const auto& t : inputs) record->inputs.push_back(t.impl_);
    record->backward = std::move(backward_fn);
    impl->creator = std::move(record);
  }
  return Tensor(std::move(impl));
}

std::vector<detail::TensorImpl*> topological_order(const Tensor& root) {
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> visited;
  // Iterative post-order DFS; deep residual graphs would overflow a recursive walk.
  std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
  stack.emplace_back(root.impl(), 0);
  visited.insert(root.impl());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto* rec = node->creator.get();
    if (rec && next < rec->inputs.size()) {
      auto* child = rec->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }
  return order;
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw DimensionError("backward() needs a scalar loss, got shape " +
                         (loss.defined() ? shape_to_string(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) return;
  const auto order = topological_order(loss);
  for (auto* node : order) {
    if (node->creator) node->grad.assign(node->data.size(), 0.0);
  }
  loss.impl()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* node = *it;
    if (!node->creator) continue;
    node->creator->backward(node->grad);
  }
}

}  // namespace urnet
