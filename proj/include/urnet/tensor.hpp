#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace urnet {

using Shape = std::vector<std::size_t>;

std::size_t shape_volume(const Shape& shape);
std::string shape_to_string(const Shape& shape);

class Tensor;

namespace detail {

struct TensorImpl;

/// One recorded operation: the inputs it read and how to push the output
/// gradient back into them.
struct OpRecord {
  std::string name;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  // Receives the gradient of the output; accumulates into the inputs' grads.
  std::function<void(std::span<const double> out_grad)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::unique_ptr<OpRecord> creator;  // null for leaves

  std::vector<double>& grad_buffer();
};

}  // namespace detail

/// Dense row-major tensor of 64-bit floats with an optional gradient.
///
/// Copies are shallow: two Tensor handles may name the same storage, which is
/// how parameters are shared between the model and the graph built during a
/// forward pass. Values are fixed after creation; only parameters are updated
/// in place, by optimizers, through mutable_data().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, double value, bool requires_grad = false);
  /// Throws NonFiniteError if any value is NaN or infinite.
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const { return data().size(); }

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  /// Gradient accumulated so far; zeros when nothing has been accumulated.
  std::vector<double> grad() const;
  std::span<const double> grad_view() const;
  void zero_grad();

  bool is_leaf() const;
  /// Copies the values into a fresh leaf that is not attached to any graph.
  Tensor detach() const;

  /// Builds a tensor produced by an operation. Records the operation only when
  /// some input requires a gradient.
  static Tensor make_result(Shape shape, std::vector<double> values, std::string op_name,
                            const std::vector<Tensor>& inputs,
                            std::function<void(std::span<const double>)> backward);

  detail::TensorImpl* impl() const noexcept { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& shared_impl() const noexcept { return impl_; }

  /// Accumulates `values` into this tensor's gradient buffer.
  void accumulate_grad(std::span<const double> values) const;

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
/// calls; intermediate gradients are rebuilt on every call.
void backward(const Tensor& loss);

/// Operations reachable from `root`, inputs before outputs. Each recorded
/// operation appears once.
std::vector<detail::TensorImpl*> topological_order(const Tensor& root);

bool all_finite(std::span<const double> values);

}  // namespace urnet
