#pragma once

// Dense tensors with tape-based reverse-mode differentiation.
//
// A BasicTensor is a handle onto a shared node holding shape, data and an
// optional gradient. Operations (see ops.hpp) create new nodes and, when any
// input requires a gradient and recording is enabled, remember their inputs
// and an adjoint closure. backward() collects every node reachable from the
// loss into a ComputationTape ordered by execution and replays the adjoints in
// reverse.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace deltaroute {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// True while operations should record adjoints (thread-local).
bool grad_recording_enabled();

/// Disables adjoint recording for the current thread within its scope.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename Scalar>
struct TensorNode {
  Shape shape;
  std::vector<Scalar> data;
  std::vector<Scalar> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::uint64_t sequence = 0;  // execution order on the recording thread
  std::vector<std::shared_ptr<TensorNode>> inputs;
  std::function<void(TensorNode&)> adjoint;

  bool is_leaf() const { return !adjoint; }
  /// Returns the gradient buffer, allocating zeros on first use.
  std::vector<Scalar>& grad_buffer();
};

template <typename Scalar>
class BasicTensor {
 public:
  using Node = TensorNode<Scalar>;

  BasicTensor() = default;

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, Scalar value, bool requires_grad = false);
  static BasicTensor from_data(Shape shape, std::vector<Scalar> data, bool requires_grad = false);
  static BasicTensor scalar(Scalar value, bool requires_grad = false);

  /// Wraps an operation result. Inputs and adjoint are kept only when some
  /// input requires a gradient and recording is enabled.
  static BasicTensor from_op(Shape shape, std::vector<Scalar> data,
                             std::vector<std::shared_ptr<Node>> inputs,
                             std::function<void(Node&)> adjoint);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const Scalar> data() const;
  /// Direct write access for leaves (optimizers, checkpoint loading).
  std::span<Scalar> mutable_data();
  std::vector<Scalar> to_vector() const;
  Scalar item() const;
  Scalar operator[](std::size_t flat_index) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const Scalar> grad() const;
  std::span<Scalar> mutable_grad();
  void zero_grad();

  /// New leaf sharing no graph with this tensor.
  BasicTensor detach() const;
  /// Deep copy of the data as a fresh leaf with the same requires_grad flag.
  BasicTensor clone() const;

  /// Reverse pass from a scalar. Leaf gradients accumulate.
  void backward() const;

  const std::shared_ptr<Node>& node() const { return node_; }
  bool same_node(const BasicTensor& other) const { return node_ == other.node_; }

 private:
  explicit BasicTensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

/// Execution-ordered record of the operations reachable from a root.
template <typename Scalar>
class ComputationTape {
 public:
  using Node = TensorNode<Scalar>;

  static ComputationTape record(const BasicTensor<Scalar>& root);

  /// Runs each adjoint from last executed to first.
  void replay_adjoints() const;
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

 private:
  std::vector<std::shared_ptr<Node>> entries_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

extern template struct TensorNode<float>;
extern template struct TensorNode<double>;
extern template class BasicTensor<float>;
extern template class BasicTensor<double>;
extern template class ComputationTape<float>;
extern template class ComputationTape<double>;

}  // namespace deltaroute
