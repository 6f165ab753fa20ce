#include "deltaroute/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "deltaroute/errors.hpp"

namespace deltaroute {

namespace {

thread_local bool t_grad_recording = true;
thread_local std::uint64_t t_sequence = 0;

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

bool grad_recording_enabled() { return t_grad_recording; }

NoGradGuard::NoGradGuard() : previous_(t_grad_recording) { t_grad_recording = false; }
NoGradGuard::~NoGradGuard() { t_grad_recording = previous_; }

template <typename Scalar>
std::vector<Scalar>& TensorNode<Scalar>::grad_buffer() {
  if (grad.size() != data.size()) grad.assign(data.size(), Scalar(0));
  return grad;
}

template <typename Scalar>
BasicTensor<Scalar> BasicTensor<Scalar>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), Scalar(0), requires_grad);
}

template <typename Scalar>
BasicTensor<Scalar> BasicTensor<Scalar>::full(Shape shape, Scalar value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<Scalar>(n, value), requires_grad);
}

template <typename Scalar>
BasicTensor<Scalar> BasicTensor<Scalar>::from_data(Shape shape, std::vector<Scalar> data,
                                                   bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_to_string(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  node->sequence = t_sequence++;
  return BasicTensor(std::move(node));
}

template <typename Scalar>
BasicTensor<Scalar> BasicTensor<Scalar>::scalar(Scalar value, bool requires_grad) {
  return from_data({}, {value}, requires_grad);
}

template <typename Scalar>
BasicTensor<Scalar> BasicTensor<Scalar>::from_op(Shape shape, std::vector<Scalar> data,
                                                 std::vector<std::shared_ptr<Node>> inputs,
                                                 std::function<void(Node&)> adjoint) {
  auto result = from_data(std::move(shape), std::move(data), false);
  if (!t_grad_recording) return result;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const auto& in) { return in && in->requires_grad; });
  if (!any) return result;
  result.node_->requires_grad = true;
  result.node_->inputs = std::move(inputs);
  result.node_->adjoint = std::move(adjoint);
  return result;
}

template <typename Scalar>
const Shape& BasicTensor<Scalar>::shape() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->shape;
}

template <typename Scalar>
std::size_t BasicTensor<Scalar>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_to_string(s));
  }
  return s[axis];
}

template <typename Scalar>
std::size_t BasicTensor<Scalar>::numel() const {
  return shape_numel(shape());
}

template <typename Scalar>
std::span<const Scalar> BasicTensor<Scalar>::data() const {
  shape();
  return node_->data;
}

template <typename Scalar>
std::span<Scalar> BasicTensor<Scalar>::mutable_data() {
  shape();
  return node_->data;
}

template <typename Scalar>
std::vector<Scalar> BasicTensor<Scalar>::to_vector() const {
  auto d = data();
  return {d.begin(), d.end()};
}

template <typename Scalar>
Scalar BasicTensor<Scalar>::item() const {
  if (numel() != 1) {
    throw ContractError("item() on tensor of shape " + shape_to_string(shape()));
  }
  return node_->data[0];
}

template <typename Scalar>
Scalar BasicTensor<Scalar>::operator[](std::size_t flat_index) const {
  return data()[flat_index];
}

template <typename Scalar>
bool BasicTensor<Scalar>::requires_grad() const {
  return node_ && node_->requires_grad;
}

template <typename Scalar>
void BasicTensor<Scalar>::set_requires_grad(bool flag) {
  shape();
  if (!node_->is_leaf()) throw ContractError("requires_grad can only be set on leaves");
  node_->requires_grad = flag;
}

template <typename Scalar>
bool BasicTensor<Scalar>::has_grad() const {
  return node_ && node_->grad.size() == node_->data.size() && !node_->data.empty();
}

template <typename Scalar>
std::span<const Scalar> BasicTensor<Scalar>::grad() const {
  shape();
  return node_->grad_buffer();
}

template <typename Scalar>
std::span<Scalar> BasicTensor<Scalar>::mutable_grad() {
  shape();
  return node_->grad_buffer();
}

template <typename Scalar>
void BasicTensor<Scalar>::zero_grad() {
  if (node_) std::fill(node_->grad.begin(), node_->grad.end(), Scalar(0));
}

template <typename Scalar>
BasicTensor<Scalar> BasicTensor<Scalar>::detach() const {
  return from_data(shape(), node_->data, false);
}

template <typename Scalar>
BasicTensor<Scalar> BasicTensor<Scalar>::clone() const {
  return from_data(shape(), node_->data, node_->requires_grad);
}

template <typename Scalar>
void BasicTensor<Scalar>::backward() const {
  if (numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " +
                        shape_to_string(shape()));
  }
  if (!node_->requires_grad) {
    throw ContractError("backward() on a tensor that does not require a gradient");
  }
  auto tape = ComputationTape<Scalar>::record(*this);
  node_->grad_buffer()[0] += Scalar(1);
  tape.replay_adjoints();
}

template <typename Scalar>
ComputationTape<Scalar> ComputationTape<Scalar>::record(const BasicTensor<Scalar>& root) {
  ComputationTape tape;
  std::unordered_set<const Node*> seen;
  std::vector<std::shared_ptr<Node>> pending{root.node()};
  while (!pending.empty()) {
    auto node = std::move(pending.back());
    pending.pop_back();
    if (!node || !node->requires_grad || !seen.insert(node.get()).second) continue;
    if (node->is_leaf()) continue;
    for (const auto& in : node->inputs) pending.push_back(in);
    // Interior gradients start fresh on every replay.
    std::fill(node->grad.begin(), node->grad.end(), Scalar(0));
    tape.entries_.push_back(std::move(node));
  }
  std::sort(tape.entries_.begin(), tape.entries_.end(),
            [](const auto& a, const auto& b) { return a->sequence < b->sequence; });
  return tape;
}

template <typename Scalar>
void ComputationTape<Scalar>::replay_adjoints() const {
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    Node& node = **it;
    if (node.grad.empty()) continue;
    node.adjoint(node);
  }
}

template struct TensorNode<float>;
template struct TensorNode<double>;
template class BasicTensor<float>;
template class BasicTensor<double>;
template class ComputationTape<float>;
template class ComputationTape<double>;

}  // namespace deltaroute
