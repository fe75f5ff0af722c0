#include "retro/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>

#include "retro/errors.hpp"

namespace retro {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor() : impl_(std::make_shared<detail::TensorImpl>()) {
  impl_->shape = {};
  impl_->data = {0.0f};
}

Tensor::Tensor(Shape shape, std::vector<float> data, bool requires_grad)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(data.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<float>(n, 0.0f), requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<float>(n, value), requires_grad);
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return Tensor({}, {value}, requires_grad);
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape()));
  }
  return impl_->shape[axis];
}

float Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item() on tensor of shape " + shape_str(shape()));
  }
  return impl_->data[0];
}

void Tensor::set_requires_grad(bool value) {
  if (impl_->node_id) {
    throw ContractError("requires_grad can only be changed on leaf tensors");
  }
  impl_->requires_grad = value;
  if (!value) impl_->grad.clear();
}

std::span<float> Tensor::grad_buffer() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
  return impl_->grad;
}

void Tensor::clear_grad() {
  impl_->grad.clear();
  impl_->grad.shrink_to_fit();
}

bool Tensor::all_finite() const {
  return std::all_of(impl_->data.begin(), impl_->data.end(),
                     [](float v) { return std::isfinite(v); });
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data, false); }

Tensor Tensor::clone() const {
  return Tensor(impl_->shape, impl_->data, impl_->requires_grad && !impl_->node_id);
}

namespace {
std::uint64_t next_tape_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1);
}
}  // namespace

Tape::Tape(Mode mode) : mode_(mode), id_(next_tape_id()) {}

bool Tape::needs_grad(std::initializer_list<const Tensor*> inputs) const {
  if (!recording()) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

void Tape::record(std::initializer_list<const Tensor*> inputs, Tensor& output,
                  std::function<void()> backward) {
  if (consumed_) {
    throw ContractError("cannot record on a tape after backward(); reset() it first");
  }
  Node node;
  for (const Tensor* in : inputs) {
    const auto& impl = *in->impl_;
    if (impl.node_id) {
      if (impl.tape_id != id_) {
        throw ContractError("input tensor was produced on a different tape");
      }
      node.inputs.push_back(*impl.node_id);
    }
  }
  const std::size_t id = nodes_.size();
  output.impl_->requires_grad = true;
  output.impl_->node_id = id;
  output.impl_->tape_id = id_;
  node.output = output;
  node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) {
    throw ContractError("backward() already ran on this tape; call reset() before reusing it");
  }
  if (loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  const auto& impl = *loss.impl_;
  if (!impl.node_id || impl.tape_id != id_) {
    throw ContractError("loss was not produced on this tape or does not require grad");
  }
  consumed_ = true;
  Tensor seed = loss;
  seed.grad_buffer()[0] = 1.0f;
  for (std::size_t i = *impl.node_id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (node.output.has_grad()) node.backward();
    // Intermediate storage is no longer needed once the node has run.
    node.backward = nullptr;
  }
}

void Tape::reset() {
  nodes_.clear();
  consumed_ = false;
  id_ = next_tape_id();
}

}  // namespace retro
