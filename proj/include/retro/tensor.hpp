#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace retro {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until a gradient is materialized
  bool requires_grad = false;
  std::optional<std::size_t> node_id;
  std::uint64_t tape_id = 0;
};
}  // namespace detail

/// Dense row-major f32 tensor. Copies share storage; use clone() or detach()
/// for an independent copy.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<float> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const float> data() const { return impl_->data; }
  std::span<float> mutable_data() { return impl_->data; }
  float item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value);

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const float> grad() const { return impl_->grad; }
  // Zero-initialized on first access.
  std::span<float> grad_buffer() const;
  void clear_grad();

  std::optional<std::size_t> node_id() const { return impl_->node_id; }

  bool all_finite() const;

  // Deep copy with no gradient state.
  Tensor detach() const;
  // Deep copy that keeps the requires_grad flag but drops tape linkage.
  Tensor clone() const;

  bool shares_storage_with(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  friend class Tape;
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Define-by-run record of differentiable operations. One tape per forward
/// pass; a tape is single-threaded.
class Tape {
 public:
  enum class Mode { kRecord, kNoGrad };

  explicit Tape(Mode mode = Mode::kRecord);
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  static Tape no_grad() { return Tape(Mode::kNoGrad); }

  bool recording() const { return mode_ == Mode::kRecord; }

  // True when an op over `inputs` must be recorded.
  bool needs_grad(std::initializer_list<const Tensor*> inputs) const;

  // Appends a node producing `output`. The backward rule reads output.grad()
  // and accumulates into the grad buffers of inputs that require grad.
  void record(std::initializer_list<const Tensor*> inputs, Tensor& output,
              std::function<void()> backward);

  // Seeds d(loss)/d(loss) = 1 and runs every node once in reverse order.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }
  void reset();

 private:
  struct Node {
    std::vector<std::size_t> inputs;  // node ids of non-leaf inputs
    Tensor output;
    std::function<void()> backward;
  };

  Mode mode_;
  std::uint64_t id_;
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

}  // namespace retro
