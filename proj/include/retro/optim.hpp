#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "retro/tensor.hpp"

namespace retro {

/// A named, owned tensor of a model. Copying a Parameter deep-copies its
/// storage. Buffers (batchnorm running statistics) are Parameters that are
/// never trainable and never receive gradients.
class Parameter {
 public:
  enum class Kind { kWeight, kBuffer };

  Parameter() = default;
  Parameter(std::string name, Tensor value, bool trainable = true, Kind kind = Kind::kWeight);
  Parameter(const Parameter& other);
  Parameter& operator=(const Parameter& other);
  Parameter(Parameter&&) noexcept = default;
  Parameter& operator=(Parameter&&) noexcept = default;

  const std::string& name() const { return name_; }
  void set_name(std::string name) { name_ = std::move(name); }

  Tensor& tensor() { return tensor_; }
  const Tensor& tensor() const { return tensor_; }
  std::span<const float> values() const { return tensor_.data(); }
  std::span<float> mutable_values() { return tensor_.mutable_data(); }
  std::size_t numel() const { return tensor_.numel(); }

  bool trainable() const { return trainable_; }
  void set_trainable(bool trainable);
  Kind kind() const { return kind_; }
  bool is_buffer() const { return kind_ == Kind::kBuffer; }

  std::optional<std::vector<float>>& momentum_buffer() { return momentum_; }
  const std::optional<std::vector<float>>& momentum_buffer() const { return momentum_; }

  // Rounding remainder of EMA updates: the running average is value + residual,
  // so f32 storage does not accumulate error over thousands of steps.
  std::optional<std::vector<float>>& ema_residual() { return ema_residual_; }
  const std::optional<std::vector<float>>& ema_residual() const { return ema_residual_; }

 private:
  std::string name_;
  Tensor tensor_;
  bool trainable_ = true;
  Kind kind_ = Kind::kWeight;
  std::optional<std::vector<float>> momentum_;
  std::optional<std::vector<float>> ema_residual_;
};

using ParameterList = std::vector<Parameter*>;
using ConstParameterList = std::vector<const Parameter*>;

struct SgdOptions {
  double lr = 0.03;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

// v <- momentum * v + grad + weight_decay * theta; theta <- theta - lr * v.
// Frozen parameters and buffers are skipped. Throws ContractError when a
// trainable parameter has no gradient.
void sgd_step(const ParameterList& params, const SgdOptions& options);

void zero_grad(const ParameterList& params);

std::size_t count_trainable(const ConstParameterList& params);

}  // namespace retro
