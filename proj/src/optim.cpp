#include "retro/optim.hpp"

#include "retro/errors.hpp"

namespace retro {

Parameter::Parameter(std::string name, Tensor value, bool trainable, Kind kind)
    : name_(std::move(name)), tensor_(value.detach()), trainable_(trainable && kind == Kind::kWeight),
      kind_(kind) {
  tensor_.set_requires_grad(trainable_);
}

Parameter::Parameter(const Parameter& other)
    : name_(other.name_),
      tensor_(other.tensor_.detach()),
      trainable_(other.trainable_),
      kind_(other.kind_),
      momentum_(other.momentum_),
      ema_residual_(other.ema_residual_) {
  tensor_.set_requires_grad(trainable_);
}

Parameter& Parameter::operator=(const Parameter& other) {
  if (this != &other) {
    Parameter copy(other);
    *this = std::move(copy);
  }
  return *this;
}

void Parameter::set_trainable(bool trainable) {
  if (trainable && kind_ == Kind::kBuffer) {
    throw ContractError("buffer '" + name_ + "' cannot be made trainable");
  }
  trainable_ = trainable;
  tensor_.set_requires_grad(trainable);
}

void sgd_step(const ParameterList& params, const SgdOptions& options) {
  for (const Parameter* p : params) {
    if (p->trainable() && !p->tensor().has_grad()) {
      throw ContractError("sgd_step: trainable parameter '" + p->name() + "' has no gradient");
    }
  }
  const float lr = static_cast<float>(options.lr);
  const float mu = static_cast<float>(options.momentum);
  const float wd = static_cast<float>(options.weight_decay);
  for (Parameter* p : params) {
    if (!p->trainable()) continue;
    auto theta = p->mutable_values();
    auto grad = p->tensor().grad();
    auto& buffer = p->momentum_buffer();
    if (!buffer) buffer.emplace(theta.size(), 0.0f);
    auto& v = *buffer;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      v[i] = mu * v[i] + grad[i] + wd * theta[i];
      theta[i] -= lr * v[i];
    }
  }
}

void zero_grad(const ParameterList& params) {
  for (Parameter* p : params) p->tensor().clear_grad();
}

std::size_t count_trainable(const ConstParameterList& params) {
  std::size_t n = 0;
  for (const Parameter* p : params) {
    if (p->trainable()) n += p->numel();
  }
  return n;
}

}  // namespace retro
