#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "retro/ops.hpp"
#include "retro/optim.hpp"
#include "retro/tensor.hpp"

namespace retro::nn {

using BnMode = ops::BatchNormMode;

/// Stages of conv -> batchnorm -> relu. Stage i uses a kernels[i] square
/// kernel with padding (kernels[i] - strides[i]) / 2. The last stage's width
/// is the representation dimension D seen by the pooling layer.
struct EncoderConfig {
  std::vector<std::size_t> widths;
  std::vector<std::size_t> strides;
  std::vector<std::size_t> kernels;
  std::size_t in_channels = 3;

  std::size_t representation_dim() const;
  void validate() const;
  // [B,C,H,W] -> [B,D,h,w]
  Shape feature_shape(const Shape& input) const;

  static EncoderConfig desk_student() { return {{16, 32, 64}, {4, 2, 1}, {4, 4, 3}, 3}; }
  static EncoderConfig desk_teacher() { return {{32, 64, 128}, {4, 2, 1}, {4, 4, 3}, 3}; }
};

struct HeadConfig {
  std::size_t in_dim = 0;
  std::size_t hidden_dim = 0;
  std::size_t out_dim = 128;
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
         std::size_t stride, std::size_t padding, std::mt19937_64& rng);

  Tensor forward(Tape& tape, const Tensor& x) const;
  void collect(ParameterList& out) { out.push_back(&weight); }

  Parameter weight;
  std::size_t stride = 1;
  std::size_t padding = 0;
};

class BatchNorm {
 public:
  BatchNorm() = default;
  BatchNorm(const std::string& name, std::size_t channels);

  Tensor forward(Tape& tape, const Tensor& x, BnMode mode);
  void collect(ParameterList& out);

  Parameter gamma, beta, running_mean, running_var;
};

class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng);

  Tensor forward(Tape& tape, const Tensor& x) const;
  void collect(ParameterList& out);
  std::size_t in_dim() const { return weight.tensor().dim(1); }
  std::size_t out_dim() const { return weight.tensor().dim(0); }

  Parameter weight, bias;
};

class Encoder {
 public:
  Encoder() = default;
  Encoder(const EncoderConfig& config, std::mt19937_64& rng);

  Tensor forward(Tape& tape, const Tensor& x, BnMode mode);
  void collect(ParameterList& out);
  const EncoderConfig& config() const { return config_; }

 private:
  struct Stage {
    Conv2d conv;
    BatchNorm bn;
  };
  EncoderConfig config_;
  std::vector<Stage> stages_;
};

// 1x1 conv (no bias) -> batchnorm -> relu, applied to the pre-pool map.
class Adapter {
 public:
  Adapter() = default;
  Adapter(std::size_t in_channels, std::size_t out_channels, std::mt19937_64& rng);

  Tensor forward(Tape& tape, const Tensor& x, BnMode mode);
  void collect(ParameterList& out);
  std::size_t in_dim() const { return conv.weight.tensor().dim(1); }
  std::size_t out_dim() const { return conv.weight.tensor().dim(0); }

  Conv2d conv;
  BatchNorm bn;
};

// linear -> relu -> linear
class ProjectionHead {
 public:
  ProjectionHead() = default;
  ProjectionHead(const HeadConfig& config, std::mt19937_64& rng);

  Tensor forward(Tape& tape, const Tensor& pooled) const;
  void collect(ParameterList& out);
  std::size_t in_dim() const { return linear1.in_dim(); }
  std::size_t out_dim() const { return linear2.out_dim(); }
  std::size_t parameter_count() const;
  void set_trainable(bool trainable);
  bool trainable() const { return linear1.weight.trainable(); }

  Linear linear1, linear2;
};

/// Encoder, optional adapter, projection head. Parameter names are relative
/// ("encoder.stage0.conv.weight"); owners add their own prefix.
class Network {
 public:
  Network() = default;
  Network(Encoder encoder, std::optional<Adapter> adapter, ProjectionHead head);

  static Network build(const EncoderConfig& encoder, std::optional<std::size_t> adapter_out,
                       HeadConfig head, std::uint64_t seed);

  // Pre-pool map: encoder output, passed through the adapter when present.
  Tensor feature_map(Tape& tape, const Tensor& x, BnMode mode);
  // Pooled encoder output (adapter excluded): the representation used for evaluation.
  Tensor representation(Tape& tape, const Tensor& x, BnMode mode);
  // Unit-norm embedding: l2_normalize(head(pool(feature_map(x)))).
  Tensor embed(Tape& tape, const Tensor& x, BnMode mode);

  ParameterList parameters();
  ConstParameterList parameters() const;
  ParameterList encoder_parameters();

  Encoder& encoder() { return encoder_; }
  const Encoder& encoder() const { return encoder_; }
  std::optional<Adapter>& adapter() { return adapter_; }
  const std::optional<Adapter>& adapter() const { return adapter_; }
  ProjectionHead& head() { return head_; }
  const ProjectionHead& head() const { return head_; }

  std::size_t trainable_parameter_count() const;
  void set_all_trainable(bool trainable);

 private:
  Encoder encoder_;
  std::optional<Adapter> adapter_;
  ProjectionHead head_;
};

// Copies the teacher head into the student and freezes it. The student's
// pre-pool width (adapter output, or encoder output without one) must match
// the teacher head input.
void transplant_head(const Network& teacher, Network& student);

enum class DistillMode { kDisco, kRetro };

struct ForwardCounters {
  std::size_t student = 0;
  std::size_t teacher = 0;
  std::size_t mean = 0;
  std::size_t total() const { return student + teacher + mean; }
};

/// Frozen teacher, trainable student and its EMA copy (the mean student).
class ModelAssembly {
 public:
  // Student = encoder + adapter + transplanted teacher head (frozen).
  static ModelAssembly retro(Network teacher, const EncoderConfig& student_encoder,
                             std::uint64_t seed);
  // Student = encoder + adapter + its own trainable head of width head_hidden.
  static ModelAssembly disco(Network teacher, const EncoderConfig& student_encoder,
                             std::size_t head_hidden, std::uint64_t seed);

  DistillMode mode() const { return mode_; }

  Tensor forward_student(Tape& tape, const Tensor& v);
  Tensor forward_teacher(const Tensor& v);
  Tensor forward_mean(const Tensor& v);

  void transplant_head();
  void set_head_frozen(bool frozen);
  bool head_frozen() const { return !student_.head().trainable(); }

  Network& teacher() { return teacher_; }
  const Network& teacher() const { return teacher_; }
  Network& student() { return student_; }
  const Network& student() const { return student_; }
  Network& mean_student() { return mean_; }
  const Network& mean_student() const { return mean_; }

  ForwardCounters& counters() { return counters_; }
  const ForwardCounters& counters() const { return counters_; }

 private:
  ModelAssembly(DistillMode mode, Network teacher, Network student);

  DistillMode mode_ = DistillMode::kRetro;
  Network teacher_;
  Network student_;
  Network mean_;
  ForwardCounters counters_;
};

}  // namespace retro::nn
