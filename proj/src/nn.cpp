#include "retro/nn.hpp"

#include <cmath>

#include "retro/errors.hpp"

namespace retro::nn {

namespace {

Tensor uniform_tensor(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<float> values(shape_numel(shape));
  for (float& v : values) v = static_cast<float>(dist(rng));
  return Tensor(std::move(shape), std::move(values));
}

}  // namespace

std::size_t EncoderConfig::representation_dim() const {
  validate();
  return widths.back();
}

void EncoderConfig::validate() const {
  if (widths.empty()) throw ConfigError("encoder needs at least one stage");
  if (strides.size() != widths.size() || kernels.size() != widths.size()) {
    throw ConfigError("encoder has " + std::to_string(widths.size()) + " widths but " +
                      std::to_string(strides.size()) + " strides and " +
                      std::to_string(kernels.size()) + " kernels");
  }
  for (std::size_t i = 0; i < widths.size(); ++i) {
    if (widths[i] == 0 || strides[i] == 0 || kernels[i] == 0) {
      throw ConfigError("encoder stage " + std::to_string(i) + " has a zero width/stride/kernel");
    }
    if (kernels[i] < strides[i] || (kernels[i] - strides[i]) % 2 != 0) {
      throw ConfigError("encoder stage " + std::to_string(i) + ": kernel " +
                        std::to_string(kernels[i]) + " and stride " + std::to_string(strides[i]) +
                        " do not give a symmetric padding");
    }
  }
  if (in_channels == 0) throw ConfigError("encoder needs at least one input channel");
}

Shape EncoderConfig::feature_shape(const Shape& input) const {
  validate();
  if (input.size() != 4 || input[1] != in_channels) {
    throw DimensionError("encoder expects [B," + std::to_string(in_channels) + ",H,W], got " +
                         shape_str(input));
  }
  std::size_t h = input[2], w = input[3];
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const std::size_t pad = (kernels[i] - strides[i]) / 2;
    const std::size_t ph = h + 2 * pad, pw = w + 2 * pad;
    if (ph < kernels[i] || pw < kernels[i] || (ph - kernels[i]) % strides[i] ||
        (pw - kernels[i]) % strides[i]) {
      throw DimensionError("encoder stage " + std::to_string(i) + " cannot tile input " +
                           shape_str(input));
    }
    h = (ph - kernels[i]) / strides[i] + 1;
    w = (pw - kernels[i]) / strides[i] + 1;
  }
  return {input[0], widths.back(), h, w};
}

Conv2d::Conv2d(const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
               std::size_t stride_, std::size_t padding_, std::mt19937_64& rng)
    : weight(name + ".weight",
             uniform_tensor({out, in, kernel, kernel},
                            1.0 / std::sqrt(static_cast<double>(in * kernel * kernel)), rng)),
      stride(stride_),
      padding(padding_) {}

Tensor Conv2d::forward(Tape& tape, const Tensor& x) const {
  return ops::conv2d(tape, x, weight.tensor(), stride, padding);
}

BatchNorm::BatchNorm(const std::string& name, std::size_t channels)
    : gamma(name + ".gamma", Tensor::full({channels}, 1.0f)),
      beta(name + ".beta", Tensor::zeros({channels})),
      running_mean(name + ".running_mean", Tensor::zeros({channels}), false,
                   Parameter::Kind::kBuffer),
      running_var(name + ".running_var", Tensor::full({channels}, 1.0f), false,
                  Parameter::Kind::kBuffer) {}

Tensor BatchNorm::forward(Tape& tape, const Tensor& x, BnMode mode) {
  ops::BatchNormOptions options;
  options.mode = mode;
  return ops::batchnorm(tape, x, gamma.tensor(), beta.tensor(), running_mean.mutable_values(),
                        running_var.mutable_values(), options);
}

void BatchNorm::collect(ParameterList& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
  out.push_back(&running_mean);
  out.push_back(&running_var);
}

Linear::Linear(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  weight = Parameter(name + ".weight", uniform_tensor({out, in}, bound, rng));
  bias = Parameter(name + ".bias", uniform_tensor({out}, bound, rng));
}

Tensor Linear::forward(Tape& tape, const Tensor& x) const {
  return ops::linear(tape, x, weight.tensor(), bias.tensor());
}

void Linear::collect(ParameterList& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

Encoder::Encoder(const EncoderConfig& config, std::mt19937_64& rng) : config_(config) {
  config_.validate();
  std::size_t in = config_.in_channels;
  for (std::size_t i = 0; i < config_.widths.size(); ++i) {
    const std::string prefix = "encoder.stage" + std::to_string(i);
    const std::size_t k = config_.kernels[i], s = config_.strides[i];
    Stage stage{Conv2d(prefix + ".conv", in, config_.widths[i], k, s, (k - s) / 2, rng),
                BatchNorm(prefix + ".bn", config_.widths[i])};
    stages_.push_back(std::move(stage));
    in = config_.widths[i];
  }
}

Tensor Encoder::forward(Tape& tape, const Tensor& x, BnMode mode) {
  Tensor h = x;
  for (Stage& stage : stages_) {
    h = stage.conv.forward(tape, h);
    h = stage.bn.forward(tape, h, mode);
    h = ops::relu(tape, h);
  }
  return h;
}

void Encoder::collect(ParameterList& out) {
  for (Stage& stage : stages_) {
    stage.conv.collect(out);
    stage.bn.collect(out);
  }
}

Adapter::Adapter(std::size_t in_channels, std::size_t out_channels, std::mt19937_64& rng)
    : conv("adapter.conv", in_channels, out_channels, 1, 1, 0, rng),
      bn("adapter.bn", out_channels) {}

Tensor Adapter::forward(Tape& tape, const Tensor& x, BnMode mode) {
  Tensor h = conv.forward(tape, x);
  h = bn.forward(tape, h, mode);
  return ops::relu(tape, h);
}

void Adapter::collect(ParameterList& out) {
  conv.collect(out);
  bn.collect(out);
}

ProjectionHead::ProjectionHead(const HeadConfig& config, std::mt19937_64& rng) {
  if (config.in_dim == 0 || config.out_dim == 0) {
    throw ConfigError("projection head needs positive input and output dims");
  }
  const std::size_t hidden = config.hidden_dim == 0 ? config.in_dim : config.hidden_dim;
  linear1 = Linear("head.linear1", config.in_dim, hidden, rng);
  linear2 = Linear("head.linear2", hidden, config.out_dim, rng);
}

Tensor ProjectionHead::forward(Tape& tape, const Tensor& pooled) const {
  return linear2.forward(tape, ops::relu(tape, linear1.forward(tape, pooled)));
}

void ProjectionHead::collect(ParameterList& out) {
  linear1.collect(out);
  linear2.collect(out);
}

std::size_t ProjectionHead::parameter_count() const {
  return linear1.weight.numel() + linear1.bias.numel() + linear2.weight.numel() +
         linear2.bias.numel();
}

void ProjectionHead::set_trainable(bool trainable) {
  linear1.weight.set_trainable(trainable);
  linear1.bias.set_trainable(trainable);
  linear2.weight.set_trainable(trainable);
  linear2.bias.set_trainable(trainable);
}

Network::Network(Encoder encoder, std::optional<Adapter> adapter, ProjectionHead head)
    : encoder_(std::move(encoder)), adapter_(std::move(adapter)), head_(std::move(head)) {
  const std::size_t d = encoder_.config().representation_dim();
  if (adapter_ && adapter_->in_dim() != d) {
    throw DimensionError("adapter expects " + std::to_string(adapter_->in_dim()) +
                         " channels but encoder produces " + std::to_string(d));
  }
  const std::size_t pre_pool = adapter_ ? adapter_->out_dim() : d;
  if (head_.in_dim() != pre_pool) {
    throw DimensionError("projection head expects " + std::to_string(head_.in_dim()) +
                         " inputs but the pre-pool map has " + std::to_string(pre_pool) +
                         " channels");
  }
}

Network Network::build(const EncoderConfig& encoder, std::optional<std::size_t> adapter_out,
                       HeadConfig head, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Encoder enc(encoder, rng);
  std::optional<Adapter> adapter;
  const std::size_t d = encoder.representation_dim();
  if (adapter_out) adapter.emplace(d, *adapter_out, rng);
  if (head.in_dim == 0) head.in_dim = adapter_out.value_or(d);
  ProjectionHead proj(head, rng);
  return Network(std::move(enc), std::move(adapter), std::move(proj));
}

Tensor Network::feature_map(Tape& tape, const Tensor& x, BnMode mode) {
  Tensor z = encoder_.forward(tape, x, mode);
  if (adapter_) z = adapter_->forward(tape, z, mode);
  return z;
}

Tensor Network::representation(Tape& tape, const Tensor& x, BnMode mode) {
  return ops::global_avg_pool(tape, encoder_.forward(tape, x, mode));
}

Tensor Network::embed(Tape& tape, const Tensor& x, BnMode mode) {
  Tensor pooled = ops::global_avg_pool(tape, feature_map(tape, x, mode));
  return ops::l2_normalize(tape, head_.forward(tape, pooled));
}

ParameterList Network::parameters() {
  ParameterList out;
  encoder_.collect(out);
  if (adapter_) adapter_->collect(out);
  head_.collect(out);
  return out;
}

ConstParameterList Network::parameters() const {
  ParameterList mutable_list = const_cast<Network*>(this)->parameters();
  return ConstParameterList(mutable_list.begin(), mutable_list.end());
}

ParameterList Network::encoder_parameters() {
  ParameterList out;
  encoder_.collect(out);
  return out;
}

std::size_t Network::trainable_parameter_count() const { return count_trainable(parameters()); }

void Network::set_all_trainable(bool trainable) {
  for (Parameter* p : parameters()) {
    if (!p->is_buffer()) p->set_trainable(trainable);
  }
}

void transplant_head(const Network& teacher, Network& student) {
  const std::size_t pre_pool = student.adapter() ? student.adapter()->out_dim()
                                                 : student.encoder().config().representation_dim();
  if (pre_pool != teacher.head().in_dim()) {
    throw DimensionError("cannot transplant a head expecting " +
                         std::to_string(teacher.head().in_dim()) +
                         " inputs onto a student whose pre-pool map has " +
                         std::to_string(pre_pool) + " channels" +
                         (student.adapter() ? "" : " (no adapter)"));
  }
  student.head() = teacher.head();
  student.head().set_trainable(false);
}

ModelAssembly::ModelAssembly(DistillMode mode, Network teacher, Network student)
    : mode_(mode), teacher_(std::move(teacher)), student_(std::move(student)) {
  teacher_.set_all_trainable(false);
  mean_ = student_;
  mean_.set_all_trainable(false);
}

ModelAssembly ModelAssembly::retro(Network teacher, const EncoderConfig& student_encoder,
                                   std::uint64_t seed) {
  if (teacher.adapter()) throw ConfigError("teacher network must not carry an adapter");
  const HeadConfig head{teacher.head().in_dim(), teacher.head().linear1.out_dim(),
                        teacher.head().out_dim()};
  Network student = Network::build(student_encoder, teacher.head().in_dim(), head, seed);
  nn::transplant_head(teacher, student);
  return ModelAssembly(DistillMode::kRetro, std::move(teacher), std::move(student));
}

ModelAssembly ModelAssembly::disco(Network teacher, const EncoderConfig& student_encoder,
                                   std::size_t head_hidden, std::uint64_t seed) {
  if (teacher.adapter()) throw ConfigError("teacher network must not carry an adapter");
  const HeadConfig head{teacher.head().in_dim(), head_hidden, teacher.head().out_dim()};
  Network student = Network::build(student_encoder, teacher.head().in_dim(), head, seed);
  return ModelAssembly(DistillMode::kDisco, std::move(teacher), std::move(student));
}

Tensor ModelAssembly::forward_student(Tape& tape, const Tensor& v) {
  ++counters_.student;
  return student_.embed(tape, v, BnMode::kTrain);
}

Tensor ModelAssembly::forward_teacher(const Tensor& v) {
  ++counters_.teacher;
  Tape tape = Tape::no_grad();
  return teacher_.embed(tape, v, BnMode::kEval);
}

Tensor ModelAssembly::forward_mean(const Tensor& v) {
  ++counters_.mean;
  Tape tape = Tape::no_grad();
  return mean_.embed(tape, v, BnMode::kTrainNoUpdate);
}

void ModelAssembly::transplant_head() {
  nn::transplant_head(teacher_, student_);
  nn::transplant_head(teacher_, mean_);
}

void ModelAssembly::set_head_frozen(bool frozen) {
  student_.head().set_trainable(!frozen);
}

}  // namespace retro::nn
