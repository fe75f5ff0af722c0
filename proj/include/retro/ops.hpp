#pragma once

#include <span>

#include "retro/tensor.hpp"

namespace retro {

// Sets the number of BLAS threads used by matrix products. Values above one
// make reductions order-dependent, so bitwise replay is only guaranteed at 1.
void set_compute_threads(int threads);

namespace ops {

// y[n,o] = sum_i x[n,i] * w[o,i] + b[o]
Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias);

// a[M,K] x b[N,K]^T -> [M,N]
Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b);

// Cross-correlation of x[B,C,H,W] with kernel[F,C,kh,kw], zero padding.
Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& kernel, std::size_t stride,
              std::size_t padding);

Tensor relu(Tape& tape, const Tensor& x);

enum class BatchNormMode {
  kTrain,          // batch statistics, running statistics updated
  kTrainNoUpdate,  // batch statistics, running statistics left alone
  kEval,           // running statistics
};

struct BatchNormOptions {
  BatchNormMode mode = BatchNormMode::kTrain;
  float momentum = 0.1f;
  float eps = 1e-5f;
};

// Per-channel normalization of x[B,C] or x[B,C,H,W]. running_var tracks the
// unbiased batch variance.
Tensor batchnorm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 std::span<float> running_mean, std::span<float> running_var,
                 const BatchNormOptions& options);

// [B,C,H,W] -> [B,C]
Tensor global_avg_pool(Tape& tape, const Tensor& x);

// Rows of x[B,D] scaled to unit Euclidean norm. A zero row is an error.
Tensor l2_normalize(Tape& tape, const Tensor& x);

// [B,D] . [B,D] -> [B,1]
Tensor row_dot(Tape& tape, const Tensor& a, const Tensor& b);

// [B,P] ++ [B,Q] -> [B,P+Q]
Tensor concat_cols(Tape& tape, const Tensor& a, const Tensor& b);

Tensor scale(Tape& tape, const Tensor& x, float factor);
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);

Tensor sum(Tape& tape, const Tensor& x);
Tensor mean(Tape& tape, const Tensor& x);

// Mean softmax cross-entropy of logits[B,C] against integer labels.
Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> labels);

}  // namespace ops
}  // namespace retro
