#pragma once

// Independent references for the loss tests and the acceptance gate.

#include <cmath>
#include <random>
#include <vector>

#include "retro/tensor.hpp"

namespace testsupport {

using retro::Tensor;

// Brute-force per-sample -log softmax of the positive, in long double,
// without max subtraction.
inline double info_nce_oracle(const Tensor& q, const Tensor& k, const Tensor& neg, double tau) {
  const std::size_t b = q.dim(0), d = q.dim(1), kn = neg.dim(0);
  long double total = 0.0L;
  for (std::size_t r = 0; r < b; ++r) {
    auto dot = [&](const Tensor& other, std::size_t row) {
      long double s = 0.0L;
      for (std::size_t c = 0; c < d; ++c) {
        s += static_cast<long double>(q.data()[r * d + c]) * other.data()[row * d + c];
      }
      return s / tau;
    };
    const long double pos = dot(k, r);
    long double denom = std::exp(pos);
    for (std::size_t j = 0; j < kn; ++j) denom += std::exp(dot(neg, j));
    total += std::log(denom) - pos;
  }
  return static_cast<double>(total / b);
}

inline Tensor repeat_row(const Tensor& row, std::size_t times) {
  std::vector<float> v;
  for (std::size_t i = 0; i < times; ++i) v.insert(v.end(), row.data().begin(), row.data().end());
  return Tensor({times, row.dim(1)}, std::move(v));
}

// Random orthogonal matrix from Gram-Schmidt on a Gaussian matrix, double.
inline std::vector<double> random_orthogonal(std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> dist;
  std::vector<double> m(d * d);
  for (double& x : m) x = dist(rng);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      double proj = 0.0;
      for (std::size_t c = 0; c < d; ++c) proj += m[i * d + c] * m[j * d + c];
      for (std::size_t c = 0; c < d; ++c) m[i * d + c] -= proj * m[j * d + c];
    }
    double n2 = 0.0;
    for (std::size_t c = 0; c < d; ++c) n2 += m[i * d + c] * m[i * d + c];
    for (std::size_t c = 0; c < d; ++c) m[i * d + c] /= std::sqrt(n2);
  }
  return m;
}

inline Tensor rotate(const Tensor& x, const std::vector<double>& rot) {
  const std::size_t rows = x.dim(0), d = x.dim(1);
  std::vector<float> out(rows * d);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < d; ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += rot[i * d + c] * x.data()[r * d + c];
      out[r * d + i] = static_cast<float>(s);
    }
  }
  return Tensor({rows, d}, std::move(out));
}

}  // namespace testsupport
