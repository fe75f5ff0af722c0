#include "retro/losses.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "retro/errors.hpp"
#include "retro/ops.hpp"

namespace retro::losses {

namespace {

std::atomic<bool> g_debug_checks{true};
constexpr double kUnitTolerance = 1e-4;

void check_unit_rows(const Tensor& t, const char* what) {
  if (!g_debug_checks.load(std::memory_order_relaxed)) return;
  if (t.rank() != 2) {
    throw DimensionError(std::string(what) + " must be [N,D], got " + shape_str(t.shape()));
  }
  const std::size_t rows = t.dim(0), cols = t.dim(1);
  auto v = t.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double n2 = 0.0;
    for (std::size_t c = 0; c < cols; ++c) n2 += static_cast<double>(v[r * cols + c]) * v[r * cols + c];
    if (std::abs(std::sqrt(n2) - 1.0) > kUnitTolerance) {
      throw ContractError(std::string(what) + " row " + std::to_string(r) + " has norm " +
                          std::to_string(std::sqrt(n2)) + ", expected 1");
    }
  }
}

// OpenBLAS dgemm is wrong on some cores (see README); Eigen handles the double products.
using DMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using DMap = Eigen::Map<DMat>;
using CDMap = Eigen::Map<const DMat>;

std::vector<double> as_double(const Tensor& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

}  // namespace

void set_debug_checks(bool enabled) { g_debug_checks = enabled; }
bool debug_checks() { return g_debug_checks; }

Tensor info_nce(Tape& tape, const Tensor& q, const Tensor& k_pos, const Tensor& negatives,
                double temperature) {
  if (!(temperature > 0.0)) {
    throw ConfigError("info_nce: temperature must be positive, got " + std::to_string(temperature));
  }
  if (q.rank() != 2 || k_pos.shape() != q.shape()) {
    throw DimensionError("info_nce: query " + shape_str(q.shape()) + " and positive " +
                         shape_str(k_pos.shape()) + " must be equal [B,D]");
  }
  if (negatives.rank() != 2 || negatives.dim(1) != q.dim(1) || negatives.dim(0) == 0) {
    throw DimensionError("info_nce: negatives " + shape_str(negatives.shape()) +
                         " must be [K>=1," + std::to_string(q.dim(1)) + "]");
  }
  if (negatives.requires_grad()) {
    throw ContractError("info_nce: negatives must not carry gradient state");
  }
  check_unit_rows(q, "info_nce query");
  check_unit_rows(k_pos, "info_nce positive");
  check_unit_rows(negatives, "info_nce negatives");

  // Logits, softmax and both gradients are computed in double from the f32 inputs.
  const std::size_t b = q.dim(0), d = q.dim(1), kn = negatives.dim(0);
  const double inv_tau = 1.0 / temperature;
  auto qd = std::make_shared<std::vector<double>>(as_double(q));
  auto kd = std::make_shared<std::vector<double>>(as_double(k_pos));
  auto nd = std::make_shared<std::vector<double>>(as_double(negatives));

  // probs[r, 0] is the positive, probs[r, 1 + j] negative j.
  auto probs = std::make_shared<std::vector<double>>(b * (kn + 1));
  std::vector<double> neg(b * kn);
  DMap(neg.data(), b, kn).noalias() = inv_tau * CDMap(qd->data(), b, d) * CDMap(nd->data(), kn, d).transpose();
  double total = 0.0;
  for (std::size_t r = 0; r < b; ++r) {
    double pos = 0.0;
    for (std::size_t c = 0; c < d; ++c) pos += (*qd)[r * d + c] * (*kd)[r * d + c];
    pos *= inv_tau;
    const double* row = neg.data() + r * kn;
    const double mx = std::max(pos, *std::max_element(row, row + kn));
    double z = std::exp(pos - mx);
    for (std::size_t j = 0; j < kn; ++j) z += std::exp(row[j] - mx);
    const double log_z = mx + std::log(z);
    total += log_z - pos;
    double* p = probs->data() + r * (kn + 1);
    p[0] = std::exp(pos - log_z);
    for (std::size_t j = 0; j < kn; ++j) p[1 + j] = std::exp(row[j] - log_z);
  }
  Tensor result = Tensor::scalar(static_cast<float>(total / static_cast<double>(b)));
  if (tape.needs_grad({&q, &k_pos})) {
    tape.record({&q, &k_pos}, result, [q, k_pos, result, qd, kd, nd, probs, b, d, kn, inv_tau]() mutable {
      const double g = result.grad()[0] * inv_tau / static_cast<double>(b);
      if (q.requires_grad()) {
        // dq = g * ((p0 - 1) k + sum_j p_j n_j)
        std::vector<double> pn(b * kn);
        for (std::size_t r = 0; r < b; ++r) {
          std::copy_n(probs->data() + r * (kn + 1) + 1, kn, pn.data() + r * kn);
        }
        std::vector<double> dq(b * d);
        DMap(dq.data(), b, d).noalias() = CDMap(pn.data(), b, kn) * CDMap(nd->data(), kn, d);
        auto gq = q.grad_buffer();
        for (std::size_t r = 0; r < b; ++r) {
          const double w = (*probs)[r * (kn + 1)] - 1.0;
          for (std::size_t c = 0; c < d; ++c) {
            gq[r * d + c] += static_cast<float>(g * (dq[r * d + c] + w * (*kd)[r * d + c]));
          }
        }
      }
      if (k_pos.requires_grad()) {
        auto gk = k_pos.grad_buffer();
        for (std::size_t r = 0; r < b; ++r) {
          const double w = g * ((*probs)[r * (kn + 1)] - 1.0);
          for (std::size_t c = 0; c < d; ++c) gk[r * d + c] += static_cast<float>(w * (*qd)[r * d + c]);
        }
      }
    });
  }
  return result;
}

Tensor symmetric_info_nce(Tape& tape, const Tensor& q, const Tensor& q_prime, const Tensor& k,
                          const Tensor& k_prime, const MemoryBank& bank_v,
                          const MemoryBank& bank_v_prime, double temperature) {
  if (bank_v.view() != BankView::kV || bank_v_prime.view() != BankView::kVPrime) {
    throw ContractError(std::string("symmetric_info_nce: banks passed as (") +
                        bank_view_name(bank_v.view()) + ", " + bank_view_name(bank_v_prime.view()) +
                        "), expected (v, v_prime)");
  }
  Tensor forward = info_nce(tape, q, k_prime, bank_v_prime.negatives(), temperature);
  Tensor backward = info_nce(tape, q_prime, k, bank_v.negatives(), temperature);
  return ops::scale(tape, ops::add(tape, forward, backward), 0.5f);
}

Tensor consistency_loss(Tape& tape, const Tensor& e_s, const Tensor& e_t, const Tensor& e_s_prime,
                        const Tensor& e_t_prime) {
  if (e_s.shape() != e_t.shape() || e_s_prime.shape() != e_t_prime.shape() ||
      e_s.shape() != e_s_prime.shape() || e_s.rank() != 2) {
    throw DimensionError("consistency_loss: embeddings must share one [B,D] shape, got " +
                         shape_str(e_s.shape()) + ", " + shape_str(e_t.shape()) + ", " +
                         shape_str(e_s_prime.shape()) + ", " + shape_str(e_t_prime.shape()));
  }
  check_unit_rows(e_s, "consistency student");
  check_unit_rows(e_t, "consistency teacher");
  check_unit_rows(e_s_prime, "consistency student'");
  check_unit_rows(e_t_prime, "consistency teacher'");
  const std::size_t n = e_s.numel();
  const double inv_batch = 1.0 / static_cast<double>(e_s.dim(0));
  // diffs[0] = e_s - e_t, diffs[1] = e_s' - e_t', in double
  auto diffs = std::make_shared<std::array<std::vector<double>, 2>>();
  double total = 0.0;
  const std::array<std::pair<const Tensor*, const Tensor*>, 2> views{{{&e_s, &e_t}, {&e_s_prime, &e_t_prime}}};
  for (std::size_t v = 0; v < 2; ++v) {
    auto s = views[v].first->data();
    auto t = views[v].second->data();
    auto& diff = (*diffs)[v];
    diff.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      diff[i] = static_cast<double>(s[i]) - t[i];
      total += diff[i] * diff[i];
    }
  }
  Tensor result = Tensor::scalar(static_cast<float>(total * inv_batch));
  if (tape.needs_grad({&e_s, &e_t, &e_s_prime, &e_t_prime})) {
    tape.record({&e_s, &e_t, &e_s_prime, &e_t_prime}, result,
                [e_s, e_t, e_s_prime, e_t_prime, result, diffs, inv_batch]() mutable {
                  const double g = 2.0 * result.grad()[0] * inv_batch;
                  const std::array<const Tensor*, 4> targets{&e_s, &e_t, &e_s_prime, &e_t_prime};
                  for (std::size_t i = 0; i < 4; ++i) {
                    const Tensor& x = *targets[i];
                    if (!x.requires_grad()) continue;
                    const auto& diff = (*diffs)[i / 2];
                    const double w = i % 2 == 0 ? g : -g;  // student +, teacher -
                    auto gx = x.grad_buffer();
                    for (std::size_t j = 0; j < diff.size(); ++j) gx[j] += static_cast<float>(w * diff[j]);
                  }
                });
  }
  return result;
}

Tensor total_loss(Tape& tape, const Tensor& l_dis, const Tensor& l_con, double gamma,
                  double consistency_weight) {
  if (gamma < 0.0) throw ConfigError("total_loss: gamma must be non-negative");
  if (consistency_weight == 1.0) {
    return ops::add(tape, l_dis, ops::scale(tape, l_con, static_cast<float>(gamma)));
  }
  return ops::add(tape, ops::scale(tape, l_dis, static_cast<float>(consistency_weight)),
                  ops::scale(tape, l_con, static_cast<float>(gamma)));
}

}  // namespace retro::losses
