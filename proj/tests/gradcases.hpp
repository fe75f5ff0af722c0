#pragma once

// Gradient-check cases shared by the op tests and the acceptance gate. Each
// case builds random inputs from a seed and a scalar loss over them.
//
// f32 finite differences at eps = 1e-3 carry roughly u * |L| / eps of noise
// per element, so shapes stay small, reduction weights stay away from zero
// and loss cases take embedding rows directly rather than through
// l2_normalize (whose f32 output rounding would dominate the difference).

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "retro/losses.hpp"
#include "retro/ops.hpp"
#include "support.hpp"

namespace testsupport {

struct GradCase {
  std::vector<Tensor> inputs;
  LossFn loss;
};

struct NamedGradCase {
  std::string name;
  std::function<GradCase(std::uint64_t seed)> make;
};

// Fixed random weights turn any tensor output into a scalar with a generic gradient.
inline Tensor weighted_sum(Tape& tape, const Tensor& y, const Tensor& w) {
  return retro::ops::sum(tape, retro::ops::mul(tape, y, w));
}

// Perturbed embedding rows are slightly off the unit sphere; the losses'
// unit-norm assertions are suspended while a check evaluates them.
struct UnitChecksOff {
  bool saved = retro::losses::debug_checks();
  UnitChecksOff() { retro::losses::set_debug_checks(false); }
  ~UnitChecksOff() { retro::losses::set_debug_checks(saved); }
};

inline Tensor unit_rows_grad(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  Tensor t = unit_rows(rows, cols, rng);
  t.set_requires_grad(true);
  return t;
}

inline std::vector<NamedGradCase> grad_cases() {
  namespace ops = retro::ops;
  namespace losses = retro::losses;
  using retro::MemoryBank;
  std::vector<NamedGradCase> cases;
  auto dim = [](std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  auto weights = [](const Shape& s, std::mt19937_64& rng) { return rand_away_from_zero(s, rng, 0.5, 1.5); };

  cases.push_back({"linear", [=](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const std::size_t b = dim(rng, 1, 4), i = dim(rng, 1, 6), o = dim(rng, 1, 5);
    const Tensor w = weights({b, o}, rng);
    return GradCase{{randn({b, i}, rng, 1, true), randn({o, i}, rng, 1, true), randn({o}, rng, 1, true)},
                    [w](Tape& t, const std::vector<Tensor>& in) {
                      return weighted_sum(t, ops::linear(t, in[0], in[1], in[2]), w);
                    }};
  }});
  cases.push_back({"matmul_nt", [=](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const std::size_t m = dim(rng, 1, 4), k = dim(rng, 1, 6), n = dim(rng, 1, 4);
    const Tensor w = weights({m, n}, rng);
    return GradCase{{randn({m, k}, rng, 1, true), randn({n, k}, rng, 1, true)},
                    [w](Tape& t, const std::vector<Tensor>& in) {
                      return weighted_sum(t, ops::matmul_nt(t, in[0], in[1]), w);
                    }};
  }});
  cases.push_back({"conv2d", [=](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const std::size_t k = dim(rng, 1, 4), stride = dim(rng, 1, 2);
    const std::size_t pad = k > 2 ? dim(rng, 0, 1) : 0;
    const std::size_t out = dim(rng, 1, 3);
    const std::size_t h = (out - 1) * stride + k - 2 * pad;  // exact tiling
    const std::size_t b = dim(rng, 1, 2), c = dim(rng, 1, 3), f = dim(rng, 1, 3);
    const Tensor w = weights({b, f, out, out}, rng);
    return GradCase{{randn({b, c, h, h}, rng, 1, true), randn({f, c, k, k}, rng, 0.5, true)},
                    [=](Tape& t, const std::vector<Tensor>& in) {
                      return weighted_sum(t, ops::conv2d(t, in[0], in[1], stride, pad), w);
                    }};
  }});
  cases.push_back({"relu", [=](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const Shape s{dim(rng, 1, 4), dim(rng, 1, 6)};
    const Tensor w = weights(s, rng);
    return GradCase{{rand_away_from_zero(s, rng, 0.05, 1.0, true)},
                    [w](Tape& t, const std::vector<Tensor>& in) {
                      return weighted_sum(t, ops::relu(t, in[0]), w);
                    }};
  }});
  for (int rank : {2, 4}) {
    for (auto mode : {ops::BatchNormMode::kTrainNoUpdate, ops::BatchNormMode::kEval}) {
      const std::string name = std::string("batchnorm_rank") + std::to_string(rank) +
                               (mode == ops::BatchNormMode::kEval ? "_eval" : "_train");
      cases.push_back({name, [=](std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        const std::size_t c = dim(rng, 1, 3);
        const Shape s = rank == 2 ? Shape{dim(rng, 4, 8), c} : Shape{dim(rng, 2, 3), c, 2, 2};
        const Tensor w = randn(s, rng);
        auto running_mean = std::make_shared<std::vector<float>>(c, 0.1f);
        auto running_var = std::make_shared<std::vector<float>>(c, 1.5f);
        const Tensor gamma = rand_away_from_zero({c}, rng, 0.5, 1.5, true);
        return GradCase{{randn(s, rng, 1, true), gamma, randn({c}, rng, 1, true)},
                        [=](Tape& t, const std::vector<Tensor>& in) {
                          ops::BatchNormOptions opt;
                          opt.mode = mode;
                          return weighted_sum(
                              t, ops::batchnorm(t, in[0], in[1], in[2], *running_mean, *running_var, opt), w);
                        }};
      }});
    }
  }
  cases.push_back({"global_avg_pool", [=](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const std::size_t b = dim(rng, 1, 3), c = dim(rng, 1, 4);
    const Tensor w = weights({b, c}, rng);
    return GradCase{{randn({b, c, dim(rng, 1, 3), dim(rng, 1, 3)}, rng, 1, true)},
                    [w](Tape& t, const std::vector<Tensor>& in) {
                      return weighted_sum(t, ops::global_avg_pool(t, in[0]), w);
                    }};
  }});
  cases.push_back({"l2_normalize", [=](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const Shape s{dim(rng, 1, 3), dim(rng, 2, 6)};
    const Tensor w = randn(s, rng);
    return GradCase{{randn(s, rng, 1, true)}, [w](Tape& t, const std::vector<Tensor>& in) {
                      return weighted_sum(t, ops::l2_normalize(t, in[0]), w);
                    }};
  }});
  cases.push_back({"row_dot", [=](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const Shape s{dim(rng, 1, 4), dim(rng, 1, 6)};
    const Tensor w = weights({s[0], 1}, rng);
    return GradCase{{randn(s, rng, 1, true), randn(s, rng, 1, true)},
                    [w](Tape& t, const std::vector<Tensor>& in) {
                      return weighted_sum(t, ops::row_dot(t, in[0], in[1]), w);
                    }};
  }});
  cases.push_back({"concat_cols", [=](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const std::size_t b = dim(rng, 1, 4), p = dim(rng, 1, 4), q = dim(rng, 1, 4);
    const Tensor w = weights({b, p + q}, rng);
    return GradCase{{randn({b, p}, rng, 1, true), randn({b, q}, rng, 1, true)},
                    [w](Tape& t, const std::vector<Tensor>& in) {
                      return weighted_sum(t, ops::concat_cols(t, in[0], in[1]), w);
                    }};
  }});
  cases.push_back({"elementwise", [=](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const Shape s{dim(rng, 1, 3), dim(rng, 1, 4)};
    const Tensor w = weights(s, rng);
    const float factor = static_cast<float>(std::uniform_real_distribution<double>(0.5, 2)(rng));
    return GradCase{{randn(s, rng, 1, true), randn(s, rng, 1, true), randn(s, rng, 1, true)},
                    [=](Tape& t, const std::vector<Tensor>& in) {
                      const Tensor y = ops::sub(t, ops::add(t, ops::mul(t, in[0], in[1]), in[2]),
                                                ops::scale(t, in[0], factor));
                      return ops::add(t, weighted_sum(t, y, w), ops::mean(t, ops::mul(t, in[2], in[2])));
                    }};
  }});
  cases.push_back({"cross_entropy", [=](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const std::size_t b = dim(rng, 1, 3), c = dim(rng, 2, 6);
    std::vector<int> labels(b);
    for (int& y : labels) y = static_cast<int>(dim(rng, 0, c - 1));
    return GradCase{{randn({b, c}, rng, 1.0, true)}, [labels](Tape& t, const std::vector<Tensor>& in) {
                      return ops::cross_entropy(t, in[0], labels);
                    }};
  }});
  cases.push_back({"mlp_composite", [=](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const std::size_t b = dim(rng, 1, 3), i = dim(rng, 2, 4), h = dim(rng, 2, 5), c = dim(rng, 2, 4);
    std::vector<int> labels(b);
    for (int& y : labels) y = static_cast<int>(dim(rng, 0, c - 1));
    // Hidden pre-activations are kept clear of zero by a large positive or negative bias.
    return GradCase{{randn({b, i}, rng, 0.3, true), randn({h, i}, rng, 0.3, true),
                     rand_away_from_zero({h}, rng, 1.0, 1.5, true), randn({c, h}, rng, 1, true),
                     randn({c}, rng, 1, true)},
                    [labels](Tape& t, const std::vector<Tensor>& in) {
                      const Tensor hidden = ops::relu(t, ops::linear(t, in[0], in[1], in[2]));
                      return ops::cross_entropy(t, ops::linear(t, hidden, in[3], in[4]), labels);
                    }};
  }});

  cases.push_back({"info_nce", [=](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const std::size_t b = dim(rng, 1, 3), d = dim(rng, 2, 8), k = dim(rng, 1, 16);
    const Tensor neg = unit_rows(k, d, rng);
    const double tau = std::uniform_real_distribution<double>(0.1, 0.5)(rng);
    return GradCase{{unit_rows_grad(b, d, rng), unit_rows_grad(b, d, rng)},
                    [=](Tape& t, const std::vector<Tensor>& in) {
                      UnitChecksOff off;
                      return losses::info_nce(t, in[0], in[1], neg, tau);
                    }};
  }});
  cases.push_back({"consistency_loss", [=](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const std::size_t b = dim(rng, 1, 3), d = dim(rng, 2, 8);
    return GradCase{{unit_rows_grad(b, d, rng), unit_rows_grad(b, d, rng), unit_rows_grad(b, d, rng),
                     unit_rows_grad(b, d, rng)},
                    [=](Tape& t, const std::vector<Tensor>& in) {
                      UnitChecksOff off;
                      return losses::consistency_loss(t, in[0], in[1], in[2], in[3]);
                    }};
  }});
  cases.push_back({"symmetric_info_nce", [=](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const std::size_t b = dim(rng, 1, 3), d = dim(rng, 2, 8), k = dim(rng, 1, 16);
    auto bank_v = std::make_shared<MemoryBank>(MemoryBank::init(k, d, seed, retro::BankView::kV));
    auto bank_vp = std::make_shared<MemoryBank>(MemoryBank::init(k, d, seed + 1, retro::BankView::kVPrime));
    const double tau = std::uniform_real_distribution<double>(0.1, 0.5)(rng);
    return GradCase{{unit_rows_grad(b, d, rng), unit_rows_grad(b, d, rng), unit_rows_grad(b, d, rng),
                     unit_rows_grad(b, d, rng)},
                    [=](Tape& t, const std::vector<Tensor>& in) {
                      UnitChecksOff off;
                      return losses::symmetric_info_nce(t, in[0], in[1], in[2], in[3], *bank_v, *bank_vp, tau);
                    }};
  }});
  cases.push_back({"total_loss", [=](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const std::size_t b = dim(rng, 1, 3), d = dim(rng, 2, 8), k = dim(rng, 1, 16);
    auto bank_v = std::make_shared<MemoryBank>(MemoryBank::init(k, d, seed, retro::BankView::kV));
    auto bank_vp = std::make_shared<MemoryBank>(MemoryBank::init(k, d, seed + 1, retro::BankView::kVPrime));
    const Tensor et = unit_rows(b, d, rng), et2 = unit_rows(b, d, rng);
    const Tensor key = unit_rows(b, d, rng), key2 = unit_rows(b, d, rng);
    const double gamma = std::uniform_real_distribution<double>(0.2, 2.0)(rng);
    return GradCase{{unit_rows_grad(b, d, rng), unit_rows_grad(b, d, rng)},
                    [=](Tape& t, const std::vector<Tensor>& in) {
                      UnitChecksOff off;
                      const Tensor dis = losses::consistency_loss(t, in[0], et, in[1], et2);
                      const Tensor con =
                          losses::symmetric_info_nce(t, in[0], in[1], key, key2, *bank_v, *bank_vp, 0.2);
                      return losses::total_loss(t, dis, con, gamma);
                    }};
  }});
  return cases;
}

}  // namespace testsupport
