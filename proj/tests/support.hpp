#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include "retro/memory_bank.hpp"
#include "retro/tensor.hpp"

namespace testsupport {

using retro::Shape;
using retro::Tape;
using retro::Tensor;

inline Tensor randn(const Shape& shape, std::mt19937_64& rng, double scale = 1.0,
                    bool requires_grad = false) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<float> v(retro::shape_numel(shape));
  for (float& x : v) x = static_cast<float>(dist(rng));
  return Tensor(shape, std::move(v), requires_grad);
}

// Values uniform in +-[lo, hi], keeping clear of relu's kink.
inline Tensor rand_away_from_zero(const Shape& shape, std::mt19937_64& rng, double lo, double hi,
                                  bool requires_grad = false) {
  std::uniform_real_distribution<double> mag(lo, hi);
  std::bernoulli_distribution sign(0.5);
  std::vector<float> v(retro::shape_numel(shape));
  for (float& x : v) x = static_cast<float>(sign(rng) ? mag(rng) : -mag(rng));
  return Tensor(shape, std::move(v), requires_grad);
}

// Rows of unit Euclidean norm, normalized in double.
inline Tensor unit_rows(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<float> v(rows * cols);
  std::vector<double> row(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double n2 = 0.0;
    for (double& x : row) {
      x = dist(rng);
      n2 += x * x;
    }
    const double inv = 1.0 / std::sqrt(n2);
    for (std::size_t c = 0; c < cols; ++c) v[r * cols + c] = static_cast<float>(row[c] * inv);
  }
  return Tensor({rows, cols}, std::move(v));
}

inline std::vector<double> to_double(const Tensor& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

inline bool bit_identical(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::equal(a.data().begin(), a.data().end(), b.data().begin(),
                    [](float x, float y) { return std::memcmp(&x, &y, sizeof(float)) == 0; });
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - b.data()[i]));
  }
  return m;
}

using LossFn = std::function<Tensor(Tape&, const std::vector<Tensor>&)>;

struct GradCheck {
  // ||analytic - numeric|| / max(||analytic||, ||numeric||, floor) over the
  // concatenated gradients of all checked inputs.
  double rel_error = 0.0;
  std::size_t checked_inputs = 0;
  std::size_t checked_elements = 0;
  std::size_t skipped_kinks = 0;
};

// Central finite differences with step eps on every element of every input
// that requires grad. With skip_kinks, elements whose one-sided differences
// disagree (a relu switching inside the step) are left out and counted.
inline GradCheck gradcheck(const LossFn& loss_fn, std::vector<Tensor> inputs, double eps = 1e-3,
                           double floor = 1e-6, bool skip_kinks = false) {
  Tape tape;
  const Tensor loss = loss_fn(tape, inputs);
  tape.backward(loss);
  auto eval = [&] {
    Tape t = Tape::no_grad();
    return static_cast<double>(loss_fn(t, inputs).item());
  };
  const double center = skip_kinks ? eval() : 0.0;
  GradCheck result;
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  for (Tensor& x : inputs) {
    if (!x.requires_grad()) continue;
    const std::vector<float> analytic =
        x.has_grad() ? std::vector<float>(x.grad().begin(), x.grad().end())
                     : std::vector<float>(x.numel(), 0.0f);
    auto data = x.mutable_data();
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const float saved = data[i];
      const float up = static_cast<float>(saved + eps), down = static_cast<float>(saved - eps);
      data[i] = up;
      const double plus = eval();
      data[i] = down;
      const double minus = eval();
      data[i] = saved;
      if (skip_kinks) {
        const double right = plus - center, left = center - minus;
        if (std::abs(right - left) > 0.1 * std::max(std::abs(right), std::abs(left)) + 1e-6) {
          ++result.skipped_kinks;
          continue;
        }
      }
      // Use the actually representable step.
      const double numeric = (plus - minus) / (static_cast<double>(up) - static_cast<double>(down));
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += static_cast<double>(analytic[i]) * analytic[i];
      n2 += numeric * numeric;
      ++result.checked_elements;
    }
    ++result.checked_inputs;
  }
  result.rel_error = std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), floor});
  return result;
}

// Independent ring buffer used as the memory-bank reference.
struct NaiveRing {
  std::vector<std::vector<float>> rows;
  std::size_t next = 0;

  void push(const std::vector<float>& row) {
    rows[next] = row;
    next = (next + 1) % rows.size();
  }
};

// One random enqueue schedule against NaiveRing. Capacities 1..16, batches
// 0..2K with B == K forced every few steps; half the banks start cold.
// Returns the number of steps whose state disagreed.
inline std::size_t bank_schedule_mismatches(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t k = std::uniform_int_distribution<std::size_t>(1, 16)(rng);
  const std::size_t dim = std::uniform_int_distribution<std::size_t>(1, 6)(rng);
  const bool cold = rng() % 2 == 0;
  retro::MemoryBank bank = cold ? retro::MemoryBank::from_rows(std::vector<float>(k * dim, 0.0f), dim, 0, 0,
                                                               retro::BankView::kV)
                                : retro::MemoryBank::init(k, dim, seed, retro::BankView::kV);
  NaiveRing ring;
  for (std::size_t r = 0; r < k; ++r) {
    ring.rows.emplace_back(bank.rows().begin() + r * dim, bank.rows().begin() + (r + 1) * dim);
  }
  std::size_t pushed = cold ? 0 : k;
  std::size_t bad = 0;
  const std::size_t steps = std::uniform_int_distribution<std::size_t>(1, 24)(rng);
  for (std::size_t s = 0; s < steps; ++s) {
    const std::size_t b = s % 4 == 3 ? k : std::uniform_int_distribution<std::size_t>(0, 2 * k)(rng);
    const Tensor keys = unit_rows(b, dim, rng);
    bank.enqueue(keys);
    for (std::size_t r = 0; r < b; ++r) {
      ring.push(std::vector<float>(keys.data().begin() + r * dim, keys.data().begin() + (r + 1) * dim));
    }
    pushed += b;
    bool same = bank.write_ptr() == ring.next && bank.filled() == std::min(pushed, k);
    const Tensor snap = bank.negatives();
    for (std::size_t r = 0; r < k && same; ++r) {
      same = std::equal(ring.rows[r].begin(), ring.rows[r].end(), snap.data().begin() + r * dim);
    }
    if (!same) ++bad;
  }
  return bad;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() /
                   ("retro-test-" + name + "-" + std::to_string(std::random_device{}()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream(path, std::ios::binary) << text;
}

}  // namespace testsupport
