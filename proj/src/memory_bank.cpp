#include "retro/memory_bank.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "retro/errors.hpp"

namespace retro {

namespace {
constexpr double kUnitTolerance = 1e-4;
}

const char* bank_view_name(BankView view) { return view == BankView::kV ? "v" : "v_prime"; }

MemoryBank::MemoryBank(std::size_t capacity, std::size_t dim, BankView view)
    : capacity_(capacity), dim_(dim), keys_(capacity * dim, 0.0f), view_(view) {
  if (capacity == 0) throw ConfigError("memory bank capacity must be at least 1");
  if (dim == 0) throw ConfigError("memory bank key dimension must be positive");
}

MemoryBank MemoryBank::init(std::size_t capacity, std::size_t dim, std::uint64_t seed,
                            BankView view) {
  MemoryBank bank(capacity, dim, view);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> row(dim);
  for (std::size_t r = 0; r < capacity; ++r) {
    double norm2 = 0.0;
    do {
      norm2 = 0.0;
      for (double& v : row) {
        v = gauss(rng);
        norm2 += v * v;
      }
    } while (norm2 == 0.0);
    const double inv = 1.0 / std::sqrt(norm2);
    for (std::size_t c = 0; c < dim; ++c) bank.keys_[r * dim + c] = static_cast<float>(row[c] * inv);
  }
  bank.filled_ = capacity;
  return bank;
}

MemoryBank MemoryBank::from_rows(std::vector<float> rows, std::size_t dim, std::size_t write_ptr,
                                 std::size_t filled, BankView view) {
  if (dim == 0 || rows.size() % dim != 0) {
    throw FormatError("memory bank rows do not tile dimension " + std::to_string(dim));
  }
  MemoryBank bank(rows.size() / dim, dim, view);
  if (write_ptr >= bank.capacity_ || filled > bank.capacity_) {
    throw FormatError("memory bank pointer state out of range");
  }
  bank.keys_ = std::move(rows);
  bank.write_ptr_ = write_ptr;
  bank.filled_ = filled;
  return bank;
}

void MemoryBank::enqueue(const Tensor& new_keys) {
  if (new_keys.requires_grad() || new_keys.node_id()) {
    throw ContractError("memory bank keys must be detached from any gradient tape");
  }
  if (new_keys.rank() != 2 || new_keys.dim(1) != dim_) {
    throw DimensionError("memory bank expects keys [B," + std::to_string(dim_) + "], got " +
                         shape_str(new_keys.shape()));
  }
  const std::size_t batch = new_keys.dim(0);
  auto src = new_keys.data();
  for (std::size_t r = 0; r < batch; ++r) {
    double norm2 = 0.0;
    for (std::size_t c = 0; c < dim_; ++c) norm2 += static_cast<double>(src[r * dim_ + c]) * src[r * dim_ + c];
    if (std::abs(std::sqrt(norm2) - 1.0) > kUnitTolerance) {
      throw ContractError("memory bank key row " + std::to_string(r) + " is not unit-norm");
    }
  }
  for (std::size_t r = 0; r < batch; ++r) {
    std::copy_n(src.data() + r * dim_, dim_, keys_.data() + write_ptr_ * dim_);
    write_ptr_ = (write_ptr_ + 1) % capacity_;
  }
  filled_ = std::min(capacity_, filled_ + batch);
}

Tensor MemoryBank::negatives() const { return Tensor({capacity_, dim_}, keys_); }

}  // namespace retro
