#pragma once

#include <cstdint>
#include <vector>

#include "retro/tensor.hpp"

namespace retro {

// Which augmented view a bank's keys were computed from.
enum class BankView { kV, kVPrime };

const char* bank_view_name(BankView view);

/// Fixed-capacity FIFO ring of unit-norm negative keys.
class MemoryBank {
 public:
  // Warm start: `capacity` random unit rows. Deterministic in `seed`.
  static MemoryBank init(std::size_t capacity, std::size_t dim, std::uint64_t seed,
                         BankView view);
  // Rebuilds a bank from stored rows (checkpoint restore).
  static MemoryBank from_rows(std::vector<float> rows, std::size_t dim, std::size_t write_ptr,
                              std::size_t filled, BankView view);

  // Writes rows of new_keys[B,dim] at write_ptr with wraparound. Keys must be
  // unit-norm and carry no gradient state.
  void enqueue(const Tensor& new_keys);

  // Snapshot copy of all K rows, [K,dim].
  Tensor negatives() const;

  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }
  std::size_t write_ptr() const { return write_ptr_; }
  std::size_t filled() const { return filled_; }
  BankView view() const { return view_; }
  const std::vector<float>& rows() const { return keys_; }

 private:
  MemoryBank(std::size_t capacity, std::size_t dim, BankView view);

  std::size_t capacity_;
  std::size_t dim_;
  std::vector<float> keys_;
  std::size_t write_ptr_ = 0;
  std::size_t filled_ = 0;
  BankView view_;
};

}  // namespace retro
