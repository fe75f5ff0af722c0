#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "retro/memory_bank.hpp"
#include "retro/nn.hpp"
#include "retro/tensor.hpp"
#include "retro/train.hpp"

namespace retro::ckpt {

// Layout, all integers little-endian:
//   "RTRO" | version u32 | count u32
//   count x { name_len u32 | name | rank u32 | dims u64[rank] | dtype u8 }
//   payload: f32 data of every tensor in manifest order
//   crc32(payload) u32
inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 0;

struct NamedTensor {
  std::string name;
  Tensor value;
};
using TensorList = std::vector<NamedTensor>;

std::vector<std::uint8_t> encode(const TensorList& tensors);
// Keeps only names starting with `prefix` (all when empty).
TensorList decode(std::span<const std::uint8_t> bytes, std::string_view prefix = {});

void save(const std::filesystem::path& path, const TensorList& tensors);
TensorList load(const std::filesystem::path& path, std::string_view prefix = {});

const Tensor* find(const TensorList& tensors, std::string_view name);
std::vector<std::string> names(const TensorList& tensors);

// Network parameters and buffers under "<prefix><relative name>".
void append_network(TensorList& out, const std::string& prefix, const nn::Network& net);
// Overwrites every parameter of `net` from "<prefix><name>"; a missing name
// or a shape mismatch is a FormatError.
void restore_network(const TensorList& tensors, const std::string& prefix, nn::Network& net);
void restore_encoder(const TensorList& tensors, const std::string& prefix, nn::Encoder& encoder);

// "<prefix>keys" [K,D] and "<prefix>state" [2] = (write_ptr, filled).
void append_bank(TensorList& out, const std::string& prefix, const MemoryBank& bank);
MemoryBank restore_bank(const TensorList& tensors, const std::string& prefix, BankView view);

// query.*, key.*, bank.*, optim.query.*, ema.key.*, state.counters
TensorList moco_tensors(const train::MocoState& state);
void restore_moco(const TensorList& tensors, train::MocoState& state);

// teacher.*, student.*, mean_student.*, bank_v.*, bank_v_prime.*, optim.student.*,
// ema.mean_student.*, state.*
TensorList distill_tensors(const train::DistillState& state);
void restore_distill(const TensorList& tensors, train::DistillState& state);

}  // namespace retro::ckpt
