#include "retro/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include <zlib.h>

#include "retro/errors.hpp"

namespace retro::ckpt {

namespace {

constexpr char kMagic[4] = {'R', 'T', 'R', 'O'};
// Guards against allocating absurd sizes from a damaged manifest.
constexpr std::uint64_t kMaxRank = 8;
constexpr std::uint64_t kMaxNameLength = 4096;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t crc_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  std::size_t offset = 0;
  while (offset < bytes.size()) {
    const std::size_t chunk = std::min<std::size_t>(bytes.size() - offset, 1u << 30);
    crc = crc32(crc, bytes.data() + offset, static_cast<uInt>(chunk));
    offset += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint32_t u32() { return static_cast<std::uint32_t>(uint_le(4)); }
  std::uint64_t u64() { return uint_le(8); }
  std::uint8_t u8() { return static_cast<std::uint8_t>(uint_le(1)); }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("checkpoint is truncated");
  }
  std::uint64_t uint_le(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

bool starts_with(std::string_view s, std::string_view prefix) {
  return s.substr(0, prefix.size()) == prefix;
}

const Tensor& require(const TensorList& tensors, const std::string& name, const Shape& shape) {
  const Tensor* t = find(tensors, name);
  if (!t) throw FormatError("checkpoint has no tensor '" + name + "'");
  if (t->shape() != shape) {
    throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_str(t->shape()) +
                      ", expected " + shape_str(shape));
  }
  return *t;
}

void restore_list(const TensorList& tensors, const std::string& prefix, const ParameterList& params) {
  for (Parameter* p : params) {
    const Tensor& src = require(tensors, prefix + p->name(), p->tensor().shape());
    std::copy(src.data().begin(), src.data().end(), p->mutable_values().begin());
    p->ema_residual().reset();
  }
}

void append_params(TensorList& out, const std::string& prefix, const ConstParameterList& params) {
  for (const Parameter* p : params) out.push_back({prefix + p->name(), p->tensor().detach()});
}

// SGD velocity lives under "optim.<network prefix>", outside the network's own
// prefix so encoder-only loads never see it. Parameters that have not stepped yet
// have no entry.
void append_momentum(TensorList& out, const std::string& prefix, const nn::Network& net) {
  for (const Parameter* p : net.parameters()) {
    if (const auto& v = p->momentum_buffer()) out.push_back({"optim." + prefix + p->name(), Tensor(p->tensor().shape(), *v)});
  }
}

void restore_momentum(const TensorList& tensors, const std::string& prefix, nn::Network& net) {
  for (Parameter* p : net.parameters()) {
    const Tensor* v = find(tensors, "optim." + prefix + p->name());
    if (!v) {
      p->momentum_buffer().reset();
      continue;
    }
    if (v->shape() != p->tensor().shape()) {
      throw FormatError("checkpoint momentum for '" + prefix + p->name() + "' has shape " + shape_str(v->shape()));
    }
    p->momentum_buffer() = std::vector<float>(v->data().begin(), v->data().end());
  }
}

// EMA remainders of the mean network under "ema.<prefix>", restored after the
// values themselves.
void append_residual(TensorList& out, const std::string& prefix, const nn::Network& net) {
  for (const Parameter* p : net.parameters()) {
    if (const auto& r = p->ema_residual()) out.push_back({"ema." + prefix + p->name(), Tensor(p->tensor().shape(), *r)});
  }
}

void restore_residual(const TensorList& tensors, const std::string& prefix, nn::Network& net) {
  for (Parameter* p : net.parameters()) {
    const Tensor* r = find(tensors, "ema." + prefix + p->name());
    if (!r) continue;
    if (r->shape() != p->tensor().shape()) {
      throw FormatError("checkpoint EMA residual for '" + prefix + p->name() + "' has shape " + shape_str(r->shape()));
    }
    p->ema_residual() = std::vector<float>(r->data().begin(), r->data().end());
  }
}

Tensor counters_tensor(int epoch, std::size_t step) {
  return Tensor({2}, {static_cast<float>(epoch), static_cast<float>(step)});
}

}  // namespace

std::vector<std::uint8_t> encode(const TensorList& tensors) {
  std::set<std::string> seen;
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_u32(out, kFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, value] : tensors) {
    if (!seen.insert(name).second) throw ContractError("duplicate checkpoint name '" + name + "'");
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_u32(out, static_cast<std::uint32_t>(value.rank()));
    for (std::size_t d : value.shape()) put_u64(out, d);
    out.push_back(kDtypeF32);
  }
  const std::size_t payload_start = out.size();
  for (const auto& t : tensors) {
    for (float f : t.value.data()) put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  const std::uint32_t crc =
      crc_of(std::span<const std::uint8_t>(out).subspan(payload_start));
  put_u32(out, crc);
  return out;
}

TensorList decode(std::span<const std::uint8_t> bytes, std::string_view prefix) {
  Reader in(bytes);
  const auto magic = in.take(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw FormatError("not a checkpoint (bad magic)");
  const std::uint32_t version = in.u32();
  if (version != kFormatVersion) {
    throw UnsupportedVersionError("checkpoint format version " + std::to_string(version) +
                                  " is not supported (expected " +
                                  std::to_string(kFormatVersion) + ")");
  }
  const std::uint32_t count = in.u32();
  struct Entry {
    std::string name;
    Shape shape;
  };
  std::vector<Entry> manifest;
  std::set<std::string> seen;
  std::uint64_t payload_floats = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = in.u32();
    if (len > kMaxNameLength) throw FormatError("checkpoint manifest name is too long");
    const auto raw = in.take(len);
    Entry e{std::string(raw.begin(), raw.end()), {}};
    if (!seen.insert(e.name).second) throw FormatError("duplicate checkpoint name '" + e.name + "'");
    const std::uint32_t rank = in.u32();
    if (rank > kMaxRank) throw FormatError("checkpoint tensor '" + e.name + "' has rank " + std::to_string(rank));
    std::uint64_t numel = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const std::uint64_t d = in.u64();
      if (d != 0 && numel > (std::uint64_t{1} << 40) / d) throw FormatError("checkpoint dims overflow");
      numel *= d;
      e.shape.push_back(static_cast<std::size_t>(d));
    }
    if (in.u8() != kDtypeF32) throw FormatError("checkpoint tensor '" + e.name + "' has unknown dtype");
    payload_floats += numel;
    manifest.push_back(std::move(e));
  }
  if (in.remaining() != payload_floats * 4 + 4) {
    throw FormatError("checkpoint payload size does not match its manifest");
  }
  const auto payload = in.take(static_cast<std::size_t>(payload_floats * 4));
  const std::uint32_t stored_crc = in.u32();
  if (crc_of(payload) != stored_crc) throw CorruptionError("checkpoint CRC mismatch: payload is corrupted");

  TensorList out;
  std::size_t offset = 0;
  for (auto& e : manifest) {
    const std::size_t n = shape_numel(e.shape);
    if (starts_with(e.name, prefix)) {
      std::vector<float> values(n);
      for (std::size_t i = 0; i < n; ++i) {
        const std::uint8_t* b = payload.data() + offset + 4 * i;
        const std::uint32_t bits = static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
                                   static_cast<std::uint32_t>(b[2]) << 16 |
                                   static_cast<std::uint32_t>(b[3]) << 24;
        values[i] = std::bit_cast<float>(bits);
      }
      out.push_back({std::move(e.name), Tensor(std::move(e.shape), std::move(values))});
    }
    offset += 4 * n;
  }
  return out;
}

void save(const std::filesystem::path& path, const TensorList& tensors) {
  const auto bytes = encode(tensors);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing checkpoint " + path.string());
}

TensorList load(const std::filesystem::path& path, std::string_view prefix) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  return decode(bytes, prefix);
}

const Tensor* find(const TensorList& tensors, std::string_view name) {
  for (const auto& t : tensors) {
    if (t.name == name) return &t.value;
  }
  return nullptr;
}

std::vector<std::string> names(const TensorList& tensors) {
  std::vector<std::string> out;
  out.reserve(tensors.size());
  for (const auto& t : tensors) out.push_back(t.name);
  return out;
}

void append_network(TensorList& out, const std::string& prefix, const nn::Network& net) {
  append_params(out, prefix, net.parameters());
}

void restore_network(const TensorList& tensors, const std::string& prefix, nn::Network& net) {
  restore_list(tensors, prefix, net.parameters());
}

void restore_encoder(const TensorList& tensors, const std::string& prefix, nn::Encoder& encoder) {
  ParameterList params;
  encoder.collect(params);
  restore_list(tensors, prefix, params);
}

void append_bank(TensorList& out, const std::string& prefix, const MemoryBank& bank) {
  out.push_back({prefix + "keys", Tensor({bank.capacity(), bank.dim()}, bank.rows())});
  out.push_back({prefix + "state", Tensor({2}, {static_cast<float>(bank.write_ptr()),
                                                 static_cast<float>(bank.filled())})});
}

MemoryBank restore_bank(const TensorList& tensors, const std::string& prefix, BankView view) {
  const Tensor* keys = find(tensors, prefix + "keys");
  if (!keys || keys->rank() != 2) throw FormatError("checkpoint has no bank '" + prefix + "keys'");
  const Tensor& state = require(tensors, prefix + "state", {2});
  const auto s = state.data();
  return MemoryBank::from_rows(std::vector<float>(keys->data().begin(), keys->data().end()),
                               keys->dim(1), static_cast<std::size_t>(s[0]),
                               static_cast<std::size_t>(s[1]), view);
}

TensorList moco_tensors(const train::MocoState& state) {
  TensorList out;
  append_network(out, "query.", state.query);
  append_network(out, "key.", state.key);
  append_bank(out, "bank.", state.bank);
  append_momentum(out, "query.", state.query);
  append_residual(out, "key.", state.key);
  out.push_back({"state.counters", counters_tensor(state.epoch, state.step)});
  return out;
}

void restore_moco(const TensorList& tensors, train::MocoState& state) {
  restore_network(tensors, "query.", state.query);
  restore_network(tensors, "key.", state.key);
  restore_momentum(tensors, "query.", state.query);
  restore_residual(tensors, "key.", state.key);
  state.bank = restore_bank(tensors, "bank.", state.bank.view());
  const auto c = require(tensors, "state.counters", {2}).data();
  state.epoch = static_cast<int>(c[0]);
  state.step = static_cast<std::size_t>(c[1]);
}

TensorList distill_tensors(const train::DistillState& state) {
  TensorList out;
  const auto& a = state.assembly;
  append_network(out, "teacher.", a.teacher());
  append_network(out, "student.", a.student());
  append_network(out, "mean_student.", a.mean_student());
  append_bank(out, "bank_v.", state.bank_v);
  append_bank(out, "bank_v_prime.", state.bank_v_prime);
  append_momentum(out, "student.", a.student());
  append_residual(out, "mean_student.", a.mean_student());
  out.push_back({"state.counters", counters_tensor(state.epoch, state.step)});
  out.push_back({"state.head_frozen", Tensor({1}, {a.head_frozen() ? 1.0f : 0.0f})});
  return out;
}

void restore_distill(const TensorList& tensors, train::DistillState& state) {
  auto& a = state.assembly;
  restore_network(tensors, "teacher.", a.teacher());
  restore_network(tensors, "student.", a.student());
  restore_network(tensors, "mean_student.", a.mean_student());
  restore_momentum(tensors, "student.", a.student());
  restore_residual(tensors, "mean_student.", a.mean_student());
  state.bank_v = restore_bank(tensors, "bank_v.", BankView::kV);
  state.bank_v_prime = restore_bank(tensors, "bank_v_prime.", BankView::kVPrime);
  const auto c = require(tensors, "state.counters", {2}).data();
  state.epoch = static_cast<int>(c[0]);
  state.step = static_cast<std::size_t>(c[1]);
  if (a.mode() == nn::DistillMode::kRetro) {
    a.set_head_frozen(require(tensors, "state.head_frozen", {1}).data()[0] != 0.0f);
  }
}

}  // namespace retro::ckpt
