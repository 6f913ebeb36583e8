#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "ldl/error.hpp"
#include "ldl/network.hpp"
#include "ldl/tensor.hpp"

namespace ldl {

// Layout (little-endian):
//   "LDLN" | u32 version | u32 spec length | spec text | u64 iteration | u32 record count |
//   records: u32 name length | name | u32 rank | u64 dims[rank] | f32 data[prod(dims)]
// Records hold trainable parameters followed by batch-norm running statistics.
inline constexpr char kCheckpointMagic[4] = {'L', 'D', 'L', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor<float> value;
  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

struct Checkpoint {
  NetworkSpec spec;
  std::uint64_t iteration = 0;
  std::vector<NamedTensor> tensors;
};

template <typename T>
Checkpoint make_checkpoint(const Network<T>& net, std::uint64_t iteration = 0) {
  Checkpoint c;
  c.spec = net.spec();
  c.iteration = iteration;
  const auto& store = net.parameters();
  for (std::size_t i = 0; i < store.size(); ++i)
    c.tensors.push_back({store[i].name, Tensor<float>::cast(store[i].value)});
  for (std::size_t i = 0; i < store.buffer_count(); ++i)
    c.tensors.push_back({store.buffer_at(i).name, Tensor<float>::cast(store.buffer_at(i).value)});
  return c;
}

/// Rebuilds a network from a checkpoint; every parameter and buffer the spec
/// implies must be present with the implied shape.
template <typename T>
Network<T> network_from_checkpoint(const Checkpoint& c) {
  Network<T> net(c.spec);
  auto& store = net.parameters();
  const std::size_t expected = store.size() + store.buffer_count();
  if (c.tensors.size() != expected) {
    throw FormatError("checkpoint holds " + std::to_string(c.tensors.size()) + " tensors, spec implies " +
                      std::to_string(expected));
  }
  for (const auto& t : c.tensors) {
    Tensor<T>* slot = nullptr;
    if (store.contains(t.name)) slot = &store.at(t.name).value;
    else if (store.contains_buffer(t.name)) slot = &store.buffer(t.name);
    else throw FormatError("checkpoint tensor '" + t.name + "' is not part of the network");
    if (slot->shape() != t.value.shape()) {
      throw FormatError("checkpoint tensor '" + t.name + "' has shape " + shape_string(t.value.shape()) +
                        ", network expects " + shape_string(slot->shape()));
    }
    *slot = Tensor<T>::cast(t.value);
  }
  return net;
}

namespace detail {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    out_.insert(out_.end(), c, c + n);
  }
  void u32(std::uint32_t v) { le(v); }
  void u64(std::uint64_t v) { le(v); }
  void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }
  std::vector<char> take() { return std::move(out_); }

 private:
  template <typename U>
  void le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::vector<char> out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const char> data) : data_(data) {}
  void bytes(void* p, std::size_t n, const char* what) {
    need(n, what);
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32(const char* what) { return le<std::uint32_t>(what); }
  std::uint64_t u64(const char* what) { return le<std::uint64_t>(what); }
  float f32(const char* what) { return std::bit_cast<float>(le<std::uint32_t>(what)); }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (remaining() < n) {
      throw TruncationError(std::string("checkpoint truncated while reading ") + what + " at byte " +
                            std::to_string(pos_));
    }
  }
  template <typename U>
  U le(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  std::span<const char> data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<char> encode_checkpoint(const Checkpoint& c) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  const std::string spec = c.spec.encode();
  w.u32(static_cast<std::uint32_t>(spec.size()));
  w.bytes(spec.data(), spec.size());
  w.u64(c.iteration);
  w.u32(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    w.u32(static_cast<std::uint32_t>(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    w.u32(static_cast<std::uint32_t>(t.value.rank()));
    for (auto d : t.value.shape()) w.u64(d);
    for (float v : t.value.data()) w.f32(v);
  }
  return w.take();
}

inline Checkpoint decode_checkpoint(std::span<const char> data) {
  detail::ByteReader r(data);
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw BadMagicError("not a checkpoint: bad magic bytes");
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw VersionMismatchError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                               std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint c;
  const auto spec_len = r.u32("spec length");
  std::string spec(spec_len, '\0');
  r.bytes(spec.data(), spec_len, "spec");
  c.spec = NetworkSpec::decode(spec);
  c.iteration = r.u64("iteration");
  const auto count = r.u32("record count");
  for (std::uint32_t k = 0; k < count; ++k) {
    NamedTensor t;
    const auto name_len = r.u32("name length");
    t.name.assign(name_len, '\0');
    r.bytes(t.name.data(), name_len, "name");
    const auto rank = r.u32("rank");
    if (rank == 0 || rank > 8) throw FormatError("tensor '" + t.name + "' has invalid rank " + std::to_string(rank));
    Shape shape(rank);
    std::size_t total = 1;
    for (auto& d : shape) {
      d = static_cast<std::size_t>(r.u64("dims"));
      if (d == 0) throw FormatError("tensor '" + t.name + "' has a zero dimension");
      total *= d;
    }
    if (total > r.remaining() / 4) {
      throw TruncationError("checkpoint truncated inside tensor '" + t.name + "'");
    }
    std::vector<float> values(total);
    for (auto& v : values) v = r.f32("tensor data");
    t.value = Tensor<float>(std::move(shape), std::move(values));
    c.tensors.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw FormatError("checkpoint has " + std::to_string(r.remaining()) + " trailing bytes");
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FileError("cannot write checkpoint '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FileError("failed writing checkpoint '" + path.string() + "'");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open checkpoint '" + path.string() + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace ldl
