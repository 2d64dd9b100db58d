#pragma once

// Binary checkpoint container:
//   magic "CANET1" | u32 version | u64 blob length | JSON blob | u32 tensor count |
//   per tensor: u16 name length, name, u8 dtype, u8 rank, u32 dims[rank], payload |
//   u64 FNV-1a of everything before it.
// All integers and payloads are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "canet/core/tensor.hpp"
#include "canet/data/image_io.hpp"

namespace canet {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads assume a little-endian host");

inline constexpr char kCheckpointMagic[6] = {'C', 'A', 'N', 'E', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::string payload;  // raw little-endian values

  template <typename T>
  static NamedTensor from(std::string name, const Tensor<T>& t) {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    NamedTensor nt{std::move(name), std::is_same_v<T, float> ? DType::f32 : DType::f64, t.shape(), {}};
    nt.payload.assign(reinterpret_cast<const char*>(t.raw()), t.size() * sizeof(T));
    return nt;
  }

  template <typename T>
  Tensor<T> to() const {
    const bool match = (dtype == DType::f32 && std::is_same_v<T, float>) || (dtype == DType::f64 && std::is_same_v<T, double>);
    if (!match) throw CheckpointError("tensor " + name + ": dtype mismatch");
    Tensor<T> t(shape);
    std::memcpy(t.raw(), payload.data(), payload.size());
    return t;
  }
};

struct Checkpoint {
  nlohmann::json meta;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return &t;
    }
    return nullptr;
  }
};

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

namespace detail {

template <typename U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

class Reader {
 public:
  explicit Reader(std::string_view b) : bytes_(b) {}

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError(std::string("truncated checkpoint while reading ") + what);
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

inline std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::f32: return 4;
    case DType::f64: return 8;
  }
  throw CheckpointError("unknown dtype code");
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  const std::string blob = ck.meta.dump();
  detail::put<std::uint64_t>(out, blob.size());
  out += blob;
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) {
    if (t.name.size() > 0xffff) throw CheckpointError("tensor name too long: " + t.name);
    if (t.payload.size() != numel(t.shape) * detail::dtype_size(t.dtype)) {
      throw CheckpointError("tensor " + t.name + ": payload does not match shape " + to_string(t.shape));
    }
    detail::put<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
    out += t.name;
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dtype));
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    out += t.payload;
  }
  detail::put<std::uint64_t>(out, fnv1a64(out));
  return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < sizeof kCheckpointMagic + 8 ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
    throw CheckpointError("not a checkpoint: bad magic");
  }
  const auto body = bytes.substr(0, bytes.size() - 8);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body.size(), 8);
  if (stored != fnv1a64(body)) throw CheckpointError("checkpoint checksum mismatch");

  detail::Reader r(body);
  r.take(sizeof kCheckpointMagic, "magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  const auto blob_len = r.get<std::uint64_t>("config length");
  try {
    ck.meta = nlohmann::json::parse(r.take(blob_len, "config blob"));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint config: ") + e.what());
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const auto name_len = r.get<std::uint16_t>("name length");
    t.name = std::string(r.take(name_len, "tensor name"));
    const auto code = r.get<std::uint8_t>("dtype");
    if (code > 1) throw CheckpointError("tensor " + t.name + ": unknown dtype code " + std::to_string(code));
    t.dtype = static_cast<DType>(code);
    const auto rank = r.get<std::uint8_t>("rank");
    for (std::uint8_t k = 0; k < rank; ++k) t.shape.push_back(r.get<std::uint32_t>("dims"));
    t.payload = std::string(r.take(numel(t.shape) * detail::dtype_size(t.dtype), "tensor payload"));
    ck.tensors.push_back(std::move(t));
  }
  if (r.pos() != body.size()) throw CheckpointError("trailing bytes after tensor table");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(read_file(path));
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

}  // namespace canet
