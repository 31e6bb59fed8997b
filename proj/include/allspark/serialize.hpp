#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "allspark/errors.hpp"
#include "allspark/tensor.hpp"

namespace allspark {

// Tensor file layout ("ASTF"): magic 41 53 54 46, version byte 1, dtype byte
// (0=f32, 1=f64, 2=u8, 3=i32), rank byte, rank x u32 little-endian dims,
// row-major little-endian payload.
//
// Checkpoint layout ("ASCK"): magic 41 53 43 4B, u32 entry count, then per
// entry u16 name length + UTF-8 name + an embedded ASTF record.

enum class Dtype : std::uint8_t { f32 = 0, f64 = 1, u8 = 2, i32 = 3 };

inline std::size_t dtype_size(Dtype d) {
  switch (d) {
    case Dtype::f32: return 4;
    case Dtype::f64: return 8;
    case Dtype::u8: return 1;
    case Dtype::i32: return 4;
  }
  throw format_error("unknown dtype byte " +
                     std::to_string(static_cast<int>(d)));
}

/// Type-erased tensor payload as stored on disk (always little-endian bytes).
struct RawTensor {
  Dtype dtype = Dtype::f32;
  Shape shape;
  std::vector<std::uint8_t> bytes;

  std::size_t numel() const { return shape_numel(shape); }
};

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) {
    out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
}

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t size, std::size_t base = 0)
      : data_(data), size_(size), base_(base) {}

  std::size_t offset() const { return base_ + pos_; }
  std::size_t remaining() const { return size_ - pos_; }

  std::uint8_t u8(const char* what) {
    need(1, what);
    return data_[pos_++];
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = static_cast<std::uint16_t>(data_[pos_]) |
                      static_cast<std::uint16_t>(data_[pos_ + 1]) << 8;
    pos_ += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(data_[pos_ + static_cast<std::size_t>(i)])
           << (8 * i);
    }
    pos_ += 4;
    return v;
  }
  const std::uint8_t* raw(std::size_t n, const char* what) {
    need(n, what);
    const std::uint8_t* p = data_ + pos_;
    pos_ += n;
    return p;
  }

 private:
  void need(std::size_t n, const char* what) {
    if (pos_ + n > size_) {
      throw format_error(std::string("truncated file: ") + what +
                         " at offset " + std::to_string(offset()));
    }
  }
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t base_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> encode_record(const RawTensor& t) {
  if (t.shape.size() > 255) throw contract_error("rank exceeds format limit");
  if (t.bytes.size() != t.numel() * dtype_size(t.dtype)) {
    throw contract_error("payload size does not match shape");
  }
  std::vector<std::uint8_t> out;
  out.reserve(8 + 4 * t.shape.size() + t.bytes.size());
  out.insert(out.end(), {0x41, 0x53, 0x54, 0x46});  // "ASTF"
  out.push_back(1);
  out.push_back(static_cast<std::uint8_t>(t.dtype));
  out.push_back(static_cast<std::uint8_t>(t.shape.size()));
  for (std::size_t d : t.shape) {
    if (d > 0xffffffffULL) throw contract_error("dimension exceeds u32");
    put_u32(out, static_cast<std::uint32_t>(d));
  }
  out.insert(out.end(), t.bytes.begin(), t.bytes.end());
  return out;
}

inline RawTensor decode_record(ByteReader& r) {
  const std::size_t magic_at = r.offset();
  const std::uint8_t m0 = r.u8("magic"), m1 = r.u8("magic"),
                     m2 = r.u8("magic"), m3 = r.u8("magic");
  if (m0 != 0x41 || m1 != 0x53 || m2 != 0x54 || m3 != 0x46) {
    throw format_error("bad tensor magic at offset " +
                       std::to_string(magic_at));
  }
  const std::size_t ver_at = r.offset();
  const std::uint8_t version = r.u8("version");
  if (version != 1) {
    throw format_error("unsupported version " + std::to_string(version) +
                       " at offset " + std::to_string(ver_at));
  }
  const std::size_t dtype_at = r.offset();
  const std::uint8_t dt = r.u8("dtype");
  if (dt > 3) {
    throw format_error("unknown dtype " + std::to_string(dt) + " at offset " +
                       std::to_string(dtype_at));
  }
  RawTensor t;
  t.dtype = static_cast<Dtype>(dt);
  const std::uint8_t rank = r.u8("rank");
  t.shape.resize(rank);
  for (std::uint8_t i = 0; i < rank; ++i) t.shape[i] = r.u32("dimension");
  const std::size_t payload = t.numel() * dtype_size(t.dtype);
  const std::uint8_t* p = r.raw(payload, "payload");
  t.bytes.assign(p, p + payload);
  return t;
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw format_error("cannot open " + path);
  std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  return data;
}

inline void write_file(const std::string& path,
                       const std::vector<std::uint8_t>& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw format_error("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size()));
  if (!out) throw format_error("short write to " + path);
}

template <typename T>
constexpr Dtype dtype_of() {
  if constexpr (std::is_same_v<T, float>) {
    return Dtype::f32;
  } else if constexpr (std::is_same_v<T, double>) {
    return Dtype::f64;
  } else if constexpr (std::is_same_v<T, std::uint8_t>) {
    return Dtype::u8;
  } else {
    static_assert(std::is_same_v<T, std::int32_t>, "unsupported element type");
    return Dtype::i32;
  }
}

template <typename T, typename U>
std::vector<std::uint8_t> to_le_bytes(std::span<const U> values) {
  std::vector<std::uint8_t> bytes(values.size() * sizeof(T));
  for (std::size_t i = 0; i < values.size(); ++i) {
    if constexpr (sizeof(T) == 1) {
      bytes[i] = static_cast<std::uint8_t>(values[i]);
    } else if constexpr (sizeof(T) == 4) {
      const auto u = std::bit_cast<std::uint32_t>(static_cast<T>(values[i]));
      for (int b = 0; b < 4; ++b) {
        bytes[i * 4 + static_cast<std::size_t>(b)] =
            static_cast<std::uint8_t>(u >> (8 * b));
      }
    } else {
      const auto u = std::bit_cast<std::uint64_t>(static_cast<T>(values[i]));
      for (int b = 0; b < 8; ++b) {
        bytes[i * 8 + static_cast<std::size_t>(b)] =
            static_cast<std::uint8_t>(u >> (8 * b));
      }
    }
  }
  return bytes;
}

template <typename T>
std::vector<T> from_le_bytes(std::span<const std::uint8_t> bytes) {
  std::vector<T> values(bytes.size() / sizeof(T));
  for (std::size_t i = 0; i < values.size(); ++i) {
    if constexpr (sizeof(T) == 1) {
      values[i] = static_cast<T>(bytes[i]);
    } else if constexpr (sizeof(T) == 4) {
      std::uint32_t u = 0;
      for (int b = 0; b < 4; ++b) {
        u |= static_cast<std::uint32_t>(bytes[i * 4 + static_cast<std::size_t>(b)])
             << (8 * b);
      }
      values[i] = std::bit_cast<T>(u);
    } else {
      std::uint64_t u = 0;
      for (int b = 0; b < 8; ++b) {
        u |= static_cast<std::uint64_t>(bytes[i * 8 + static_cast<std::size_t>(b)])
             << (8 * b);
      }
      values[i] = std::bit_cast<T>(u);
    }
  }
  return values;
}

}  // namespace detail

template <typename T>
RawTensor raw_from_tensor(const Tensor<T>& t) {
  RawTensor r;
  r.dtype = detail::dtype_of<T>();
  r.shape = t.shape();
  r.bytes = detail::to_le_bytes<T, T>(t.values());
  return r;
}

inline RawTensor raw_from_u8(Shape shape, std::span<const std::uint8_t> data) {
  RawTensor r;
  r.dtype = Dtype::u8;
  r.shape = std::move(shape);
  r.bytes.assign(data.begin(), data.end());
  if (r.bytes.size() != r.numel()) {
    throw contract_error("u8 payload does not match shape");
  }
  return r;
}

inline RawTensor raw_from_i32(Shape shape, std::span<const std::int32_t> data) {
  RawTensor r;
  r.dtype = Dtype::i32;
  r.shape = std::move(shape);
  r.bytes = detail::to_le_bytes<std::int32_t, std::int32_t>(data);
  if (data.size() != r.numel()) {
    throw contract_error("i32 payload does not match shape");
  }
  return r;
}

template <typename T>
Tensor<T> tensor_from_raw(const RawTensor& r) {
  if (r.dtype != detail::dtype_of<T>()) {
    throw format_error("dtype mismatch: file holds dtype " +
                       std::to_string(static_cast<int>(r.dtype)) +
                       ", requested " +
                       std::to_string(static_cast<int>(detail::dtype_of<T>())));
  }
  return Tensor<T>(r.shape, detail::from_le_bytes<T>(r.bytes));
}

inline std::vector<std::uint8_t> u8_from_raw(const RawTensor& r) {
  if (r.dtype != Dtype::u8) {
    throw format_error("dtype mismatch: expected u8, file holds dtype " +
                       std::to_string(static_cast<int>(r.dtype)));
  }
  return r.bytes;
}

inline void save_tensor(const std::string& path, const RawTensor& t) {
  detail::write_file(path, detail::encode_record(t));
}

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& t) {
  save_tensor(path, raw_from_tensor(t));
}

inline RawTensor load_tensor(const std::string& path) {
  const auto data = detail::read_file(path);
  detail::ByteReader r(data.data(), data.size());
  RawTensor t = detail::decode_record(r);
  if (r.remaining() != 0) {
    throw format_error("trailing bytes at offset " + std::to_string(r.offset()) +
                       " in " + path);
  }
  return t;
}

template <typename T>
Tensor<T> load_tensor_as(const std::string& path) {
  return tensor_from_raw<T>(load_tensor(path));
}

/// Ordered named-tensor container; ordering is part of the byte format, so
/// identical contents serialize to identical files.
struct Checkpoint {
  std::vector<std::pair<std::string, RawTensor>> entries;

  void add(std::string name, RawTensor t) {
    entries.emplace_back(std::move(name), std::move(t));
  }

  const RawTensor* find(const std::string& name) const {
    for (const auto& [n, t] : entries) {
      if (n == name) return &t;
    }
    return nullptr;
  }
};

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), {0x41, 0x53, 0x43, 0x4B});  // "ASCK"
  if (ck.entries.size() > 0xffffffffULL) {
    throw contract_error("too many checkpoint entries");
  }
  detail::put_u32(out, static_cast<std::uint32_t>(ck.entries.size()));
  for (const auto& [name, tensor] : ck.entries) {
    if (name.size() > 0xffff) throw contract_error("entry name too long");
    detail::put_u16(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    const auto rec = detail::encode_record(tensor);
    out.insert(out.end(), rec.begin(), rec.end());
  }
  detail::write_file(path, out);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  const auto data = detail::read_file(path);
  detail::ByteReader r(data.data(), data.size());
  const std::size_t magic_at = r.offset();
  const std::uint8_t m0 = r.u8("magic"), m1 = r.u8("magic"),
                     m2 = r.u8("magic"), m3 = r.u8("magic");
  if (m0 != 0x41 || m1 != 0x53 || m2 != 0x43 || m3 != 0x4B) {
    throw format_error("bad checkpoint magic at offset " +
                       std::to_string(magic_at));
  }
  const std::uint32_t count = r.u32("entry count");
  Checkpoint ck;
  ck.entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t name_len = r.u16("name length");
    const std::uint8_t* nm = r.raw(name_len, "name");
    std::string name(reinterpret_cast<const char*>(nm), name_len);
    ck.add(std::move(name), detail::decode_record(r));
  }
  if (r.remaining() != 0) {
    throw format_error("trailing bytes at offset " + std::to_string(r.offset()) +
                       " in " + path);
  }
  return ck;
}

}  // namespace allspark
