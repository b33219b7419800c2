#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "chainflow/tensor.hpp"

namespace chainflow {

// Checkpoint container, little-endian throughout:
//
//   u32  magic            "CFKP" (0x504b4643)
//   u32  format_version   1
//   u64  config_digest    hash of the model-relevant config
//   u32  n_entries
//   per entry:
//     u32  name_len, name bytes
//     u8   dtype          1 = f64, 2 = f32
//     u8   ndim, u32 dims[ndim]
//     raw  values, row-major
//
// f64 round-trips bit-exactly; f32 is a narrowing storage option.

constexpr std::uint32_t kCheckpointMagic = 0x504b4643u;
constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f64(std::string& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  put_u64(out, bits);
}
inline void put_f32(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

class Reader {
 public:
  Reader(const std::string& buf, const std::string& path) : buf_(buf), path_(path) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    const std::uint64_t lo = u32();
    const std::uint64_t hi = u32();
    return lo | (hi << 32);
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(buf_[pos_++]);
  }
  double f64() {
    std::uint64_t bits = u64();
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
  }
  float f32() {
    std::uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
  std::string str(std::size_t len) {
    need(len);
    std::string s = buf_.substr(pos_, len);
    pos_ += len;
    return s;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) {
    if (pos_ + n > buf_.size()) {
      throw std::runtime_error("checkpoint '" + path_ + "': truncated at byte " +
                               std::to_string(pos_));
    }
  }
  const std::string& buf_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

enum class CheckpointDtype : std::uint8_t { f64 = 1, f32 = 2 };

inline void save_checkpoint(const ParamStore& ps, const std::string& path,
                            std::uint64_t config_digest,
                            CheckpointDtype dtype = CheckpointDtype::f64) {
  std::string out;
  detail::put_u32(out, kCheckpointMagic);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, config_digest);
  detail::put_u32(out, static_cast<std::uint32_t>(ps.names().size()));
  for (const auto& name : ps.names()) {
    const Array& a = ps.value(name);
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(dtype));
    out.push_back(static_cast<char>(a.shape.size()));
    for (int d : a.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : a.data) {
      if (dtype == CheckpointDtype::f64)
        detail::put_f64(out, v);
      else
        detail::put_f32(out, static_cast<float>(v));
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("checkpoint: cannot open for write: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("checkpoint: write failed: " + path);
}

struct CheckpointInfo {
  std::uint64_t config_digest = 0;
};

// Loads entries into a fresh store. Shapes and names come from the file;
// callers validate the digest against their own config.
inline CheckpointInfo load_checkpoint(ParamStore& ps, const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  detail::Reader r(buf, path);
  if (r.u32() != kCheckpointMagic) {
    throw std::runtime_error("checkpoint '" + path + "': bad magic");
  }
  const std::uint32_t ver = r.u32();
  if (ver != kCheckpointVersion) {
    throw std::runtime_error("checkpoint '" + path + "': unsupported format_version " +
                             std::to_string(ver));
  }
  CheckpointInfo info;
  info.config_digest = r.u64();
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::uint32_t name_len = r.u32();
    const std::string name = r.str(name_len);
    const std::uint8_t dtype = r.u8();
    const std::uint8_t ndim = r.u8();
    std::vector<int> shape;
    std::size_t count = 1;
    for (std::uint8_t d = 0; d < ndim; ++d) {
      shape.push_back(static_cast<int>(r.u32()));
      count *= static_cast<std::size_t>(shape.back());
    }
    Array a;
    a.shape = shape;
    a.data.resize(count);
    for (std::size_t j = 0; j < count; ++j) {
      if (dtype == static_cast<std::uint8_t>(CheckpointDtype::f64))
        a.data[j] = r.f64();
      else if (dtype == static_cast<std::uint8_t>(CheckpointDtype::f32))
        a.data[j] = static_cast<double>(r.f32());
      else
        throw std::runtime_error("checkpoint '" + path + "': unknown dtype " +
                                 std::to_string(dtype) + " for '" + name + "'");
    }
    if (ps.has(name)) {
      Array& dst = ps.entry(name).value;
      if (dst.rows() != a.rows() || dst.cols() != a.cols()) {
        throw std::runtime_error("checkpoint '" + path + "': shape mismatch for '" +
                                 name + "': file " + shape_str(a) + " vs store " +
                                 shape_str(dst));
      }
      dst = std::move(a);
    } else {
      ps.create(name, std::move(a));
    }
  }
  if (!r.done()) {
    throw std::runtime_error("checkpoint '" + path + "': trailing bytes");
  }
  return info;
}

}  // namespace chainflow
