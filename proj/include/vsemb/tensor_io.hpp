#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "vsemb/common.hpp"
#include "vsemb/tensor.hpp"

namespace vsemb {

// VSEF tensor file layout, all little-endian:
//   magic "VSEF" | version u8 = 1 | rank u32 | dims u32 x rank | values f32
// Values are row-major. Round-trips are byte-exact.

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  b[0] = char(v & 0xff);
  b[1] = char((v >> 8) & 0xff);
  b[2] = char((v >> 16) & 0xff);
  b[3] = char((v >> 24) & 0xff);
  out.append(b, 4);
}

inline void put_u64(std::string& out, std::uint64_t v) {
  put_u32(out, std::uint32_t(v & 0xffffffffu));
  put_u32(out, std::uint32_t(v >> 32));
}

inline void put_f32(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

inline void put_f64(std::string& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  put_u64(out, bits);
}

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string origin)
      : bytes_(bytes), origin_(std::move(origin)) {}

  std::uint8_t u8() {
    need(1);
    return std::uint8_t(bytes_[pos_++]);
  }

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i)
      v = (v << 8) | std::uint8_t(bytes_[pos_ + std::size_t(i)]);
    pos_ += 4;
    return v;
  }

  std::uint64_t u64() {
    const std::uint64_t lo = u32();
    const std::uint64_t hi = u32();
    return lo | (hi << 32);
  }

  float f32() {
    const std::uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }

  double f64() {
    const std::uint64_t bits = u64();
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
  }

  std::string raw(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

  void expect_exhausted() const {
    if (pos_ != bytes_.size())
      throw FormatError(origin_ + ": trailing bytes after payload");
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size())
      throw FormatError(origin_ + ": truncated payload");
  }

  const std::string& bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open file: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  return bytes;
}

inline void write_file_bytes(const std::filesystem::path& path,
                             const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open file for writing: " + path.string());
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw FormatError("write failed: " + path.string());
}

}  // namespace detail

inline constexpr char kTensorMagic[4] = {'V', 'S', 'E', 'F'};
inline constexpr std::uint8_t kTensorVersion = 1;

inline std::string encode_tensor(const Tensor& t) {
  std::string out;
  out.append(kTensorMagic, 4);
  out.push_back(char(kTensorVersion));
  detail::put_u32(out, std::uint32_t(t.rank()));
  for (std::size_t d : t.dims()) detail::put_u32(out, std::uint32_t(d));
  for (double v : t.values()) detail::put_f32(out, float(v));
  return out;
}

inline Tensor decode_tensor(const std::string& bytes, const std::string& origin) {
  detail::ByteReader r(bytes, origin);
  const std::string magic = r.raw(4);
  if (std::memcmp(magic.data(), kTensorMagic, 4) != 0)
    throw FormatError(origin + ": bad magic, not a VSEF tensor");
  const std::uint8_t ver = r.u8();
  if (ver != kTensorVersion)
    throw FormatError(origin + ": unsupported VSEF version " + std::to_string(ver));
  const std::uint32_t rank = r.u32();
  if (rank > 8) throw FormatError(origin + ": implausible rank");
  std::vector<std::size_t> dims(rank);
  std::size_t numel = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    dims[i] = r.u32();
    if (dims[i] == 0) throw FormatError(origin + ": zero dimension");
    numel *= dims[i];
  }
  std::vector<double> data(numel);
  for (std::size_t i = 0; i < numel; ++i) data[i] = double(r.f32());
  r.expect_exhausted();
  Tensor t(std::move(dims), std::move(data));
  if (!t.all_finite()) throw FormatError(origin + ": non-finite values");
  return t;
}

inline void write_tensor_file(const Tensor& t, const std::filesystem::path& path) {
  detail::write_file_bytes(path, encode_tensor(t));
}

inline Tensor read_tensor_file(const std::filesystem::path& path) {
  return decode_tensor(detail::read_file_bytes(path), path.string());
}

}  // namespace vsemb
