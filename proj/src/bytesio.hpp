#ifndef INSITU_BYTESIO_HPP
#define INSITU_BYTESIO_HPP

#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include "value.hpp"

namespace insitu {

// Little-endian byte stream helpers. All on-disk and on-wire layouts go
// through these so the encoding is fixed regardless of host.

class ByteWriter {
 public:
  ByteWriter() = default;
  // Reserving up front lets checkpointing guarantee a single allocation;
  // alloc_count() reports how many growth allocations actually happened.
  explicit ByteWriter(std::size_t reserve_bytes) { buf_.reserve(reserve_bytes); }

  void put_u8(std::uint8_t v) { append(&v, 1); }
  void put_u16(std::uint16_t v) { put_le(v); }
  void put_u32(std::uint32_t v) { put_le(v); }
  void put_u64(std::uint64_t v) { put_le(v); }
  void put_i64(std::int64_t v) { put_le(static_cast<std::uint64_t>(v)); }
  void put_f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_le(bits);
  }
  void put_str(const std::string& s) {
    put_u32(static_cast<std::uint32_t>(s.size()));
    append(s.data(), s.size());
  }
  void put_bytes(const void* p, std::size_t n) { append(p, n); }

  void put_f64_vec(const std::vector<double>& v) {
    put_u64(v.size());
    for (double d : v) put_f64(d);
  }
  void put_i64_vec(const std::vector<std::int64_t>& v) {
    put_u64(v.size());
    for (auto d : v) put_i64(d);
  }
  void put_size_vec(const std::vector<std::size_t>& v) {
    put_u64(v.size());
    for (auto d : v) put_u64(d);
  }
  void put_value(const Value& v) {
    put_u8(static_cast<std::uint8_t>(v.type));
    put_size_vec(v.shape);
    put_f64_vec(v.dbl);
    put_i64_vec(v.i64);
    put_str(v.str);
  }

  const std::vector<std::uint8_t>& bytes() const { return buf_; }
  std::vector<std::uint8_t> take() { return std::move(buf_); }
  std::size_t size() const { return buf_.size(); }
  std::size_t alloc_count() const { return allocs_; }

 private:
  template <typename T>
  void put_le(T v) {
    std::uint8_t tmp[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) tmp[i] = std::uint8_t(v >> (8 * i));
    append(tmp, sizeof(T));
  }
  void append(const void* p, std::size_t n) {
    if (buf_.size() + n > buf_.capacity()) ++allocs_;
    auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  std::vector<std::uint8_t> buf_;
  std::size_t allocs_ = 0;
};

// Mirror of ByteWriter that only tallies sizes. Used for the size-walk
// phase so the serialize phase can allocate exactly once.
class ByteCounter {
 public:
  void put_u8(std::uint8_t) { n_ += 1; }
  void put_u16(std::uint16_t) { n_ += 2; }
  void put_u32(std::uint32_t) { n_ += 4; }
  void put_u64(std::uint64_t) { n_ += 8; }
  void put_i64(std::int64_t) { n_ += 8; }
  void put_f64(double) { n_ += 8; }
  void put_str(const std::string& s) { n_ += 4 + s.size(); }
  void put_bytes(const void*, std::size_t n) { n_ += n; }
  void put_f64_vec(const std::vector<double>& v) { n_ += 8 + 8 * v.size(); }
  void put_i64_vec(const std::vector<std::int64_t>& v) { n_ += 8 + 8 * v.size(); }
  void put_size_vec(const std::vector<std::size_t>& v) { n_ += 8 + 8 * v.size(); }
  void put_value(const Value& v) {
    n_ += 1;
    put_size_vec(v.shape);
    put_f64_vec(v.dbl);
    put_i64_vec(v.i64);
    put_str(v.str);
  }
  std::size_t size() const { return n_; }

 private:
  std::size_t n_ = 0;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t size) : p_(data), end_(data + size) {}
  explicit ByteReader(const std::vector<std::uint8_t>& v) : ByteReader(v.data(), v.size()) {}

  std::uint8_t get_u8() { return take<std::uint8_t>(); }
  std::uint16_t get_u16() { return take<std::uint16_t>(); }
  std::uint32_t get_u32() { return take<std::uint32_t>(); }
  std::uint64_t get_u64() { return take<std::uint64_t>(); }
  std::int64_t get_i64() { return static_cast<std::int64_t>(take<std::uint64_t>()); }
  double get_f64() {
    std::uint64_t bits = take<std::uint64_t>();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string get_str() {
    std::uint32_t n = get_u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(p_), n);
    p_ += n;
    return s;
  }
  std::vector<double> get_f64_vec() {
    std::uint64_t n = get_u64();
    std::vector<double> v(n);
    for (auto& d : v) d = get_f64();
    return v;
  }
  std::vector<std::int64_t> get_i64_vec() {
    std::uint64_t n = get_u64();
    std::vector<std::int64_t> v(n);
    for (auto& d : v) d = get_i64();
    return v;
  }
  std::vector<std::size_t> get_size_vec() {
    std::uint64_t n = get_u64();
    std::vector<std::size_t> v(n);
    for (auto& d : v) d = get_u64();
    return v;
  }
  Value get_value() {
    Value v;
    v.type = static_cast<DataType>(get_u8());
    v.shape = get_size_vec();
    v.dbl = get_f64_vec();
    v.i64 = get_i64_vec();
    v.str = get_str();
    return v;
  }
  void get_bytes(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, p_, n);
    p_ += n;
  }

  std::size_t remaining() const { return std::size_t(end_ - p_); }
  bool done() const { return p_ == end_; }

 private:
  template <typename T>
  T take() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= T(p_[i]) << (8 * i);
    p_ += sizeof(T);
    return v;
  }
  void need(std::size_t n) const {
    if (std::size_t(end_ - p_) < n) throw std::runtime_error("byte stream truncated");
  }
  const std::uint8_t* p_;
  const std::uint8_t* end_;
};

}  // namespace insitu

#endif
