#pragma once

// Little-endian byte packing shared by every on-wire and on-disk format.

#include <array>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "insitu/errors.hpp"

namespace insitu::wire {

static_assert(std::endian::native == std::endian::little,
              "wire formats are little-endian and assume a little-endian host");

using Bytes = std::vector<std::uint8_t>;

class Writer {
 public:
  Writer() = default;
  explicit Writer(std::size_t reserve) { buf_.reserve(reserve); }

  void magic(std::string_view m) { bytes(m.data(), m.size()); }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put(v); }
  void u32(std::uint32_t v) { put(v); }
  void u64(std::uint64_t v) { put(v); }
  void f32(float v) { put(v); }
  void f64(double v) { put(v); }
  void bytes(const void* p, std::size_t n) {
    auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void bytes(std::span<const std::uint8_t> s) { bytes(s.data(), s.size()); }

  std::size_t size() const { return buf_.size(); }
  Bytes& buffer() { return buf_; }
  Bytes take() { return std::move(buf_); }

 private:
  template <typename T>
  void put(T v) {
    std::array<std::uint8_t, sizeof(T)> raw;
    std::memcpy(raw.data(), &v, sizeof(T));
    buf_.insert(buf_.end(), raw.begin(), raw.end());
  }

  Bytes buf_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> data) : data_(data) {}

  void expect_magic(std::string_view m) {
    need(m.size());
    if (std::memcmp(data_.data() + pos_, m.data(), m.size()) != 0) {
      throw ProtocolError("bad magic, expected '" + std::string(m) + "'");
    }
    pos_ += m.size();
  }
  bool peek_magic(std::string_view m) const {
    return remaining() >= m.size() &&
           std::memcmp(data_.data() + pos_, m.data(), m.size()) == 0;
  }
  std::uint8_t u8() { return get<std::uint8_t>(); }
  std::uint16_t u16() { return get<std::uint16_t>(); }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  float f32() { return get<float>(); }
  double f64() { return get<double>(); }
  std::span<const std::uint8_t> bytes(std::size_t n) {
    need(n);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::string string(std::size_t n) {
    auto s = bytes(n);
    return std::string(s.begin(), s.end());
  }

  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) throw ProtocolError("truncated message");
  }
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

}  // namespace insitu::wire
