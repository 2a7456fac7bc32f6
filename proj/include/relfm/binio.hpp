#pragma once

// Little-endian primitives shared by the REMB, RFMP and graph file formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "relfm/error.hpp"

namespace relfm::binio {

class Writer {
 public:
  template <typename U>
    requires std::is_integral_v<U>
  void put(U v) {
    using Un = std::make_unsigned_t<U>;
    auto u = static_cast<Un>(v);
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
  }
  void put_f32(float v) { put(std::bit_cast<std::uint32_t>(v)); }
  void put_bytes(std::string_view s) { buf_.append(s); }
  void put_str16(std::string_view s) {
    if (s.size() > 0xFFFF) throw Error("string too long for u16 length prefix");
    put(static_cast<std::uint16_t>(s.size()));
    put_bytes(s);
  }
  void put_str32(std::string_view s) {
    put(static_cast<std::uint32_t>(s.size()));
    put_bytes(s);
  }

  const std::string& bytes() const { return buf_; }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw IoError("write failed: " + path.string());
  }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}

  static Reader from_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path.string());
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return Reader(std::move(data));
  }

  template <typename U>
    requires std::is_integral_v<U>
  U get() {
    need(sizeof(U));
    std::make_unsigned_t<U> u = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      u |= static_cast<std::make_unsigned_t<U>>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return static_cast<U>(u);
  }
  float get_f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string get_str16() { return get_bytes(get<std::uint16_t>()); }
  std::string get_str32() { return get_bytes(get<std::uint32_t>()); }

  bool at_end() const { return pos_ == data_.size(); }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw Error("unexpected end of file");
  }
  std::string data_;
  std::size_t pos_ = 0;
};

}  // namespace relfm::binio
