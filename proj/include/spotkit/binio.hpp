#pragma once

// Little-endian primitives for the binary artifact formats.

#include <array>
#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <string_view>

#include "spotkit/error.hpp"

namespace spotkit::binio {

class Writer {
 public:
  explicit Writer(const std::string& path) : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    require(static_cast<bool>(out_), ErrorKind::missing_file, "cannot open for writing: " + path);
  }

  void magic(std::string_view m) { out_.write(m.data(), static_cast<std::streamsize>(m.size())); }

  void u32(std::uint32_t v) {
    std::array<char, 4> b{};
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
    out_.write(b.data(), 4);
  }

  void u64(std::uint64_t v) {
    std::array<char, 8> b{};
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
    out_.write(b.data(), 8);
  }

  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

  void bytes(std::string_view s) { out_.write(s.data(), static_cast<std::streamsize>(s.size())); }

  void close() {
    out_.close();
    require(!out_.fail(), ErrorKind::missing_file, "write failed: " + path_);
  }

 private:
  std::string path_;
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    require(static_cast<bool>(in_), ErrorKind::missing_file, "cannot open: " + path);
  }

  void expect_magic(std::string_view m) {
    std::string got(m.size(), '\0');
    in_.read(got.data(), static_cast<std::streamsize>(m.size()));
    require(in_ && got == m, ErrorKind::format, path_ + ": bad magic, expected " + std::string(m));
  }

  std::uint32_t u32() {
    std::array<unsigned char, 4> b{};
    read_raw(b.data(), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }

  std::uint64_t u64() {
    std::array<unsigned char, 8> b{};
    read_raw(b.data(), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }

  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }

  std::string bytes(std::size_t n) {
    std::string s(n, '\0');
    read_raw(s.data(), n);
    return s;
  }

  void expect_version(std::uint32_t expected) {
    const std::uint32_t v = u32();
    require(v == expected, ErrorKind::version_mismatch,
            path_ + ": schema version " + std::to_string(v) + ", expected " + std::to_string(expected));
  }

  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }
  const std::string& path() const { return path_; }

 private:
  void read_raw(void* dst, std::size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    require(static_cast<std::size_t>(in_.gcount()) == n, ErrorKind::format, path_ + ": truncated file");
  }

  std::string path_;
  std::ifstream in_;
};

}  // namespace spotkit::binio
