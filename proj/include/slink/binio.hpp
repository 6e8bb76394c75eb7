// Little-endian binary readers/writers for the versioned model files.
#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>

#include "slink/common.hpp"

namespace slink {

class BinWriter {
 public:
  explicit BinWriter(const std::string& path)
      : out_(path, std::ios::binary | std::ios::trunc) {
    SLINK_CHECK(out_.good(), "cannot open for writing: " << path);
    path_ = path;
  }

  void magic(std::string_view m) { out_.write(m.data(), m.size()); }
  void u8(std::uint8_t v) { out_.put(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out_.write(b, 4);
  }
  void u64(std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out_.write(b, 8);
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void f64s(std::span<const double> vs) {
    for (double v : vs) f64(v);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), s.size());
  }

  void close() {
    out_.close();
    SLINK_CHECK(out_.good(), "write failed: " << path_);
  }

 private:
  std::ofstream out_;
  std::string path_;
};

class BinReader {
 public:
  explicit BinReader(const std::string& path)
      : in_(path, std::ios::binary), path_(path) {
    SLINK_CHECK(in_.good(), "cannot open for reading: " << path);
  }

  void expect_magic(std::string_view m) {
    std::string buf(m.size(), '\0');
    in_.read(buf.data(), buf.size());
    SLINK_CHECK(in_.good() && buf == m,
                path_ << ": bad magic, expected " << m);
  }
  std::uint8_t u8() {
    int c = in_.get();
    SLINK_CHECK(c != EOF, path_ << ": truncated file");
    return static_cast<std::uint8_t>(c);
  }
  std::uint32_t u32() {
    unsigned char b[4];
    in_.read(reinterpret_cast<char*>(b), 4);
    SLINK_CHECK(in_.good(), path_ << ": truncated file");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    unsigned char b[8];
    in_.read(reinterpret_cast<char*>(b), 8);
    SLINK_CHECK(in_.good(), path_ << ": truncated file");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  void f64s(std::span<double> out) {
    for (double& v : out) v = f64();
  }
  std::string str() {
    std::uint32_t n = u32();
    std::string s(n, '\0');
    in_.read(s.data(), n);
    SLINK_CHECK(in_.good(), path_ << ": truncated file");
    return s;
  }

 private:
  std::ifstream in_;
  std::string path_;
};

}  // namespace slink
