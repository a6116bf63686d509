// Copyright 2026 The ReMatch Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "rematch/errors.hpp"

namespace rematch {
namespace binio {

// All on-disk multi-byte values are little-endian, packed explicitly so the
// formats do not depend on host byte order.

inline void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  put_u32(out, static_cast<std::uint32_t>(v & 0xffffffffull));
  put_u32(out, static_cast<std::uint32_t>(v >> 32));
}

inline void put_i32(std::string& out, std::int32_t v) {
  put_u32(out, static_cast<std::uint32_t>(v));
}

inline void put_f32(std::string& out, float v) {
  put_u32(out, std::bit_cast<std::uint32_t>(v));
}

// Sequential reader over an in-memory file image. Every accessor throws
// TruncatedFileError when the remaining bytes cannot satisfy the request,
// naming the file and the field being read.
class ByteReader {
 public:
  ByteReader(const std::string& buf, std::string origin)
      : buf_(buf), origin_(std::move(origin)) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) {
      v = (v << 8) | static_cast<std::uint8_t>(buf_[pos_ + static_cast<std::size_t>(i)]);
    }
    pos_ += 4;
    return v;
  }

  std::uint64_t u64(const char* what) {
    const std::uint64_t lo = u32(what);
    const std::uint64_t hi = u32(what);
    return lo | (hi << 32);
  }

  std::int32_t i32(const char* what) { return static_cast<std::int32_t>(u32(what)); }

  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }

  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(buf_[pos_++]);
  }

  std::string bytes(std::uint64_t n, const char* what) {
    need(n, what);
    std::string s = buf_.substr(pos_, static_cast<std::size_t>(n));
    pos_ += static_cast<std::size_t>(n);
    return s;
  }

  std::uint64_t remaining() const { return buf_.size() - pos_; }
  std::uint64_t position() const { return pos_; }

  void expect_end() const {
    if (pos_ != buf_.size()) {
      throw IoError(origin_ + ": " + std::to_string(buf_.size() - pos_) +
                    " trailing bytes after the declared payload");
    }
  }

 private:
  void need(std::uint64_t n, const char* what) const {
    if (pos_ + n > buf_.size()) {
      throw TruncatedFileError(origin_ + ": unexpected end of file reading " + what + " at byte " +
                               std::to_string(pos_));
    }
  }

  const std::string& buf_;
  std::string origin_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path + " for reading");
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failure on " + path);
  return buf;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw IoError("write failure on " + path);
}

}  // namespace binio
}  // namespace rematch
