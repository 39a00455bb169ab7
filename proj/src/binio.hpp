#pragma once

// Little-endian binary helpers shared by the checkpoint and volume formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "dumamba/error.hpp"

namespace dumamba::binio {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  template <typename T>
  void put(T v) {
    bytes(&v, sizeof(T));
  }
  void str(const std::string& s) { bytes(s.data(), s.size()); }

  const std::vector<char>& buffer() const { return buf_; }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!os) throw IoError("write to '" + path + "' failed");
  }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  explicit Reader(std::vector<char> data, std::string what)
      : data_(std::move(data)), what_(std::move(what)) {}

  static Reader open(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "'");
    std::vector<char> data((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return Reader(std::move(data), path);
  }

  void bytes(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  template <typename T>
  T get() {
    T v;
    bytes(&v, sizeof(T));
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(data_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) {
      throw FormatError(FormatError::Kind::kTruncated,
                        "truncated payload in '" + what_ + "': need " + std::to_string(n) +
                            " bytes at offset " + std::to_string(pos_) + ", have " +
                            std::to_string(data_.size() - pos_));
    }
  }
  std::size_t remaining() const { return data_.size() - pos_; }
  const std::string& what() const { return what_; }

 private:
  std::vector<char> data_;
  std::size_t pos_ = 0;
  std::string what_;
};

}  // namespace dumamba::binio
