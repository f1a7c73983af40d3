#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace poisonguard {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace io {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::uint8_t> bytes(size);
  if (size && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size))) {
    throw std::runtime_error("short read on " + path.string());
  }
  return bytes;
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed on " + path.string());
}

template <typename U>
U byteswap_value(U v) {
  static_assert(std::is_trivially_copyable_v<U>);
  unsigned char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  for (std::size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(b[i], b[sizeof(U) - 1 - i]);
  std::memcpy(&v, b, sizeof(U));
  return v;
}

/// Appends fixed-width values in a chosen byte order.
class Writer {
 public:
  explicit Writer(std::endian order = std::endian::little) : order_(order) {}

  template <typename U>
  void put(U v) {
    if (order_ != std::endian::native) v = byteswap_value(v);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(U));
  }

  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }

  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }

  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

 private:
  std::endian order_;
  std::vector<std::uint8_t> bytes_;
};

/// Bounds-checked cursor over a byte buffer.
class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, std::string what,
         std::endian order = std::endian::little)
      : bytes_(bytes), what_(std::move(what)), order_(order) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return order_ != std::endian::native ? byteswap_value(v) : v;
  }

  void get_bytes(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }

  std::string get_string(std::size_t max_len = 1 << 16) {
    const auto n = get<std::uint32_t>();
    if (n > max_len) throw FormatError(what_ + ": string length " + std::to_string(n) + " too large");
    std::string s(n, '\0');
    get_bytes(s.data(), n);
    return s;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t position() const { return pos_; }

  void need(std::size_t n) const {
    if (remaining() < n) {
      throw FormatError(what_ + ": truncated (need " + std::to_string(n) + " bytes at offset " +
                        std::to_string(pos_) + ", have " + std::to_string(remaining()) + ")");
    }
  }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::string what_;
  std::endian order_;
  std::size_t pos_ = 0;
};

}  // namespace io
}  // namespace poisonguard
