#pragma once

// Little-endian binary container helpers shared by every artifact format.
// All multi-byte values are written least-significant byte first regardless of
// host order; doubles are written as their IEEE-754 bit pattern.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace socialgf::io {

class Writer {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f64(double v);
  void str(std::string_view s);
  void f64s(const std::vector<double>& v);
  void magic(std::string_view four_cc);

  const std::vector<std::uint8_t>& bytes() const { return bytes_; }
  void save(const std::filesystem::path& path) const;

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(std::vector<std::uint8_t> bytes) : bytes_(std::move(bytes)) {}
  static Reader open(const std::filesystem::path& path);

  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  double f64();
  std::string str();
  std::vector<double> f64s();
  // Throws DataError unless the next four bytes equal four_cc.
  void expect_magic(std::string_view four_cc);
  bool at_end() const { return pos_ == bytes_.size(); }
  std::size_t position() const { return pos_; }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

 private:
  void need(std::size_t n) const;
  std::vector<std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

// FNV-1a 64-bit over a byte range.
std::uint64_t fnv1a(const std::uint8_t* data, std::size_t n,
                    std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a(std::string_view s);

std::string hex64(std::uint64_t v);

// Writes text atomically-ish (temp file then rename); throws IoError with the path.
void write_text(const std::filesystem::path& path, std::string_view text);
std::string read_text(const std::filesystem::path& path);

}  // namespace socialgf::io
