#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace lstp {

enum class FormatErrc {
  io = 1,
  bad_magic = 2,
  version_mismatch = 3,
  truncated = 4,
  shape_mismatch = 5,
};

class FormatError : public std::runtime_error {
 public:
  FormatError(FormatErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  FormatErrc code() const { return code_; }

 private:
  FormatErrc code_;
};

/// Little-endian binary encoder backing the dataset and checkpoint formats.
class BinaryWriter {
 public:
  void magic(std::string_view tag);
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void f64s(std::span<const double> v);

  const std::vector<unsigned char>& bytes() const { return buf_; }
  void write_file(const std::filesystem::path& path) const;

 private:
  std::vector<unsigned char> buf_;
};

class BinaryReader {
 public:
  BinaryReader(std::vector<unsigned char> bytes, std::string source);
  static BinaryReader from_file(const std::filesystem::path& path);

  void expect_magic(std::string_view tag);
  std::uint16_t expect_version(std::uint16_t supported_max);
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  void f64s(std::span<double> out);

  /// Throws truncated if fewer than `n` bytes remain.
  void require(std::size_t n) const;
  std::size_t remaining() const { return buf_.size() - pos_; }
  const std::string& source() const { return source_; }

 private:
  std::vector<unsigned char> buf_;
  std::size_t pos_ = 0;
  std::string source_;
};

}  // namespace lstp
