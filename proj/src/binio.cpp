#include "lstp/binio.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace lstp {

namespace {

template <typename T>
void put_le(std::vector<unsigned char>& buf, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) buf.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

template <typename T>
T get_le(const unsigned char* p) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(p[i]) << (8 * i);
  return v;
}

}  // namespace

void BinaryWriter::magic(std::string_view tag) { buf_.insert(buf_.end(), tag.begin(), tag.end()); }
void BinaryWriter::u16(std::uint16_t v) { put_le(buf_, v); }
void BinaryWriter::u32(std::uint32_t v) { put_le(buf_, v); }
void BinaryWriter::u64(std::uint64_t v) { put_le(buf_, v); }
void BinaryWriter::f64(double v) { put_le(buf_, std::bit_cast<std::uint64_t>(v)); }
void BinaryWriter::f64s(std::span<const double> v) {
  buf_.reserve(buf_.size() + 8 * v.size());
  for (double x : v) f64(x);
}

void BinaryWriter::write_file(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatErrc::io, "cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
  if (!out) throw FormatError(FormatErrc::io, "write failed: " + path.string());
}

BinaryReader::BinaryReader(std::vector<unsigned char> bytes, std::string source)
    : buf_(std::move(bytes)), source_(std::move(source)) {}

BinaryReader BinaryReader::from_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrc::io, "cannot open for reading: " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return BinaryReader(std::move(bytes), path.string());
}

void BinaryReader::require(std::size_t n) const {
  if (remaining() < n) {
    throw FormatError(FormatErrc::truncated,
                      source_ + ": truncated (need " + std::to_string(n) + " bytes at offset " +
                          std::to_string(pos_) + ", have " + std::to_string(remaining()) + ")");
  }
}

void BinaryReader::expect_magic(std::string_view tag) {
  if (remaining() < tag.size() || std::memcmp(buf_.data() + pos_, tag.data(), tag.size()) != 0) {
    throw FormatError(FormatErrc::bad_magic,
                      source_ + ": bad magic, expected \"" + std::string(tag) + "\"");
  }
  pos_ += tag.size();
}

std::uint16_t BinaryReader::expect_version(std::uint16_t supported_max) {
  const auto v = u16();
  if (v == 0 || v > supported_max) {
    throw FormatError(FormatErrc::version_mismatch,
                      source_ + ": unsupported format version " + std::to_string(v));
  }
  return v;
}

std::uint16_t BinaryReader::u16() {
  require(2);
  auto v = get_le<std::uint16_t>(buf_.data() + pos_);
  pos_ += 2;
  return v;
}

std::uint32_t BinaryReader::u32() {
  require(4);
  auto v = get_le<std::uint32_t>(buf_.data() + pos_);
  pos_ += 4;
  return v;
}

std::uint64_t BinaryReader::u64() {
  require(8);
  auto v = get_le<std::uint64_t>(buf_.data() + pos_);
  pos_ += 8;
  return v;
}

double BinaryReader::f64() { return std::bit_cast<double>(u64()); }

void BinaryReader::f64s(std::span<double> out) {
  require(8 * out.size());
  for (auto& x : out) x = f64();
}

}  // namespace lstp
