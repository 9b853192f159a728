#include "cdaug/io.hpp"

#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

namespace cdaug {

namespace {
AccessLog* g_access_log = nullptr;
}

void ByteReader::require(std::size_t n) const {
  if (remaining() < n) {
    throw FormatError(context_ + ": truncated payload (need " + std::to_string(n) +
                      " bytes at offset " + std::to_string(pos_) + ", have " +
                      std::to_string(remaining()) + ")");
  }
}

void ByteReader::expect_magic(std::string_view magic) {
  require(magic.size());
  if (std::memcmp(data_.data() + pos_, magic.data(), magic.size()) != 0) {
    throw FormatError(context_ + ": bad magic, expected \"" + std::string(magic) + "\"");
  }
  pos_ += magic.size();
}

std::uint8_t ByteReader::u8() {
  require(1);
  return data_[pos_++];
}

std::uint32_t ByteReader::u32() {
  require(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
  pos_ += 4;
  return v;
}

std::uint64_t ByteReader::u64() {
  require(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
  pos_ += 8;
  return v;
}

float ByteReader::f32() {
  const std::uint32_t bits = u32();
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

void ByteReader::expect_end() const {
  if (remaining() != 0) {
    throw FormatError(context_ + ": " + std::to_string(remaining()) + " trailing bytes");
  }
}

AccessLog::AccessLog() : previous_(g_access_log) { g_access_log = this; }
AccessLog::~AccessLog() { g_access_log = previous_; }

void note_access(const std::filesystem::path& path) {
  if (g_access_log != nullptr) g_access_log->paths_.push_back(path);
}

Bytes read_file(const std::filesystem::path& path) {
  note_access(path);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::string read_text(const std::filesystem::path& path) {
  note_access(path);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> data, std::uint64_t h) {
  for (std::uint8_t b : data) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a64(std::string_view text, std::uint64_t h) {
  return fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()), h);
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace cdaug
