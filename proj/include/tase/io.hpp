#pragma once

#include "tase/common.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

namespace tase::io {

// All on-disk formats are little-endian regardless of host order.

class BinaryWriter {
 public:
  explicit BinaryWriter(const std::filesystem::path& path) : out_(path, std::ios::binary) {
    if (!out_) throw DataError("cannot open for writing: " + path.string());
    path_ = path.string();
  }

  void magic(std::string_view m) { out_.write(m.data(), static_cast<std::streamsize>(m.size())); }

  void u32(uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out_.write(reinterpret_cast<const char*>(b), 4);
  }

  void u64(uint64_t v) {
    u32(static_cast<uint32_t>(v));
    u32(static_cast<uint32_t>(v >> 32));
  }

  void f32(float v) { u32(std::bit_cast<uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<uint64_t>(v)); }

  void f32_block(std::span<const float> vals) {
    for (float v : vals) f32(v);
  }

  void u32_block(std::span<const uint32_t> vals) {
    for (uint32_t v : vals) u32(v);
  }

  template <class T>
  void matrix_f32(const Matrix<T>& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) f32(static_cast<float>(m(r, c)));
  }

  void close() {
    out_.close();
    if (!out_) throw DataError("write failed: " + path_);
  }

 private:
  std::ofstream out_;
  std::string path_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::filesystem::path& path) : in_(path, std::ios::binary), path_(path.string()) {
    if (!in_) throw DataError("cannot open: " + path_);
  }

  void expect_magic(std::string_view m) {
    std::string got(m.size(), '\0');
    in_.read(got.data(), static_cast<std::streamsize>(m.size()));
    if (!in_ || got != m) throw DataError("bad magic in " + path_ + " (expected '" + std::string(m) + "')");
  }

  uint32_t u32() {
    unsigned char b[4];
    in_.read(reinterpret_cast<char*>(b), 4);
    if (!in_) throw DataError("truncated file: " + path_);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
  }

  uint64_t u64() {
    const uint64_t lo = u32();
    return lo | (static_cast<uint64_t>(u32()) << 32);
  }

  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }

  std::vector<uint32_t> u32_block(size_t n) {
    std::vector<uint32_t> v(n);
    for (auto& x : v) x = u32();
    return v;
  }

  template <class T>
  Matrix<T> matrix_f32(Eigen::Index rows, Eigen::Index cols) {
    Matrix<T> m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = static_cast<T>(f32());
    return m;
  }

  // Bytes left until EOF from the current position.
  uint64_t remaining() {
    const auto cur = in_.tellg();
    in_.seekg(0, std::ios::end);
    const auto end = in_.tellg();
    in_.seekg(cur);
    return static_cast<uint64_t>(end - cur);
  }

  const std::string& path() const { return path_; }

 private:
  std::ifstream in_;
  std::string path_;
};

// "data.bin" + "test" -> "data.test.bin"; extensionless paths get ".test".
inline std::filesystem::path sibling_path(const std::filesystem::path& p, std::string_view tag) {
  auto ext = p.extension().string();
  if (ext.empty()) {
    auto q = p;
    q += ".";
    q += tag;
    return q;
  }
  auto q = p.parent_path() / p.stem();
  q += ".";
  q += tag;
  q += ext;
  return q;
}

}  // namespace tase::io
