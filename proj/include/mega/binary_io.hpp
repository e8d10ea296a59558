#pragma once

#include <Eigen/Dense>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "mega/error.hpp"

namespace mega {

// Little-endian primitives for the tokenizer and checkpoint files.
class BinaryWriter {
 public:
  explicit BinaryWriter(const std::string& path) : path_(path), out_(path, std::ios::binary) {
    if (!out_) fail(ErrorKind::Io, "cannot open " + path + " for writing");
  }

  void bytes(const char* data, std::size_t n) { out_.write(data, static_cast<std::streamsize>(n)); }

  void u32(std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    bytes(b, 4);
  }

  void f64(double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
    bytes(b, 8);
  }

  // Row-major values only; dimensions are the caller's business.
  template <typename Derived>
  void matrix(const Eigen::MatrixBase<Derived>& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) f64(m(r, c));
  }

  void close() {
    out_.flush();
    if (!out_) fail(ErrorKind::Io, "failed writing " + path_);
    out_.close();
  }

 private:
  std::string path_;
  std::ofstream out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::string& path) : path_(path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::Io, "cannot open " + path);
    data_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s(data_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  double f64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }

  Eigen::MatrixXd matrix(Eigen::Index rows, Eigen::Index cols) {
    need(static_cast<std::size_t>(rows * cols) * 8);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = f64();
    return m;
  }

  std::size_t remaining() const { return data_.size() - pos_; }

  void expect_end() const {
    if (remaining() != 0) fail(ErrorKind::CorruptCheckpoint, path_ + ": trailing bytes");
  }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) fail(ErrorKind::CorruptCheckpoint, path_ + ": truncated file");
  }

  std::string path_;
  std::vector<char> data_;
  std::size_t pos_{0};
};

}  // namespace mega
