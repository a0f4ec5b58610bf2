#pragma once

#include "eqreg/geometry.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace eqreg {

// ASCII XYZ: one "x y z" line per point. Binary: little-endian u32 N followed
// by 3N float64 in point order (x0 y0 z0 x1 ...).

void write_xyz(std::ostream& os, const PointCloud& cloud);
PointCloud read_xyz(std::istream& is);

std::vector<std::uint8_t> encode_cloud_binary(const PointCloud& cloud);
PointCloud decode_cloud_binary(const std::vector<std::uint8_t>& bytes);

void save_xyz(const std::filesystem::path& path, const PointCloud& cloud);
PointCloud load_xyz(const std::filesystem::path& path);
void save_cloud_binary(const std::filesystem::path& path, const PointCloud& cloud);
PointCloud load_cloud_binary(const std::filesystem::path& path);

namespace le {
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v);
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v);
void put_f64(std::vector<std::uint8_t>& out, double v);

/// Bounds-checked little-endian reader; throws `error` on truncation.
class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, Errc error) : bytes_(bytes), error_(error) {}
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::string bytes(std::size_t n);
  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const;
  const std::vector<std::uint8_t>& bytes_;
  Errc error_;
  std::size_t pos_ = 0;
};
}  // namespace le

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace eqreg
