#include "eqreg/cloud_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

namespace eqreg {

namespace le {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}

void put_f64(std::vector<std::uint8_t>& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

void Reader::need(std::size_t n) const {
  if (bytes_.size() - pos_ < n) throw Error(error_, "truncated binary data");
}

std::uint32_t Reader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(bytes_[pos_ + b]) << (8 * b);
  pos_ += 4;
  return v;
}

std::uint64_t Reader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(bytes_[pos_ + b]) << (8 * b);
  pos_ += 8;
  return v;
}

double Reader::f64() { return std::bit_cast<double>(u64()); }

std::string Reader::bytes(std::size_t n) {
  need(n);
  std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
  pos_ += n;
  return s;
}

}  // namespace le

void write_xyz(std::ostream& os, const PointCloud& cloud) {
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (Index i = 0; i < cloud.size(); ++i) {
    os << cloud.points()(0, i) << ' ' << cloud.points()(1, i) << ' ' << cloud.points()(2, i) << '\n';
  }
}

PointCloud read_xyz(std::istream& is) {
  std::vector<double> coords;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
    std::istringstream ls(line);
    double x = 0, y = 0, z = 0;
    if (!(ls >> x >> y >> z)) throw Error(Errc::Io, "malformed XYZ line " + std::to_string(line_no));
    coords.insert(coords.end(), {x, y, z});
  }
  Points3 pts = Eigen::Map<const Points3>(coords.data(), 3, static_cast<Index>(coords.size() / 3));
  return PointCloud(std::move(pts));
}

std::vector<std::uint8_t> encode_cloud_binary(const PointCloud& cloud) {
  std::vector<std::uint8_t> out;
  out.reserve(4 + 24 * static_cast<std::size_t>(cloud.size()));
  le::put_u32(out, static_cast<std::uint32_t>(cloud.size()));
  for (Index i = 0; i < cloud.size(); ++i) {
    for (int c = 0; c < 3; ++c) le::put_f64(out, cloud.points()(c, i));
  }
  return out;
}

PointCloud decode_cloud_binary(const std::vector<std::uint8_t>& bytes) {
  le::Reader r(bytes, Errc::Io);
  const std::uint32_t n = r.u32();
  if (bytes.size() != 4 + 24 * static_cast<std::size_t>(n)) throw Error(Errc::Io, "binary cloud size mismatch");
  Points3 pts(3, n);
  for (Index i = 0; i < static_cast<Index>(n); ++i) {
    for (int c = 0; c < 3; ++c) pts(c, i) = r.f64();
  }
  return PointCloud(std::move(pts));
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(Errc::Io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(Errc::Io, "cannot write " + path.string());
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void save_xyz(const std::filesystem::path& path, const PointCloud& cloud) {
  std::ofstream os(path);
  if (!os) throw Error(Errc::Io, "cannot write " + path.string());
  write_xyz(os, cloud);
}

PointCloud load_xyz(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(Errc::Io, "cannot open " + path.string());
  return read_xyz(is);
}

void save_cloud_binary(const std::filesystem::path& path, const PointCloud& cloud) {
  write_file_bytes(path, encode_cloud_binary(cloud));
}

PointCloud load_cloud_binary(const std::filesystem::path& path) { return decode_cloud_binary(read_file_bytes(path)); }

}  // namespace eqreg
