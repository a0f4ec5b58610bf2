#pragma once

// Versioned binary weight checkpoint.
//
//   "EQRGCKPT"            8-byte magic
//   u32 version           currently 1
//   u32 tensor_count
//   per tensor:           u32 name_len, name bytes, u32 rows, u32 cols,
//                         rows*cols float64 (column-major)
//   u64 fnv1a             over every preceding byte
//
// All integers and floats little-endian. Tensor names are namespaced by
// section ("extractor/", "decoder/", "fine/").

#include "eqreg/equinet.hpp"
#include "eqreg/types.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace eqreg {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class Checkpoint {
 public:
  struct Tensor {
    std::string name;
    Matrix value;
  };

  void put(std::string name, Matrix value);
  const Matrix& get(std::string_view name) const;
  bool contains(std::string_view name) const;
  bool has_section(std::string_view prefix) const;
  const std::vector<Tensor>& tensors() const { return tensors_; }

  std::vector<std::uint8_t> encode() const;
  static Checkpoint decode(const std::vector<std::uint8_t>& bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

  friend bool operator==(const Checkpoint& a, const Checkpoint& b);

 private:
  std::vector<Tensor> tensors_;
};

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t size, std::uint64_t seed = 0xcbf29ce484222325ULL);

void store_extractor(Checkpoint& ck, const ExtractorWeights& weights);
ExtractorWeights load_extractor(const Checkpoint& ck);

/// Bit-level digest of all extractor weights.
std::uint64_t weights_checksum(const ExtractorWeights& weights);

}  // namespace eqreg
