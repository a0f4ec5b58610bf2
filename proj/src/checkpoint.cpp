#include "eqreg/checkpoint.hpp"

#include "eqreg/cloud_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>

namespace eqreg {

namespace {
constexpr char kMagic[8] = {'E', 'Q', 'R', 'G', 'C', 'K', 'P', 'T'};
}

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t size, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

void Checkpoint::put(std::string name, Matrix value) {
  auto it = std::find_if(tensors_.begin(), tensors_.end(), [&](const Tensor& t) { return t.name == name; });
  if (it != tensors_.end()) {
    it->value = std::move(value);
  } else {
    tensors_.push_back({std::move(name), std::move(value)});
  }
}

const Matrix& Checkpoint::get(std::string_view name) const {
  auto it = std::find_if(tensors_.begin(), tensors_.end(), [&](const Tensor& t) { return t.name == name; });
  if (it == tensors_.end()) throw Error(Errc::MissingCheckpoint, "tensor '" + std::string(name) + "' not in checkpoint");
  return it->value;
}

bool Checkpoint::contains(std::string_view name) const {
  return std::any_of(tensors_.begin(), tensors_.end(), [&](const Tensor& t) { return t.name == name; });
}

bool Checkpoint::has_section(std::string_view prefix) const {
  return std::any_of(tensors_.begin(), tensors_.end(), [&](const Tensor& t) { return t.name.starts_with(prefix); });
}

std::vector<std::uint8_t> Checkpoint::encode() const {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  le::put_u32(out, kCheckpointVersion);
  le::put_u32(out, static_cast<std::uint32_t>(tensors_.size()));
  for (const auto& t : tensors_) {
    le::put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    le::put_u32(out, static_cast<std::uint32_t>(t.value.rows()));
    le::put_u32(out, static_cast<std::uint32_t>(t.value.cols()));
    for (Index i = 0; i < t.value.size(); ++i) le::put_f64(out, t.value.data()[i]);
  }
  le::put_u64(out, fnv1a64(out.data(), out.size()));
  return out;
}

Checkpoint Checkpoint::decode(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < sizeof(kMagic) + 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw Error(Errc::CorruptCheckpoint, "bad magic");
  }
  const std::size_t body = bytes.size() - 8;
  std::uint64_t stored = 0;
  for (int b = 0; b < 8; ++b) stored |= static_cast<std::uint64_t>(bytes[body + b]) << (8 * b);
  if (stored != fnv1a64(bytes.data(), body)) throw Error(Errc::CorruptCheckpoint, "checksum mismatch");

  const std::vector<std::uint8_t> payload(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(body));
  le::Reader r(payload, Errc::CorruptCheckpoint);
  r.bytes(sizeof(kMagic));
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw Error(Errc::CorruptCheckpoint, "unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  Checkpoint ck;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint32_t len = r.u32();
    std::string name = r.bytes(len);
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = r.f64();
    ck.tensors_.push_back({std::move(name), std::move(m)});
  }
  if (!r.done()) throw Error(Errc::CorruptCheckpoint, "trailing bytes");
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const { write_file_bytes(path, encode()); }

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error(Errc::MissingCheckpoint, "no checkpoint at " + path.string());
  return decode(read_file_bytes(path));
}

bool operator==(const Checkpoint& a, const Checkpoint& b) {
  if (a.tensors_.size() != b.tensors_.size()) return false;
  for (std::size_t i = 0; i < a.tensors_.size(); ++i) {
    const auto& x = a.tensors_[i];
    const auto& y = b.tensors_[i];
    if (x.name != y.name || x.value.rows() != y.value.rows() || x.value.cols() != y.value.cols()) return false;
    if (x.value.size() > 0 &&
        std::memcmp(x.value.data(), y.value.data(), sizeof(double) * static_cast<std::size_t>(x.value.size())) != 0) {
      return false;
    }
  }
  return true;
}

void store_extractor(Checkpoint& ck, const ExtractorWeights& w) {
  w.validate();
  const auto& c = w.config;
  Matrix config(1, 5);
  config << static_cast<double>(c.neighbors), static_cast<double>(c.global_channels),
      static_cast<double>(c.feature_channels), static_cast<double>(c.invariant_channels),
      static_cast<double>(c.layers);
  ck.put("extractor/config", config);
  for (std::size_t l = 0; l < w.backbone.size(); ++l) {
    ck.put("extractor/layer" + std::to_string(l) + "/linear", w.backbone[l].linear);
    ck.put("extractor/layer" + std::to_string(l) + "/direction", w.backbone[l].direction);
  }
  ck.put("extractor/fusion/linear", w.fusion.linear);
  ck.put("extractor/fusion/direction", w.fusion.direction);
  ck.put("extractor/head", w.head);
}

ExtractorWeights load_extractor(const Checkpoint& ck) {
  const Matrix& config = ck.get("extractor/config");
  if (config.rows() != 1 || config.cols() != 5) throw Error(Errc::CorruptCheckpoint, "extractor config shape");
  ExtractorWeights w;
  w.config.neighbors = static_cast<Index>(config(0, 0));
  w.config.global_channels = static_cast<Index>(config(0, 1));
  w.config.feature_channels = static_cast<Index>(config(0, 2));
  w.config.invariant_channels = static_cast<Index>(config(0, 3));
  w.config.layers = static_cast<Index>(config(0, 4));
  for (Index l = 0; l < w.config.layers; ++l) {
    VNLayerParams layer;
    layer.linear = ck.get("extractor/layer" + std::to_string(l) + "/linear");
    layer.direction = ck.get("extractor/layer" + std::to_string(l) + "/direction");
    w.backbone.push_back(std::move(layer));
  }
  w.fusion.linear = ck.get("extractor/fusion/linear");
  w.fusion.direction = ck.get("extractor/fusion/direction");
  w.head = ck.get("extractor/head");
  w.validate();
  return w;
}

std::uint64_t weights_checksum(const ExtractorWeights& weights) {
  Checkpoint ck;
  store_extractor(ck, weights);
  const auto bytes = ck.encode();
  return fnv1a64(bytes.data(), bytes.size());
}

}  // namespace eqreg
