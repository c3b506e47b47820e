#pragma once

// Binary checkpoint format, all integers u32 little-endian:
//   "MLAB" | version | { name_len | name | rank | dims... | f64 LE payload }*
// Records run to end of file. Meta-SGD rates are stored as "alpha.<param>".
// Dataset example files use the bare tensor record (rank | dims | payload).

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <string>

#include "mlab/tensor.hpp"

namespace mlab {

class IoError : public Error {
 public:
  using Error::Error;
};

inline constexpr std::array<char, 4> kCheckpointMagic{'M', 'L', 'A', 'B'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kAlphaPrefix = "alpha.";

struct Checkpoint {
  ParamSet params;
  std::optional<ParamSet> alpha;  // present for meta-sgd runs

  bool is_meta_sgd() const { return alpha.has_value(); }
};

namespace io {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  const std::array<unsigned char, 4> b{
      static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
      static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b.data()), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
  std::array<unsigned char, 4> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 4)) {
    throw IoError("unexpected end of tensor stream");
  }
  return std::uint32_t{b[0]} | std::uint32_t{b[1]} << 8 |
         std::uint32_t{b[2]} << 16 | std::uint32_t{b[3]} << 24;
}

inline void write_f64(std::ostream& os, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  std::array<unsigned char, 8> b{};
  for (auto& c : b) {
    c = static_cast<unsigned char>(bits);
    bits >>= 8;
  }
  os.write(reinterpret_cast<const char*>(b.data()), 8);
}

inline double read_f64(std::istream& is) {
  std::array<unsigned char, 8> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), 8)) {
    throw IoError("unexpected end of tensor payload");
  }
  std::uint64_t bits = 0;
  for (std::size_t i = 8; i-- > 0;) bits = bits << 8 | b[i];
  return std::bit_cast<double>(bits);
}

}  // namespace io

/// rank | dims | payload
inline void write_tensor(std::ostream& os, const Tensor& t) {
  io::write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) io::write_u32(os, static_cast<std::uint32_t>(d));
  for (double v : t.data()) io::write_f64(os, v);
}

inline Tensor read_tensor(std::istream& is) {
  const std::uint32_t rank = io::read_u32(is);
  if (rank > 8) throw IoError("tensor rank " + std::to_string(rank) + " too large");
  Shape shape(rank);
  for (auto& d : shape) d = io::read_u32(is);
  std::vector<double> data(numel(shape));
  for (double& v : data) v = io::read_f64(is);
  return Tensor(std::move(shape), std::move(data));
}

inline void write_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  io::write_u32(os, kCheckpointVersion);
  auto record = [&os](const std::string& name, const Tensor& t) {
    io::write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, t);
  };
  for (const auto& [name, t] : ckpt.params) record(name, t);
  if (ckpt.alpha) {
    for (const auto& [name, t] : *ckpt.alpha) record(kAlphaPrefix + name, t);
  }
}

inline Checkpoint read_checkpoint(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || magic != kCheckpointMagic) {
    throw IoError("not a checkpoint (bad magic)");
  }
  const std::uint32_t version = io::read_u32(is);
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  while (is.peek() != std::char_traits<char>::eof()) {
    const std::uint32_t len = io::read_u32(is);
    if (len > 4096) throw IoError("checkpoint tensor name too long");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw IoError("truncated tensor name");
    Tensor t = read_tensor(is);
    if (name.rfind(kAlphaPrefix, 0) == 0) {
      if (!ckpt.alpha) ckpt.alpha.emplace();
      ckpt.alpha->emplace(name.substr(std::strlen(kAlphaPrefix)), std::move(t));
    } else {
      ckpt.params.emplace(std::move(name), std::move(t));
    }
  }
  return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path,
                            const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_checkpoint(os, ckpt);
  if (!os) throw IoError("failed writing " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  return read_checkpoint(is);
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open tensor file " + path.string());
  return read_tensor(is);
}

}  // namespace mlab
