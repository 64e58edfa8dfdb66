#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "deepgrade/binary_io.hpp"
#include "deepgrade/error.hpp"

namespace deepgrade::nn {

struct NamedArray {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> data;

  friend bool operator==(const NamedArray&, const NamedArray&) = default;
};

/// GNN1 layout (little-endian): "GNN1", u32 count, then per array
/// u32 name length, name bytes, u32 rank, u32 dims[rank], f32 payload.
inline std::vector<char> encode_checkpoint(const std::vector<NamedArray>& arrays) {
  deepgrade::detail::ByteWriter w;
  w.bytes("GNN1");
  w.u32(static_cast<std::uint32_t>(arrays.size()));
  for (const auto& a : arrays) {
    std::size_t n = 1;
    for (auto d : a.dims) n *= d;
    if (n != a.data.size()) throw ValidationError("array " + a.name + " payload does not match its dims");
    w.u32(static_cast<std::uint32_t>(a.name.size()));
    w.bytes(a.name);
    w.u32(static_cast<std::uint32_t>(a.dims.size()));
    for (auto d : a.dims) w.u32(d);
    for (float f : a.data) w.f32(f);
  }
  return w.buffer();
}

inline std::vector<NamedArray> decode_checkpoint(std::vector<char> bytes, const std::string& origin = "<memory>") {
  deepgrade::detail::ByteReader r(std::move(bytes), origin);
  if (r.bytes(4) != "GNN1") throw FormatError(origin + ": bad magic, expected GNN1");
  const auto count = r.u32();
  std::vector<NamedArray> out;
  for (std::uint32_t k = 0; k < count; ++k) {
    NamedArray a;
    a.name = r.bytes(r.u32());
    const auto rank = r.u32();
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      a.dims.push_back(r.u32());
      n *= a.dims.back();
    }
    r.need(n * 4);
    a.data.resize(n);
    for (auto& f : a.data) f = r.f32();
    out.push_back(std::move(a));
  }
  if (r.remaining() != 0) throw FormatError(origin + ": trailing bytes after last array");
  return out;
}

inline void write_checkpoint(const std::vector<NamedArray>& arrays, const std::filesystem::path& path) {
  deepgrade::detail::write_file(path, encode_checkpoint(arrays));
}

inline std::vector<NamedArray> read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(deepgrade::detail::read_file(path), path.string());
}

}  // namespace deepgrade::nn
