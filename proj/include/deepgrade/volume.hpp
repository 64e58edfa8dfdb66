#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "deepgrade/binary_io.hpp"
#include "deepgrade/error.hpp"

namespace deepgrade {

struct Dims {
  std::uint32_t x = 0, y = 0, z = 0;

  constexpr std::size_t voxels() const { return std::size_t{x} * y * z; }
  constexpr std::uint32_t operator[](int axis) const { return axis == 0 ? x : axis == 1 ? y : z; }
  friend constexpr bool operator==(const Dims&, const Dims&) = default;

  std::string str() const { return std::to_string(x) + "x" + std::to_string(y) + "x" + std::to_string(z); }
};

struct Spacing {
  float x = 1.f, y = 1.f, z = 1.f;
  friend constexpr bool operator==(const Spacing&, const Spacing&) = default;
};

/// Dense scalar grid, x-fastest. Holds intensities, grading values or masks.
class Volume3D {
 public:
  Volume3D() = default;

  explicit Volume3D(Dims dims, Spacing spacing = {}, float fill = 0.f)
      : dims_(dims), spacing_(spacing), data_(dims.voxels(), fill) {
    check_shape();
  }

  Volume3D(Dims dims, Spacing spacing, std::vector<float> data)
      : dims_(dims), spacing_(spacing), data_(std::move(data)) {
    check_shape();
    if (data_.size() != dims_.voxels())
      throw ValidationError("volume data length " + std::to_string(data_.size()) + " does not match dims " +
                            dims_.str());
  }

  const Dims& dims() const { return dims_; }
  const Spacing& spacing() const { return spacing_; }
  std::size_t size() const { return data_.size(); }

  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const { return x + dims_.x * (y + dims_.y * z); }

  float& at(std::size_t x, std::size_t y, std::size_t z) { return data_[index(x, y, z)]; }
  float at(std::size_t x, std::size_t y, std::size_t z) const { return data_[index(x, y, z)]; }
  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
  }

  friend bool operator==(const Volume3D&, const Volume3D&) = default;

 private:
  void check_shape() const {
    if (dims_.x == 0 || dims_.y == 0 || dims_.z == 0) throw ValidationError("volume dims must be positive");
    if (!(spacing_.x > 0.f && spacing_.y > 0.f && spacing_.z > 0.f))
      throw ValidationError("voxel spacing must be positive");
  }

  Dims dims_;
  Spacing spacing_;
  std::vector<float> data_;
};

/// Integer segmentation. Label 0 is outside the intracranial cavity.
class LabelMap3D {
 public:
  LabelMap3D() = default;

  explicit LabelMap3D(Dims dims, Spacing spacing = {}, std::uint16_t fill = 0)
      : dims_(dims), spacing_(spacing), labels_(dims.voxels(), fill) {
    if (dims_.voxels() == 0) throw ValidationError("label map dims must be positive");
  }

  LabelMap3D(Dims dims, Spacing spacing, std::vector<std::uint16_t> labels)
      : dims_(dims), spacing_(spacing), labels_(std::move(labels)) {
    if (dims_.voxels() == 0) throw ValidationError("label map dims must be positive");
    if (labels_.size() != dims_.voxels()) throw ValidationError("label data length does not match dims");
  }

  const Dims& dims() const { return dims_; }
  const Spacing& spacing() const { return spacing_; }
  std::size_t size() const { return labels_.size(); }
  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const { return x + dims_.x * (y + dims_.y * z); }

  std::uint16_t& at(std::size_t x, std::size_t y, std::size_t z) { return labels_[index(x, y, z)]; }
  std::uint16_t at(std::size_t x, std::size_t y, std::size_t z) const { return labels_[index(x, y, z)]; }
  std::uint16_t& operator[](std::size_t i) { return labels_[i]; }
  std::uint16_t operator[](std::size_t i) const { return labels_[i]; }

  std::span<std::uint16_t> values() { return labels_; }
  std::span<const std::uint16_t> values() const { return labels_; }

  std::uint16_t max_label() const {
    return labels_.empty() ? 0 : *std::max_element(labels_.begin(), labels_.end());
  }

  std::size_t icc_voxels() const {
    return static_cast<std::size_t>(std::count_if(labels_.begin(), labels_.end(), [](auto l) { return l > 0; }));
  }

  /// Voxel count per label, index 0..s.
  std::vector<std::size_t> label_counts(std::size_t s) const {
    std::vector<std::size_t> counts(s + 1, 0);
    for (auto l : labels_) {
      if (l > s) throw ValidationError("label " + std::to_string(l) + " exceeds structure count " + std::to_string(s));
      ++counts[l];
    }
    return counts;
  }

  /// 1 inside the ICC, 0 outside.
  Volume3D icc_mask() const {
    Volume3D m(dims_, spacing_);
    for (std::size_t i = 0; i < labels_.size(); ++i) m[i] = labels_[i] > 0 ? 1.f : 0.f;
    return m;
  }

  friend bool operator==(const LabelMap3D&, const LabelMap3D&) = default;

 private:
  Dims dims_;
  Spacing spacing_;
  std::vector<std::uint16_t> labels_;
};

// ---------------------------------------------------------------------------
// GVL1 / GSG1 files
// ---------------------------------------------------------------------------

namespace detail {

inline void write_header(ByteWriter& w, std::string_view magic, Dims d, Spacing s) {
  w.bytes(magic);
  w.u32(d.x);
  w.u32(d.y);
  w.u32(d.z);
  w.f32(s.x);
  w.f32(s.y);
  w.f32(s.z);
}

inline std::pair<Dims, Spacing> read_header(ByteReader& r, std::string_view magic, const std::string& origin) {
  r.need(4);
  if (r.bytes(4) != magic) throw FormatError(origin + ": bad magic, expected " + std::string(magic));
  Dims d{r.u32(), r.u32(), r.u32()};
  Spacing s{r.f32(), r.f32(), r.f32()};
  if (d.voxels() == 0) throw FormatError(origin + ": zero dimension");
  if (!(s.x > 0.f && s.y > 0.f && s.z > 0.f)) throw FormatError(origin + ": non-positive spacing");
  return {d, s};
}

}  // namespace detail

inline std::vector<char> encode_volume(const Volume3D& v) {
  if (!v.all_finite()) throw ValidationError("refusing to encode a volume with non-finite values");
  detail::ByteWriter w;
  detail::write_header(w, "GVL1", v.dims(), v.spacing());
  for (float f : v.values()) w.f32(f);
  return w.buffer();
}

inline Volume3D decode_volume(std::vector<char> bytes, const std::string& origin = "<memory>") {
  detail::ByteReader r(std::move(bytes), origin);
  auto [d, s] = detail::read_header(r, "GVL1", origin);
  if (r.remaining() != d.voxels() * 4)
    throw FormatError(origin + ": payload size " + std::to_string(r.remaining()) + " does not match dims " + d.str());
  std::vector<float> data(d.voxels());
  for (auto& f : data) f = r.f32();
  return Volume3D(d, s, std::move(data));
}

inline std::vector<char> encode_labels(const LabelMap3D& l) {
  detail::ByteWriter w;
  detail::write_header(w, "GSG1", l.dims(), l.spacing());
  for (auto v : l.values()) w.u16(v);
  return w.buffer();
}

inline LabelMap3D decode_labels(std::vector<char> bytes, const std::string& origin = "<memory>") {
  detail::ByteReader r(std::move(bytes), origin);
  auto [d, s] = detail::read_header(r, "GSG1", origin);
  if (r.remaining() != d.voxels() * 2)
    throw FormatError(origin + ": payload size " + std::to_string(r.remaining()) + " does not match dims " + d.str());
  std::vector<std::uint16_t> labels(d.voxels());
  for (auto& v : labels) v = r.u16();
  return LabelMap3D(d, s, std::move(labels));
}

inline void write_volume(const Volume3D& v, const std::filesystem::path& path) {
  detail::write_file(path, encode_volume(v));
}

inline Volume3D read_volume(const std::filesystem::path& path) {
  return decode_volume(detail::read_file(path), path.string());
}

inline void write_labels(const LabelMap3D& l, const std::filesystem::path& path) {
  detail::write_file(path, encode_labels(l));
}

inline LabelMap3D read_labels(const std::filesystem::path& path) {
  return decode_labels(detail::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Resampling and normalization
// ---------------------------------------------------------------------------

/// 2x2x2 mean pooling. Boundary blocks average only the voxels that exist.
inline Volume3D downsample2(const Volume3D& v) {
  const Dims in = v.dims();
  const Dims out{(in.x + 1) / 2, (in.y + 1) / 2, (in.z + 1) / 2};
  const Spacing sp{v.spacing().x * 2, v.spacing().y * 2, v.spacing().z * 2};
  Volume3D r(out, sp);
  for (std::uint32_t z = 0; z < out.z; ++z)
    for (std::uint32_t y = 0; y < out.y; ++y)
      for (std::uint32_t x = 0; x < out.x; ++x) {
        double sum = 0.0;
        int n = 0;
        for (std::uint32_t dz = 0; dz < 2; ++dz)
          for (std::uint32_t dy = 0; dy < 2; ++dy)
            for (std::uint32_t dx = 0; dx < 2; ++dx) {
              const auto ix = 2 * x + dx, iy = 2 * y + dy, iz = 2 * z + dz;
              if (ix < in.x && iy < in.y && iz < in.z) {
                sum += v.at(ix, iy, iz);
                ++n;
              }
            }
        r.at(x, y, z) = static_cast<float>(sum / n);
      }
  return r;
}

namespace detail {

struct AxisSample {
  std::uint32_t lo, hi;
  double t;
};

/// Corner-aligned mapping of output index o (of T) onto an input axis of D voxels.
inline std::vector<AxisSample> corner_aligned_axis(std::uint32_t D, std::uint32_t T) {
  std::vector<AxisSample> s(T);
  for (std::uint32_t o = 0; o < T; ++o) {
    if (D == 1 || T == 1) {
      s[o] = {0, 0, 0.0};
      continue;
    }
    const double c = static_cast<double>(o) * (D - 1) / (T - 1);
    auto lo = static_cast<std::uint32_t>(std::floor(c));
    if (lo >= D - 1) lo = D - 1;
    const std::uint32_t hi = std::min(lo + 1, D - 1);
    s[o] = {lo, hi, c - lo};
  }
  return s;
}

}  // namespace detail

inline Volume3D upsample_trilinear(const Volume3D& v, Dims target) {
  const Dims d = v.dims();
  if (target.x < d.x || target.y < d.y || target.z < d.z)
    throw ValidationError("upsample target " + target.str() + " smaller than source " + d.str());
  const auto ax = detail::corner_aligned_axis(d.x, target.x);
  const auto ay = detail::corner_aligned_axis(d.y, target.y);
  const auto az = detail::corner_aligned_axis(d.z, target.z);
  auto scale = [](float s, std::uint32_t from, std::uint32_t to) {
    return to > 1 && from > 1 ? s * static_cast<float>(from - 1) / static_cast<float>(to - 1) : s;
  };
  const Spacing sp{scale(v.spacing().x, d.x, target.x), scale(v.spacing().y, d.y, target.y),
                   scale(v.spacing().z, d.z, target.z)};
  Volume3D r(target, sp);
  for (std::uint32_t z = 0; z < target.z; ++z)
    for (std::uint32_t y = 0; y < target.y; ++y)
      for (std::uint32_t x = 0; x < target.x; ++x) {
        const auto& sx = ax[x];
        const auto& sy = ay[y];
        const auto& sz = az[z];
        auto lerp_x = [&](std::uint32_t yy, std::uint32_t zz) {
          return (1.0 - sx.t) * v.at(sx.lo, yy, zz) + sx.t * v.at(sx.hi, yy, zz);
        };
        auto lerp_xy = [&](std::uint32_t zz) { return (1.0 - sy.t) * lerp_x(sy.lo, zz) + sy.t * lerp_x(sy.hi, zz); };
        r.at(x, y, z) = static_cast<float>((1.0 - sz.t) * lerp_xy(sz.lo) + sz.t * lerp_xy(sz.hi));
      }
  return r;
}

/// Standardizes in-ICC voxels to zero mean, unit population std; zeroes the rest.
inline Volume3D zscore_normalize(const Volume3D& v, const LabelMap3D& mask) {
  if (!(v.dims() == mask.dims())) throw ValidationError("volume and mask dims differ");
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (mask[i] == 0) continue;
    sum += v[i];
    ++n;
  }
  if (n < 2) throw DegenerateInputError("z-score needs at least two in-mask voxels");
  const double mean = sum / static_cast<double>(n);
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (mask[i] == 0) continue;
    const double d = v[i] - mean;
    sq += d * d;
  }
  const double sd = std::sqrt(sq / static_cast<double>(n));
  if (!(sd > 0.0)) throw DegenerateInputError("zero in-mask intensity variance");
  Volume3D r(v.dims(), v.spacing());
  for (std::size_t i = 0; i < v.size(); ++i)
    r[i] = mask[i] == 0 ? 0.f : static_cast<float>((v[i] - mean) / sd);
  return r;
}

}  // namespace deepgrade
