#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "deepgrade/error.hpp"
#include "deepgrade/volume.hpp"

namespace deepgrade {

using Origin = std::array<std::uint32_t, 3>;

/// k^3 overlapping patch origins over a volume. Location index is x-fastest:
/// l = ix + k * (iy + k * iz).
struct PatchGrid {
  unsigned k = 1;
  Dims patch;
  Dims volume;
  std::vector<Origin> origins;

  std::size_t locations() const { return origins.size(); }
};

namespace detail {

inline std::vector<std::uint32_t> axis_origins(std::uint32_t D, std::uint32_t P, unsigned k) {
  std::vector<std::uint32_t> o(k);
  if (k == 1) {
    o[0] = static_cast<std::uint32_t>(std::lround((D - P) / 2.0));
    return o;
  }
  for (unsigned i = 0; i < k; ++i)
    o[i] = static_cast<std::uint32_t>(std::lround(static_cast<double>(i) * (D - P) / (k - 1)));
  return o;
}

}  // namespace detail

/// Rounded linear spacing of k origins per axis, both extremes included.
/// Throws CoverageError naming the first uncovered voxel.
inline PatchGrid plan_grid(Dims volume, Dims patch, unsigned k) {
  if (k < 1) throw ValidationError("patch grid needs k >= 1");
  if (patch.voxels() == 0) throw ValidationError("patch dims must be positive");
  std::array<std::vector<std::uint32_t>, 3> axes;
  for (int a = 0; a < 3; ++a) {
    if (patch[a] > volume[a])
      throw ValidationError("patch " + patch.str() + " larger than volume " + volume.str());
    axes[a] = detail::axis_origins(volume[a], patch[a], k);
    std::uint32_t covered = 0;  // voxels [0, covered) are covered
    for (auto o : axes[a]) {
      if (o > covered) throw CoverageError(a, covered);
      covered = std::max(covered, o + patch[a]);
    }
    if (covered < volume[a]) throw CoverageError(a, covered);
  }
  PatchGrid g{k, patch, volume, {}};
  g.origins.reserve(std::size_t{k} * k * k);
  for (unsigned iz = 0; iz < k; ++iz)
    for (unsigned iy = 0; iy < k; ++iy)
      for (unsigned ix = 0; ix < k; ++ix) g.origins.push_back({axes[0][ix], axes[1][iy], axes[2][iz]});
  return g;
}

inline Volume3D extract_patch(const Volume3D& v, const PatchGrid& grid, std::size_t location) {
  if (location >= grid.locations())
    throw ValidationError("patch location " + std::to_string(location) + " out of range");
  if (!(v.dims() == grid.volume)) throw ValidationError("volume dims " + v.dims().str() + " do not match grid");
  const auto& o = grid.origins[location];
  Volume3D p(grid.patch, v.spacing());
  for (std::uint32_t z = 0; z < grid.patch.z; ++z)
    for (std::uint32_t y = 0; y < grid.patch.y; ++y) {
      const float* src = &v.values()[v.index(o[0], o[1] + y, o[2] + z)];
      std::copy(src, src + grid.patch.x, &p.values()[p.index(0, y, z)]);
    }
  return p;
}

/// Overlap-averaged reassembly. Each voxel is the mean of every covering
/// patch, accumulated in double in ascending location order.
inline Volume3D assemble(std::span<const Volume3D> predictions, const PatchGrid& grid, Spacing spacing = {}) {
  if (predictions.size() < grid.locations())
    throw ValidationError("missing prediction for patch location " + std::to_string(predictions.size()));
  if (predictions.size() > grid.locations()) throw ValidationError("more predictions than patch locations");
  std::vector<double> sum(grid.volume.voxels(), 0.0);
  std::vector<std::uint32_t> count(grid.volume.voxels(), 0);
  const Dims vd = grid.volume;
  for (std::size_t l = 0; l < grid.locations(); ++l) {
    const auto& p = predictions[l];
    if (!(p.dims() == grid.patch))
      throw ValidationError("prediction " + std::to_string(l) + " has dims " + p.dims().str());
    const auto& o = grid.origins[l];
    for (std::uint32_t z = 0; z < grid.patch.z; ++z)
      for (std::uint32_t y = 0; y < grid.patch.y; ++y) {
        const std::size_t base = o[0] + std::size_t{vd.x} * ((o[1] + y) + std::size_t{vd.y} * (o[2] + z));
        for (std::uint32_t x = 0; x < grid.patch.x; ++x) {
          sum[base + x] += p.at(x, y, z);
          ++count[base + x];
        }
      }
  }
  Volume3D out(vd, spacing);
  for (std::size_t i = 0; i < sum.size(); ++i) {
    if (count[i] == 0) throw CoverageError(0, i);
    out[i] = static_cast<float>(sum[i] / count[i]);
  }
  return out;
}

inline nlohmann::json to_json(const PatchGrid& g) {
  return {{"k", g.k},
          {"patch", {g.patch.x, g.patch.y, g.patch.z}},
          {"volume", {g.volume.x, g.volume.y, g.volume.z}}};
}

inline PatchGrid patch_grid_from_json(const nlohmann::json& j) {
  auto p = j.at("patch").get<std::array<std::uint32_t, 3>>();
  auto v = j.at("volume").get<std::array<std::uint32_t, 3>>();
  return plan_grid({v[0], v[1], v[2]}, {p[0], p[1], p[2]}, j.at("k").get<unsigned>());
}

}  // namespace deepgrade
