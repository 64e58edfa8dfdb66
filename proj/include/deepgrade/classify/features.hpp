#pragma once

#include <vector>

#include "deepgrade/error.hpp"
#include "deepgrade/volume.hpp"

namespace deepgrade::classify {

/// Structure volumes in percent of ICC volume, index j for structure j + 1.
inline std::vector<double> compute_volume_features(const LabelMap3D& labels, unsigned s) {
  const auto counts = labels.label_counts(s);
  std::size_t icc = 0;
  for (std::size_t j = 1; j < counts.size(); ++j) icc += counts[j];
  if (icc == 0) throw DegenerateInputError("label map has an empty ICC");
  std::vector<double> f(s);
  for (unsigned j = 1; j <= s; ++j) f[j - 1] = 100.0 * static_cast<double>(counts[j]) / static_cast<double>(icc);
  return f;
}

}  // namespace deepgrade::classify
