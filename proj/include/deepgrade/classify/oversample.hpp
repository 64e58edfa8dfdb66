#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "deepgrade/error.hpp"
#include "deepgrade/rng.hpp"

namespace deepgrade::classify {

/// Record indices after random duplication of minority classes up to the
/// majority count. Originals come first in input order, then the drawn
/// duplicates grouped by ascending class.
inline std::vector<std::size_t> oversample_indices(std::span<const int> classes, std::uint64_t seed) {
  if (classes.empty()) throw ValidationError("cannot oversample an empty record set");
  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < classes.size(); ++i) members[classes[i]].push_back(i);
  std::size_t majority = 0;
  for (const auto& [c, m] : members) majority = std::max(majority, m.size());
  std::vector<std::size_t> out(classes.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = i;
  Rng rng(seed);
  for (const auto& [c, m] : members)
    for (std::size_t n = m.size(); n < majority; ++n) out.push_back(m[rng.index(m.size())]);
  return out;
}

template <class Record, class ClassOf>
std::vector<Record> oversample(const std::vector<Record>& records, ClassOf class_of, std::uint64_t seed) {
  std::vector<int> classes;
  classes.reserve(records.size());
  for (const auto& r : records) classes.push_back(class_of(r));
  std::vector<Record> out;
  for (auto i : oversample_indices(classes, seed)) out.push_back(records[i]);
  return out;
}

}  // namespace deepgrade::classify
