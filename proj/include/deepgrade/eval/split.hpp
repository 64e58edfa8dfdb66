#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <vector>

#include "deepgrade/error.hpp"
#include "deepgrade/rng.hpp"

namespace deepgrade::eval {

/// Per-class part sizes from cumulative rounding: part i ends at round(n * sum(f[0..i])).
inline std::vector<std::size_t> stratum_sizes(std::size_t n, std::span<const double> fractions) {
  std::vector<std::size_t> sizes(fractions.size(), 0);
  double cum = 0.0;
  std::size_t prev = 0;
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    cum += fractions[i];
    std::size_t end = i + 1 == fractions.size() ? n : static_cast<std::size_t>(std::llround(cum * static_cast<double>(n)));
    end = std::min(std::max(end, prev), n);
    sizes[i] = end - prev;
    prev = end;
  }
  return sizes;
}

/// Assigns each sample a part index in [0, fractions.size()), stratified by
/// class label. Each class is shuffled with its own seeded stream.
inline std::vector<int> stratified_split(std::span<const int> labels, std::span<const double> fractions,
                                         std::uint64_t seed) {
  if (fractions.empty()) throw ValidationError("no split fractions given");
  double total = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0)) throw ValidationError("split fractions must be non-negative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ValidationError("split fractions must sum to 1");

  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);

  std::vector<int> part(labels.size(), -1);
  for (auto& [cls, members] : by_class) {
    const auto sizes = stratum_sizes(members.size(), fractions);
    for (std::size_t p = 0; p < fractions.size(); ++p)
      if (fractions[p] > 0.0 && sizes[p] == 0)
        throw ValidationError("class " + std::to_string(cls) + " has too few samples (" +
                              std::to_string(members.size()) + ") for split part " + std::to_string(p));
    Rng rng(derive_seed(seed, {0x5711u, static_cast<std::uint64_t>(cls)}));
    rng.shuffle(std::span<std::size_t>(members));
    std::size_t pos = 0;
    for (std::size_t p = 0; p < sizes.size(); ++p)
      for (std::size_t k = 0; k < sizes[p]; ++k) part[members[pos++]] = static_cast<int>(p);
  }
  return part;
}

}  // namespace deepgrade::eval
