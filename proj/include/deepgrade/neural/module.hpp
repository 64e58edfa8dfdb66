#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "deepgrade/error.hpp"
#include "deepgrade/neural/autograd.hpp"
#include "deepgrade/neural/checkpoint.hpp"
#include "deepgrade/rng.hpp"

namespace deepgrade::nn {

/// Ordered set of named trainable arrays shared by the concrete models.
template <class T>
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;

  /// Copies are deep: the new set owns fresh parameter nodes.
  ParameterSet(const ParameterSet& other) : names_(other.names_) {
    for (const auto& v : other.vars_)
      vars_.push_back(Var<T>::parameter(v.shape(), std::vector<T>(v.value().begin(), v.value().end())));
  }

  ParameterSet& operator=(const ParameterSet& other) {
    if (this != &other) *this = ParameterSet(other);
    return *this;
  }

  /// Returned reference is invalidated by the next add().
  Var<T>& add(std::string name, Shape shape, std::vector<T> init) {
    names_.push_back(std::move(name));
    vars_.push_back(Var<T>::parameter(std::move(shape), std::move(init)));
    return vars_.back();
  }

  /// He-uniform weights, bound sqrt(6 / fan_in).
  Var<T>& add_he_uniform(std::string name, Shape shape, std::size_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::vector<T> w(numel(shape));
    for (auto& v : w) v = static_cast<T>(rng.uniform(-bound, bound));
    return add(std::move(name), std::move(shape), std::move(w));
  }

  Var<T>& add_zeros(std::string name, Shape shape) {
    const auto n = numel(shape);
    return add(std::move(name), std::move(shape), std::vector<T>(n, T(0)));
  }

  std::span<Var<T>> vars() { return vars_; }
  std::span<const Var<T>> vars() const { return vars_; }
  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return vars_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : vars_) n += v.size();
    return n;
  }

  Var<T>& get(const std::string& name) {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return vars_[i];
    throw ValidationError("no parameter named " + name);
  }

  std::vector<NamedArray> to_arrays() const {
    std::vector<NamedArray> out;
    for (std::size_t i = 0; i < vars_.size(); ++i) {
      NamedArray a{names_[i], {}, {}};
      for (auto d : vars_[i].shape()) a.dims.push_back(static_cast<std::uint32_t>(d));
      for (auto v : vars_[i].value()) a.data.push_back(static_cast<float>(v));
      out.push_back(std::move(a));
    }
    return out;
  }

  /// Loads values by name; every parameter must be present with its shape.
  void load_arrays(const std::vector<NamedArray>& arrays) {
    std::map<std::string, const NamedArray*> by_name;
    for (const auto& a : arrays) by_name[a.name] = &a;
    for (std::size_t i = 0; i < vars_.size(); ++i) {
      auto it = by_name.find(names_[i]);
      if (it == by_name.end()) throw FormatError("checkpoint lacks parameter " + names_[i]);
      const auto& a = *it->second;
      Shape s(a.dims.begin(), a.dims.end());
      if (s != vars_[i].shape())
        throw FormatError("checkpoint parameter " + names_[i] + " has shape " + shape_str(s) + ", expected " +
                          shape_str(vars_[i].shape()));
      auto dst = vars_[i].mutable_value();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(a.data[k]);
    }
  }

  void zero_grad() {
    for (auto& v : vars_) v.zero_grad();
  }

 private:
  std::vector<std::string> names_;
  std::vector<Var<T>> vars_;
};

}  // namespace deepgrade::nn
