#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deepgrade/error.hpp"
#include "deepgrade/neural/autograd.hpp"
#include "deepgrade/neural/conv.hpp"
#include "deepgrade/neural/module.hpp"
#include "deepgrade/rng.hpp"
#include "deepgrade/volume.hpp"

namespace deepgrade::nn {

/// 3x3x3 same-padded convolutions, max-pool down, nearest-neighbour up with
/// skip concatenation, 1x1x1 head followed by tanh.
struct UNetConfig {
  unsigned in_channels = 1;
  unsigned levels = 2;
  unsigned base_channels = 8;
  unsigned convs_per_level = 1;

  void validate() const {
    if (in_channels < 1 || levels < 1 || levels > 6 || base_channels < 1 || convs_per_level < 1)
      throw ValidationError("invalid U-Net configuration");
  }

  /// Patch dims must be divisible by 2^(levels - 1).
  bool accepts(Dims patch) const {
    const std::uint32_t f = 1u << (levels - 1);
    return patch.x % f == 0 && patch.y % f == 0 && patch.z % f == 0;
  }

  unsigned channels(unsigned level) const { return base_channels << level; }
};

inline nlohmann::json to_json(const UNetConfig& c) {
  return {{"in_channels", c.in_channels},
          {"levels", c.levels},
          {"base_channels", c.base_channels},
          {"convs_per_level", c.convs_per_level}};
}

inline UNetConfig unet_config_from_json(const nlohmann::json& j) {
  UNetConfig c;
  c.in_channels = j.value("in_channels", c.in_channels);
  c.levels = j.value("levels", c.levels);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.convs_per_level = j.value("convs_per_level", c.convs_per_level);
  c.validate();
  return c;
}

template <class T>
class UNet {
 public:
  UNet(const UNetConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(seed);
    auto add_conv = [&](const std::string& name, unsigned cin, unsigned cout, std::size_t k) {
      const std::size_t w = params_.size();
      params_.add_he_uniform(name + ".w", {cout, cin, k, k, k}, std::size_t{cin} * k * k * k, rng);
      params_.add_zeros(name + ".b", {cout});
      return Conv{w, w + 1};
    };
    for (unsigned l = 0; l < config_.levels; ++l) {
      std::vector<Conv> block;
      unsigned cin = l == 0 ? config_.in_channels : config_.channels(l - 1);
      for (unsigned i = 0; i < config_.convs_per_level; ++i) {
        block.push_back(add_conv("enc" + std::to_string(l) + "." + std::to_string(i), cin, config_.channels(l), 3));
        cin = config_.channels(l);
      }
      enc_.push_back(std::move(block));
    }
    dec_.resize(config_.levels > 0 ? config_.levels - 1 : 0);
    for (int l = static_cast<int>(config_.levels) - 2; l >= 0; --l) {
      unsigned cin = config_.channels(l + 1) + config_.channels(l);
      for (unsigned i = 0; i < config_.convs_per_level; ++i) {
        dec_[l].push_back(add_conv("dec" + std::to_string(l) + "." + std::to_string(i), cin, config_.channels(l), 3));
        cin = config_.channels(l);
      }
    }
    head_ = add_conv("head", config_.channels(0), 1, 1);
  }

  /// x: [N, in_channels, D, H, W] -> [N, 1, D, H, W] in (-1, 1).
  Var<T> forward(const Var<T>& x) const {
    if (x.rank() != 5 || x.dim(1) != config_.in_channels)
      throw ShapeError("U-Net input must be [N," + std::to_string(config_.in_channels) + ",D,H,W], got " +
                       shape_str(x.shape()));
    const std::size_t f = std::size_t{1} << (config_.levels - 1);
    if (x.dim(2) % f || x.dim(3) % f || x.dim(4) % f)
      throw ShapeError("U-Net input spatial dims must be divisible by " + std::to_string(f));
    Var<T> h = x;
    std::vector<Var<T>> skips;
    for (unsigned l = 0; l < config_.levels; ++l) {
      for (const auto& c : enc_[l]) h = relu(apply(c, h));
      if (l + 1 < config_.levels) {
        skips.push_back(h);
        h = maxpool2(h);
      }
    }
    for (int l = static_cast<int>(config_.levels) - 2; l >= 0; --l) {
      h = concat_channels(upsample_nn2(h), skips[l]);
      for (const auto& c : dec_[l]) h = relu(apply(c, h));
    }
    return tanh(apply(head_, h));
  }

  const UNetConfig& config() const { return config_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }

  /// Zeroes the head convolution so every output is tanh(0) = 0.
  void zero_head() {
    for (auto idx : {head_.w, head_.b})
      for (auto& v : params_.vars()[idx].mutable_value()) v = T(0);
  }

 private:
  struct Conv {
    std::size_t w, b;
  };

  Var<T> apply(const Conv& c, const Var<T>& h) const {
    return conv3d(h, params_.vars()[c.w], params_.vars()[c.b]);
  }

  UNetConfig config_;
  ParameterSet<T> params_;
  std::vector<std::vector<Conv>> enc_;
  std::vector<std::vector<Conv>> dec_;
  Conv head_{};
};

/// Packs same-sized volumes into a [N, 1, z, y, x] tensor (x fastest).
template <class T>
Var<T> volumes_to_tensor(std::span<const Volume3D* const> vols) {
  if (vols.empty()) throw ShapeError("no volumes to pack");
  const Dims d = vols.front()->dims();
  std::vector<T> data;
  data.reserve(vols.size() * d.voxels());
  for (const auto* v : vols) {
    if (!(v->dims() == d)) throw ShapeError("volumes in a batch must share dims");
    data.insert(data.end(), v->values().begin(), v->values().end());
  }
  return Var<T>::constant({vols.size(), 1, d.z, d.y, d.x}, std::move(data));
}

/// Unpacks sample n of a [N, 1, z, y, x] tensor.
template <class T>
Volume3D tensor_to_volume(const Var<T>& t, std::size_t n, Spacing spacing = {}) {
  if (t.rank() != 5 || t.dim(1) != 1) throw ShapeError("expected [N,1,D,H,W], got " + shape_str(t.shape()));
  const Dims d{static_cast<std::uint32_t>(t.dim(4)), static_cast<std::uint32_t>(t.dim(3)),
               static_cast<std::uint32_t>(t.dim(2))};
  const auto src = t.value().subspan(n * d.voxels(), d.voxels());
  return Volume3D(d, spacing, std::vector<float>(src.begin(), src.end()));
}

}  // namespace deepgrade::nn
