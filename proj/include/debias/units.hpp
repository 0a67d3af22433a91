#pragma once

#include <compare>
#include <string>
#include <vector>

#include "debias/nn.hpp"

namespace debias {

// A prunable unit: one conv output channel together with its producing filter.
struct UnitId {
  int layer = 0;
  int channel = 0;
  auto operator<=>(const UnitId&) const = default;
};

inline std::string to_string(UnitId u) {
  return "L" + std::to_string(u.layer) + "C" + std::to_string(u.channel);
}

// Units enabled by `mask`, in ascending UnitId order. nullptr means all units.
inline std::vector<UnitId> units_in(const nn::NetworkConfig& config, const nn::ChannelMask* mask) {
  std::vector<UnitId> out;
  for (int l = 0; l < config.num_layers(); ++l) {
    for (int c = 0; c < config.conv_layers[l].out_channels; ++c) {
      if (!mask || (*mask)[l][c]) out.push_back({l, c});
    }
  }
  return out;
}

}  // namespace debias
