#pragma once

#include <cstdint>

#include "ribac/tensor.hpp"

namespace ribac {

// Binary keep-mask over the prunable tensors; 1 keeps a weight.
struct PruneMask {
  NamedTensors<std::uint8_t> layers;
  double keep_fraction = 1.0;

  std::int64_t total() const { return layers.total_numel(); }
  std::int64_t kept() const {
    std::int64_t n = 0;
    for (const auto& [_, m] : layers) {
      for (auto v : m.values()) n += v;
    }
    return n;
  }

  friend bool operator==(const PruneMask&, const PruneMask&) = default;
};

// Trainable per-weight importance, aligned with the prunable tensors.
struct ImportanceScores {
  NamedTensors<float> tensors;
};

}  // namespace ribac
