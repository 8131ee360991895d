#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "ribac/datasets.hpp"
#include "ribac/mask.hpp"
#include "ribac/model.hpp"
#include "ribac/rng.hpp"
#include "ribac/tensor.hpp"

namespace ribac::test {

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

template <typename T>
TensorT<T> random_images(Rng& rng, std::int64_t n, const ImageShape& s, double lo = 0.1, double hi = 0.9) {
  TensorT<T> t({n, s.channels, s.height, s.width});
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// Scores for random layers of random sizes; small integer values force ties.
inline ImportanceScores random_scores(Rng& rng, bool ties) {
  ImportanceScores s;
  const int layers = 1 + static_cast<int>(rng.below(4));
  for (int l = 0; l < layers; ++l) {
    const auto n = static_cast<std::int64_t>(1 + rng.below(60));
    Tensor t({n});
    for (auto& v : t.values()) {
      v = ties ? static_cast<float>(rng.below(5)) : static_cast<float>(rng.normal());
    }
    s.tensors.add("layer" + std::to_string(l), std::move(t));
  }
  return s;
}

// Full sort with (value desc, index asc), first `count` indices.
inline std::vector<std::int64_t> sort_oracle(std::span<const float> v, std::int64_t count) {
  std::vector<std::int64_t> idx(v.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::int64_t>(i);
  std::sort(idx.begin(), idx.end(), [&](std::int64_t a, std::int64_t b) {
    if (v[static_cast<std::size_t>(a)] != v[static_cast<std::size_t>(b)]) {
      return v[static_cast<std::size_t>(a)] > v[static_cast<std::size_t>(b)];
    }
    return a < b;
  });
  idx.resize(static_cast<std::size_t>(count));
  std::sort(idx.begin(), idx.end());
  return idx;
}

// Round half to even, at least one.
inline std::int64_t rounded_keep(std::int64_t n, double k) {
  const double x = k * static_cast<double>(n);
  double r = std::floor(x);
  const double frac = x - r;
  if (frac > 0.5 || (frac == 0.5 && std::fmod(r, 2.0) != 0.0)) r += 1.0;
  return std::max<std::int64_t>(1, static_cast<std::int64_t>(r));
}

// conv(3->3, k3) + BN + ReLU + maxpool, conv(3->4, k3, bias), ReLU, GAP, linear -> classes.
inline Architecture tiny_cnn(int classes = 3, ImageShape input = {6, 6, 3}) {
  ArchitectureBuilder b(input, classes);
  int x = b.normalize(b.input(), {0.4f, 0.5f, 0.6f}, {0.3f, 0.25f, 0.2f});
  x = b.relu(b.batch_norm(b.conv(x, "conv1", 3, 3, 1, 1), "bn1"));
  x = b.max_pool2(x);
  x = b.relu(b.conv(x, "conv2", 4, 3, 1, 1, true));
  b.mark_feature(x);
  x = b.linear(b.global_avg_pool(x), "fc", classes);
  return b.finish(x);
}

// Two-layer net with 16 hidden units: a 2x2 convolution over a 2x2 image acts
// as a dense layer.
inline Architecture two_layer_16(int classes = 3) {
  ArchitectureBuilder b({2, 2, 3}, classes);
  int x = b.relu(b.conv(b.input(), "hidden", 16, 2, 1, 0, true));
  b.mark_feature(x);
  x = b.linear(b.global_avg_pool(x), "out", classes);
  return b.finish(x);
}

// Small labelled set of random images with balanced labels.
inline LabeledImageSet random_set(std::uint64_t seed, std::int64_t n, int classes, ImageShape shape = {6, 6, 3}) {
  Rng rng(seed);
  LabeledImageSet set;
  set.shape = shape;
  set.num_classes = classes;
  set.split = Split::kTest;
  set.pixels.resize(static_cast<std::size_t>(n * shape.numel()));
  for (auto& p : set.pixels) p = normalize_pixel(static_cast<std::uint8_t>(rng.below(256)));
  for (std::int64_t i = 0; i < n; ++i) set.labels.push_back(static_cast<int>(i % classes));
  return set;
}

}  // namespace ribac::test
