#include "ribac/sparsity.hpp"

#include <algorithm>
#include <cfenv>
#include <cmath>
#include <numeric>

namespace ribac {

ScoreInit parse_score_init(const std::string& name) {
  if (name == "abs") return ScoreInit::kAbs;
  if (name == "signed") return ScoreInit::kSigned;
  throw ConfigError("unknown score init: " + name);
}

std::string to_string(ScoreInit s) { return s == ScoreInit::kAbs ? "abs" : "signed"; }

namespace {

void check_keep_fraction(double k) {
  if (!(k > 0.0 && k <= 1.0)) throw ConfigError("keep fraction must lie in (0,1], got " + std::to_string(k));
}

}  // namespace

std::int64_t kept_count(std::int64_t n, double keep_fraction) {
  check_keep_fraction(keep_fraction);
  // nearbyint honours the default round-to-nearest-even mode.
  const auto r = static_cast<std::int64_t>(std::nearbyint(keep_fraction * static_cast<double>(n)));
  return std::clamp<std::int64_t>(r, 1, n);
}

std::vector<std::int64_t> top_indices(std::span<const float> values, std::int64_t count) {
  std::vector<std::int64_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  count = std::clamp<std::int64_t>(count, 0, static_cast<std::int64_t>(idx.size()));
  auto before = [&](std::int64_t a, std::int64_t b) {
    const float va = values[static_cast<std::size_t>(a)], vb = values[static_cast<std::size_t>(b)];
    return va > vb || (va == vb && a < b);
  };
  if (count < static_cast<std::int64_t>(idx.size())) {
    std::nth_element(idx.begin(), idx.begin() + count, idx.end(), before);
  }
  idx.resize(static_cast<std::size_t>(count));
  std::sort(idx.begin(), idx.end());
  return idx;
}

PruneMask generate_mask(const ImportanceScores& scores, double keep_fraction) {
  check_keep_fraction(keep_fraction);
  PruneMask mask;
  mask.keep_fraction = keep_fraction;
  for (const auto& [name, s] : scores.tensors) {
    TensorT<std::uint8_t> m(s.shape());
    for (auto i : top_indices(s.values(), kept_count(s.numel(), keep_fraction))) m[i] = 1;
    mask.layers.add(name, std::move(m));
  }
  return mask;
}

ImportanceScores score_init(const ModelWeights& weights, std::span<const std::string> prunable, ScoreInit mode) {
  ImportanceScores scores;
  for (const auto& name : prunable) {
    Tensor s = weights.params.at(name);
    if (mode == ScoreInit::kAbs) {
      for (auto& v : s.values()) v = std::fabs(v);
    }
    scores.tensors.add(name, std::move(s));
  }
  return scores;
}

template <typename T>
NamedTensors<T> ste_score_grad(const NamedTensors<T>& weights, const PruneMask& mask,
                               const NamedTensors<T>& masked_weight_grad) {
  NamedTensors<T> out;
  for (const auto& [name, m] : mask.layers) {
    const auto& w = weights.at(name);
    const auto* g = masked_weight_grad.find(name);
    if (!g) throw ShapeError("no masked-weight gradient for " + name);
    if (w.shape() != m.shape() || g->shape() != m.shape()) throw ShapeError("score gradient shapes disagree for " + name);
    TensorT<T> sg(w.shape());
    for (std::int64_t i = 0; i < sg.numel(); ++i) sg[i] = w[i] * (*g)[i];
    out.add(name, std::move(sg));
  }
  return out;
}

template NamedTensors<float> ste_score_grad(const NamedTensors<float>&, const PruneMask&, const NamedTensors<float>&);
template NamedTensors<double> ste_score_grad(const NamedTensors<double>&, const PruneMask&, const NamedTensors<double>&);

PruneMask l1_global_mask(const ModelWeights& weights, std::span<const std::string> prunable, double keep_fraction) {
  check_keep_fraction(keep_fraction);
  std::vector<float> pooled;
  for (const auto& name : prunable) {
    for (float v : weights.params.at(name).values()) pooled.push_back(std::fabs(v));
  }
  const auto keep = kept_count(static_cast<std::int64_t>(pooled.size()), keep_fraction);
  std::vector<std::uint8_t> flat(pooled.size(), 0);
  for (auto i : top_indices(pooled, keep)) flat[static_cast<std::size_t>(i)] = 1;

  PruneMask mask;
  mask.keep_fraction = keep_fraction;
  std::size_t offset = 0;
  for (const auto& name : prunable) {
    const auto& w = weights.params.at(name);
    TensorT<std::uint8_t> m(w.shape());
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), w.numel(), m.data());
    offset += static_cast<std::size_t>(w.numel());
    mask.layers.add(name, std::move(m));
  }
  return mask;
}

PruneMask all_ones_mask(const ModelWeights& weights, std::span<const std::string> prunable) {
  PruneMask mask;
  mask.keep_fraction = 1.0;
  for (const auto& name : prunable) {
    mask.layers.add(name, TensorT<std::uint8_t>(weights.params.at(name).shape(), 1));
  }
  return mask;
}

double compression_ratio(const PruneMask& mask) {
  const auto kept = mask.kept();
  if (kept == 0) throw InvalidMask("compression ratio undefined: mask keeps no weights");
  return static_cast<double>(mask.total()) / static_cast<double>(kept);
}

std::int64_t expected_kept(const PruneMask& mask, double keep_fraction) {
  std::int64_t n = 0;
  for (const auto& [_, m] : mask.layers) n += kept_count(m.numel(), keep_fraction);
  return n;
}

void apply_mask(ModelWeights& weights, const PruneMask& mask) {
  for (const auto& [name, m] : mask.layers) {
    auto& w = weights.params.at(name);
    if (w.shape() != m.shape()) throw ShapeError("mask shape mismatch for " + name);
    for (std::int64_t i = 0; i < w.numel(); ++i) {
      if (!m[i]) w[i] = 0.0f;
    }
  }
}

}  // namespace ribac
