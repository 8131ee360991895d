#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>

#include "ribac/mask.hpp"
#include "ribac/model.hpp"

namespace ribac {

class InvalidMask : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ScoreInit { kAbs, kSigned };
ScoreInit parse_score_init(const std::string& name);
std::string to_string(ScoreInit s);

// Number of weights kept out of `n` at keep fraction k: round half to even,
// never fewer than one.
std::int64_t kept_count(std::int64_t n, double keep_fraction);

// Indices of the `count` largest values; equal values prefer the lower index.
std::vector<std::int64_t> top_indices(std::span<const float> values, std::int64_t count);

// Per-layer top-k mask over importance scores.
PruneMask generate_mask(const ImportanceScores& scores, double keep_fraction);

// S = |W| (or S = W for the signed variant) over every prunable tensor.
ImportanceScores score_init(const ModelWeights& weights, std::span<const std::string> prunable,
                            ScoreInit mode = ScoreInit::kAbs);

// Straight-through rule: dJ/ds_i = w_i * dJ/dŵ_i with ŵ = W⊙M.
template <typename T>
NamedTensors<T> ste_score_grad(const NamedTensors<T>& weights, const PruneMask& mask,
                               const NamedTensors<T>& masked_weight_grad);

// Global magnitude pruning pooled over all prunable tensors.
PruneMask l1_global_mask(const ModelWeights& weights, std::span<const std::string> prunable, double keep_fraction);

PruneMask all_ones_mask(const ModelWeights& weights, std::span<const std::string> prunable);

// Total prunable parameters over kept ones.
double compression_ratio(const PruneMask& mask);

// Sum over layers of kept_count(n_l, k): the exact L0 budget of generate_mask.
std::int64_t expected_kept(const PruneMask& mask, double keep_fraction);

// W⊙M for every masked tensor; other parameters untouched.
void apply_mask(ModelWeights& weights, const PruneMask& mask);

}  // namespace ribac
