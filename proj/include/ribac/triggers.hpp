#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ribac/datasets.hpp"
#include "ribac/tensor.hpp"

namespace ribac {

inline constexpr double kDefaultEpsilon = 4.0 / 255.0;

// Additive full-image trigger per attack target, each bounded in L∞ by
// epsilon. Patterns are (C,H,W) and named "target/<class>".
template <typename T>
struct TriggerBankT {
  double epsilon = kDefaultEpsilon;
  TargetMode mode = TargetMode::kAllToOne;
  int num_classes = 0;
  ImageShape shape;
  NamedTensors<T> patterns;

  static std::string key(int target) { return "target/" + std::to_string(target); }
  bool has(int target) const { return patterns.contains(key(target)); }
  const TensorT<T>& pattern(int target) const;
  TensorT<T>& pattern(int target);
  std::vector<int> targets() const;
  double max_abs() const;

  template <typename U>
  TriggerBankT<U> cast() const {
    return {epsilon, mode, num_classes, shape, patterns.template cast<U>()};
  }
};

using TriggerBank = TriggerBankT<float>;

class MissingTrigger : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One pattern (class 0) for all-to-one, one per class for all-to-all;
// entries i.i.d. uniform on [-eps, eps].
TriggerBank init_triggers(const ImageShape& shape, TargetMode mode, int num_classes, double epsilon,
                          std::uint64_t seed);

// clip01(x + τ_target) per sample; x is (N,C,H,W).
template <typename T>
TensorT<T> apply_trigger(const TensorT<T>& x, const TriggerBankT<T>& bank, std::span<const int> targets);

// Chain rule through the clip: the gradient passes where 0 <= x+τ <= 1 and
// is summed per target pattern.
template <typename T>
NamedTensors<T> trigger_gradient(const TensorT<T>& x, const TriggerBankT<T>& bank, std::span<const int> targets,
                                 const TensorT<T>& grad_poisoned);

// Clamp every entry to [-eps, eps]; idempotent.
template <typename T>
void project_triggers(TriggerBankT<T>& bank);

extern template struct TriggerBankT<float>;
extern template struct TriggerBankT<double>;

}  // namespace ribac
