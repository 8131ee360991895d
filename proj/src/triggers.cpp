#include "ribac/triggers.hpp"

#include <algorithm>
#include <cmath>

#include "ribac/rng.hpp"

namespace ribac {

namespace {

// Largest T not above epsilon, so the bound holds after rounding to T.
template <typename T>
T representable_bound(double epsilon) {
  T hi = static_cast<T>(epsilon);
  if (static_cast<double>(hi) > epsilon) hi = std::nextafter(hi, T{0});
  return hi;
}

}  // namespace

template <typename T>
const TensorT<T>& TriggerBankT<T>::pattern(int target) const {
  const auto* p = patterns.find(key(target));
  if (!p) throw MissingTrigger("no trigger pattern for target class " + std::to_string(target));
  return *p;
}

template <typename T>
TensorT<T>& TriggerBankT<T>::pattern(int target) {
  auto* p = patterns.find(key(target));
  if (!p) throw MissingTrigger("no trigger pattern for target class " + std::to_string(target));
  return *p;
}

template <typename T>
std::vector<int> TriggerBankT<T>::targets() const {
  std::vector<int> out;
  for (const auto& [name, _] : patterns) out.push_back(std::stoi(name.substr(name.find('/') + 1)));
  return out;
}

template <typename T>
double TriggerBankT<T>::max_abs() const {
  double m = 0.0;
  for (const auto& [_, p] : patterns) {
    for (auto v : p.values()) m = std::max(m, std::fabs(static_cast<double>(v)));
  }
  return m;
}

template struct TriggerBankT<float>;
template struct TriggerBankT<double>;

TriggerBank init_triggers(const ImageShape& shape, TargetMode mode, int num_classes, double epsilon,
                          std::uint64_t seed) {
  if (!(epsilon > 0.0)) throw ConfigError("trigger epsilon must be positive");
  if (num_classes < 2) throw ConfigError("trigger bank needs at least 2 classes");
  TriggerBank bank;
  bank.epsilon = epsilon;
  bank.mode = mode;
  bank.num_classes = num_classes;
  bank.shape = shape;
  Rng rng(substream_seed(seed, "triggers"));
  const int count = mode == TargetMode::kAllToOne ? 1 : num_classes;
  const float hi = representable_bound<float>(epsilon);
  for (int t = 0; t < count; ++t) {
    Tensor p({shape.channels, shape.height, shape.width});
    for (auto& v : p.values()) v = std::clamp(static_cast<float>(rng.uniform(-epsilon, epsilon)), -hi, hi);
    bank.patterns.add(TriggerBank::key(t), std::move(p));
  }
  return bank;
}

template <typename T>
TensorT<T> apply_trigger(const TensorT<T>& x, const TriggerBankT<T>& bank, std::span<const int> targets) {
  if (x.rank() != 4 || static_cast<std::size_t>(x.dim(0)) != targets.size()) {
    throw ShapeError("apply_trigger: batch " + shape_to_string(x.shape()) + " vs " + std::to_string(targets.size()) +
                     " targets");
  }
  const auto per = x.numel() / std::max<std::int64_t>(1, x.dim(0));
  TensorT<T> out(x.shape());
  for (std::size_t n = 0; n < targets.size(); ++n) {
    const auto& p = bank.pattern(targets[n]);
    if (p.numel() != per) throw ShapeError("trigger pattern does not match image shape");
    const T* src = x.data() + static_cast<std::int64_t>(n) * per;
    T* dst = out.data() + static_cast<std::int64_t>(n) * per;
    for (std::int64_t i = 0; i < per; ++i) dst[i] = std::clamp(src[i] + p[i], T{0}, T{1});
  }
  return out;
}

template <typename T>
NamedTensors<T> trigger_gradient(const TensorT<T>& x, const TriggerBankT<T>& bank, std::span<const int> targets,
                                 const TensorT<T>& grad_poisoned) {
  NamedTensors<T> out = zeros_like<T>(bank.patterns);
  const auto per = x.numel() / std::max<std::int64_t>(1, x.dim(0));
  for (std::size_t n = 0; n < targets.size(); ++n) {
    const auto& p = bank.pattern(targets[n]);
    auto& g = out.at(TriggerBankT<T>::key(targets[n]));
    const T* src = x.data() + static_cast<std::int64_t>(n) * per;
    const T* gp = grad_poisoned.data() + static_cast<std::int64_t>(n) * per;
    for (std::int64_t i = 0; i < per; ++i) {
      const T v = src[i] + p[i];
      if (v >= T{0} && v <= T{1}) g[i] += gp[i];
    }
  }
  return out;
}

template <typename T>
void project_triggers(TriggerBankT<T>& bank) {
  const T hi = representable_bound<T>(bank.epsilon);
  for (auto& [_, p] : bank.patterns) {
    for (auto& v : p.values()) v = std::clamp(v, -hi, hi);
  }
}

template TensorT<float> apply_trigger(const TensorT<float>&, const TriggerBankT<float>&, std::span<const int>);
template TensorT<double> apply_trigger(const TensorT<double>&, const TriggerBankT<double>&, std::span<const int>);
template NamedTensors<float> trigger_gradient(const TensorT<float>&, const TriggerBankT<float>&, std::span<const int>,
                                             const TensorT<float>&);
template NamedTensors<double> trigger_gradient(const TensorT<double>&, const TriggerBankT<double>&,
                                              std::span<const int>, const TensorT<double>&);
template void project_triggers(TriggerBankT<float>&);
template void project_triggers(TriggerBankT<double>&);

}  // namespace ribac
