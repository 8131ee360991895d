#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ribac/tensor.hpp"

namespace ribac {

// Adaptive-moment estimation with bias correction, one state slot per
// named tensor. Defaults follow the common (0.9, 0.999, 1e-8) setting.
template <typename T>
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  std::int64_t steps() const { return step_; }

  // Updates every tensor of `params` that has a gradient of the same name.
  void step(NamedTensors<T>& params, const NamedTensors<T>& grads) {
    ++step_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    for (auto& [name, p] : params) {
      const auto* g = grads.find(name);
      if (!g) continue;
      if (g->shape() != p.shape()) throw ShapeError("gradient shape mismatch for " + name);
      auto& [m, v] = state(name, p.numel());
      for (std::int64_t i = 0; i < p.numel(); ++i) {
        const double gi = (*g)[i];
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        p[i] = static_cast<T>(p[i] - lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  Moments& state(const std::string& name, std::int64_t n) {
    for (auto& [key, s] : slots_) {
      if (key == name) return s;
    }
    slots_.push_back({name, {std::vector<double>(static_cast<std::size_t>(n)), std::vector<double>(static_cast<std::size_t>(n))}});
    return slots_.back().second;
  }

  double lr_, beta1_, beta2_, eps_;
  std::int64_t step_ = 0;
  std::vector<std::pair<std::string, Moments>> slots_;
};

// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
template <typename T>
class Sgd {
 public:
  Sgd(double lr, double momentum, double weight_decay) : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {}

  void set_lr(double lr) { lr_ = lr; }

  void step(NamedTensors<T>& params, const NamedTensors<T>& grads) {
    if (velocity_.empty()) velocity_ = zeros_like<double>(params);
    for (auto& [name, p] : params) {
      const auto* g = grads.find(name);
      if (!g) continue;
      auto& vel = velocity_.at(name);
      for (std::int64_t i = 0; i < p.numel(); ++i) {
        const double d = static_cast<double>((*g)[i]) + weight_decay_ * p[i];
        vel[i] = momentum_ * vel[i] + d;
        p[i] = static_cast<T>(p[i] - lr_ * vel[i]);
      }
    }
  }

 private:
  double lr_, momentum_, weight_decay_;
  NamedTensors<double> velocity_;
};

inline double cosine_lr(double base, std::int64_t step, std::int64_t total) {
  if (total <= 0) return base;
  return 0.5 * base * (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(step) / static_cast<double>(total)));
}

}  // namespace ribac
