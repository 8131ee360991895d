#include <doctest.h>

#include <cmath>

#include "ribac/engine.hpp"
#include "support.hpp"

using namespace ribac;
using namespace ribac::test;

namespace {

constexpr double kStep = 1e-6;
constexpr double kRelTol = 1e-4;

struct Problem {
  Network<double> net{tiny_cnn()};
  ModelWeightsT<double> w;
  TensorT<double> x;
  std::vector<int> labels, targets;
  TriggerBankT<double> bank;
  double beta = 0.7;
};

Problem make_problem(TargetMode mode, std::uint64_t seed) {
  Problem p;
  Rng rng(seed);
  p.w = p.net.init_weights(seed);
  for (auto& [name, t] : p.w.params) {
    if (name.find("bn") != std::string::npos || name.find("bias") != std::string::npos) {
      for (auto& v : t.values()) v = rng.uniform(0.5, 1.5) * (name.ends_with("bias") ? 0.1 : 1.0);
    }
  }
  for (auto& [name, t] : p.w.buffers) {
    for (auto& v : t.values()) v = name.find("var") != std::string::npos ? rng.uniform(0.5, 2.0) : rng.uniform(-0.3, 0.3);
  }
  const ImageShape s = p.net.arch().input;
  p.x = random_images<double>(rng, 5, s);
  p.labels = {0, 1, 2, 0, 1};
  p.bank = init_triggers(s, mode, 3, 4.0 / 255.0, seed).cast<double>();
  p.targets = make_targets(p.labels, mode, 3).targets;
  return p;
}

double loss_at(const Problem& p, const ModelWeightsT<double>& w, const PruneMask* mask, const TriggerBankT<double>& bank,
               NormMode norm) {
  LossOptions<double> o;
  o.gradients = false;
  o.norm = norm;
  return unified_loss(p.net, w, mask, p.x, p.labels, bank, p.targets, p.beta, o).total;
}

double rel_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
}

PruneMask half_mask(const Network<double>& net, const ModelWeightsT<double>& w) {
  ImportanceScores s;
  Rng rng(17);
  for (const auto& name : net.prunable()) {
    s.tensors.add(name, random_tensor(rng, w.params.at(name).shape()));
  }
  return generate_mask(s, 0.5);
}

PruneMask ones_mask(const PruneMask& like) {
  PruneMask m;
  for (const auto& [name, t] : like.layers) m.layers.add(name, TensorT<std::uint8_t>(t.shape(), 1));
  return m;
}

void check_weight_gradients(NormMode norm, bool masked) {
  auto p = make_problem(TargetMode::kAllToOne, 3);
  const auto mask = half_mask(p.net, p.w);
  const PruneMask* m = masked ? &mask : nullptr;
  LossOptions<double> o;
  o.norm = norm;
  const auto r = unified_loss(p.net, p.w, m, p.x, p.labels, p.bank, p.targets, p.beta, o);
  for (const auto& [name, t] : p.w.params) {
    std::vector<double> analytic, numeric;
    const auto* keep = masked ? mask.layers.find(name) : nullptr;
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      auto w = p.w;
      w.params.at(name)[i] += kStep;
      const double up = loss_at(p, w, m, p.bank, norm);
      w.params.at(name)[i] -= 2 * kStep;
      const double down = loss_at(p, w, m, p.bank, norm);
      numeric.push_back((up - down) / (2 * kStep));
      // dJ/dW = M ⊙ dJ/dŵ
      const double g = r.param_grad.at(name)[i];
      analytic.push_back(keep ? g * (*keep)[i] : g);
    }
    INFO(name);
    CHECK(rel_error(analytic, numeric) <= kRelTol);
  }
}

}  // namespace

TEST_CASE("weight gradients match central differences, inference-mode normalization") {
  check_weight_gradients(NormMode::kInference, false);
}

TEST_CASE("weight gradients match central differences, batch-statistics normalization") {
  check_weight_gradients(NormMode::kTrain, false);
}

TEST_CASE("masked weight gradients match central differences") {
  check_weight_gradients(NormMode::kInference, true);
  check_weight_gradients(NormMode::kTrain, true);
}

TEST_CASE("trigger gradients match central differences") {
  for (auto mode : {TargetMode::kAllToOne, TargetMode::kAllToAll}) {
    for (auto norm : {NormMode::kInference, NormMode::kTrain}) {
      auto p = make_problem(mode, 5);
      LossOptions<double> o;
      o.norm = norm;
      const auto r = unified_loss(p.net, p.w, nullptr, p.x, p.labels, p.bank, p.targets, p.beta, o);
      for (const auto& [name, t] : p.bank.patterns) {
        std::vector<double> analytic, numeric;
        for (std::int64_t i = 0; i < t.numel(); ++i) {
          auto bank = p.bank;
          bank.patterns.at(name)[i] += kStep;
          const double up = loss_at(p, p.w, nullptr, bank, norm);
          bank.patterns.at(name)[i] -= 2 * kStep;
          const double down = loss_at(p, p.w, nullptr, bank, norm);
          numeric.push_back((up - down) / (2 * kStep));
          analytic.push_back(r.trigger_grad.at(name)[i]);
        }
        INFO(name);
        CHECK(rel_error(analytic, numeric) <= kRelTol);
      }
    }
  }
}

TEST_CASE("score gradients equal the straight-through rule on finite-difference masked-weight gradients") {
  auto p = make_problem(TargetMode::kAllToOne, 9);
  const auto mask = half_mask(p.net, p.w);
  const auto ones = ones_mask(mask);
  const auto r = unified_loss(p.net, p.w, &mask, p.x, p.labels, p.bank, p.targets, p.beta);
  const auto ste = ste_score_grad(p.w.params, mask, r.param_grad);

  // ŵ = W⊙M evaluated as a dense network, perturbed entry by entry.
  auto masked = p.w;
  for (const auto& [name, m] : mask.layers) {
    for (std::int64_t i = 0; i < m.numel(); ++i) masked.params.at(name)[i] *= m[i];
  }
  for (const auto& [name, m] : mask.layers) {
    std::vector<double> analytic, numeric;
    for (std::int64_t i = 0; i < m.numel(); ++i) {
      auto w = masked;
      w.params.at(name)[i] += kStep;
      const double up = loss_at(p, w, &ones, p.bank, NormMode::kInference);
      w.params.at(name)[i] -= 2 * kStep;
      const double down = loss_at(p, w, &ones, p.bank, NormMode::kInference);
      numeric.push_back(p.w.params.at(name)[i] * (up - down) / (2 * kStep));
      analytic.push_back(ste.at(name)[i]);
    }
    INFO(name);
    CHECK(rel_error(analytic, numeric) <= kRelTol);
  }
}

TEST_CASE("swap test: the STE gradient predicts the sign of a mask swap") {
  Network<double> net(two_layer_16());
  auto w = net.init_weights(21);
  Rng rng(21);
  TensorT<double> x = random_images<double>(rng, 8, net.arch().input);
  const std::vector<int> labels{0, 1, 2, 0, 1, 2, 0, 1};
  const auto targets = make_targets(labels, TargetMode::kAllToOne, 3).targets;
  auto bank = init_triggers(net.arch().input, TargetMode::kAllToOne, 3, 4.0 / 255.0, 21).cast<double>();
  auto eval = [&](const PruneMask& m) {
    LossOptions<double> o;
    o.gradients = false;
    return unified_loss(net, w, &m, x, labels, bank, targets, 1.0, o).total;
  };

  ImportanceScores scores = score_init(w.cast<float>(), net.prunable());
  int checked = 0;
  for (int round = 0; round < 20; ++round) {
    const auto mask = generate_mask(scores, 0.5);
    const auto r = unified_loss(net, w, &mask, x, labels, bank, targets, 1.0);
    const auto ste = ste_score_grad(w.params, mask, r.param_grad);
    const std::string layer = net.prunable()[static_cast<std::size_t>(round % 2)];
    const auto& m = mask.layers.at(layer);
    const auto& g = ste.at(layer);
    // Pruned entry with the most negative score gradient (largest predicted
    // decrease when kept), kept entry with the smallest |gradient|.
    std::int64_t in = -1, out = -1;
    for (std::int64_t i = 0; i < m.numel(); ++i) {
      if (!m[i] && (in < 0 || g[i] < g[in])) in = i;
      if (m[i] && (out < 0 || std::fabs(g[i]) < std::fabs(g[out]))) out = i;
    }
    const double predicted = -g[in] + g[out];  // first-order change of -J
    auto swapped = scores;
    auto& s = swapped.tensors.at(layer);
    s[in] = s[out] + 1e-3f;
    s[out] = -1e9f;
    const auto new_mask = generate_mask(swapped, 0.5);
    REQUIRE(new_mask.layers.at(layer)[in] == 1);
    REQUIRE(new_mask.layers.at(layer)[out] == 0);
    const double delta = eval(mask) - eval(new_mask);
    if (std::fabs(predicted) > 1e-3) {
      CHECK((delta > 0) == (predicted > 0));
      ++checked;
    }
    // Move on to a different mask for the next round.
    for (auto& [_, t] : scores.tensors) {
      for (auto& v : t.values()) v += static_cast<float>(rng.uniform(-0.02, 0.02));
    }
  }
  CHECK(checked >= 10);
}

TEST_CASE("loss is affine in beta and beta = 0 equals the clean term") {
  auto p = make_problem(TargetMode::kAllToAll, 12);
  LossOptions<double> o;
  o.gradients = false;
  auto at = [&](double beta) { return unified_loss(p.net, p.w, nullptr, p.x, p.labels, p.bank, p.targets, beta, o); };
  const auto j0 = at(0.0), j1 = at(1.0), j3 = at(3.0);
  CHECK(j0.total == j0.clean);
  CHECK(j3.total - j0.total == doctest::Approx(3.0 * (j1.total - j0.total)).epsilon(1e-12));

  // Clean term recomputed directly from a clean-only forward.
  const auto logits = p.net.forward(p.w, nullptr, p.x);
  CHECK(j0.clean == doctest::Approx(cross_entropy(logits, std::span<const int>(p.labels))).epsilon(1e-12));
}
