#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "ribac/optim.hpp"
#include "ribac/triggers.hpp"
#include "support.hpp"

using namespace ribac;
using namespace ribac::test;

TEST_CASE("init_triggers: one pattern for all-to-one, one per class for all-to-all") {
  const ImageShape s{32, 32, 3};
  const auto one = init_triggers(s, TargetMode::kAllToOne, 10, kDefaultEpsilon, 0);
  CHECK(one.patterns.size() == 1);
  CHECK(one.has(0));
  const auto all = init_triggers(s, TargetMode::kAllToAll, 10, kDefaultEpsilon, 0);
  CHECK(all.patterns.size() == 10);
  for (int t = 0; t < 10; ++t) CHECK(all.has(t));
  CHECK(one.max_abs() <= 4.0 / 255.0);
  CHECK(all.max_abs() <= 4.0 / 255.0);
  CHECK(init_triggers(s, TargetMode::kAllToAll, 10, kDefaultEpsilon, 0).patterns == all.patterns);
  CHECK_FALSE(init_triggers(s, TargetMode::kAllToAll, 10, kDefaultEpsilon, 1).patterns == all.patterns);
  CHECK_THROWS_AS(init_triggers(s, TargetMode::kAllToOne, 10, 0.0, 0), ConfigError);
}

TEST_CASE("init_triggers spreads over the whole budget") {
  const auto bank = init_triggers({16, 16, 3}, TargetMode::kAllToOne, 3, kDefaultEpsilon, 4);
  const auto& p = bank.pattern(0);
  const auto [lo, hi] = std::minmax_element(p.values().begin(), p.values().end());
  CHECK(*lo < -0.9 * kDefaultEpsilon);
  CHECK(*hi > 0.9 * kDefaultEpsilon);
}

TEST_CASE("apply_trigger worked examples") {
  auto bank = init_triggers({1, 2, 3}, TargetMode::kAllToOne, 3, kDefaultEpsilon, 0);
  Tensor x({1, 3, 1, 2}, {0.0f, 0.2f, 0.5f, 0.7f, 1.0f, 0.99f});
  const std::vector<int> targets{0};

  bank.pattern(0).fill(0.0f);
  CHECK(apply_trigger(x, bank, std::span<const int>(targets)) == x);

  bank.pattern(0).fill(static_cast<float>(4.0 / 255.0));
  const auto y = apply_trigger(x, bank, std::span<const int>(targets));
  CHECK(y[4] == 1.0f);
  CHECK(y[5] == 1.0f);
  CHECK(y[1] == doctest::Approx(0.2 + 4.0 / 255.0));

  const std::vector<int> missing{2};
  CHECK_THROWS_AS(apply_trigger(x, bank, std::span<const int>(missing)), MissingTrigger);
}

TEST_CASE("project_triggers clamps and is idempotent") {
  auto bank = init_triggers({2, 2, 3}, TargetMode::kAllToOne, 3, kDefaultEpsilon, 0);
  bank.pattern(0)[0] = 0.1f;
  bank.pattern(0)[1] = -0.1f;
  project_triggers(bank);
  CHECK(bank.pattern(0)[0] == doctest::Approx(kDefaultEpsilon));
  CHECK(bank.pattern(0)[1] == doctest::Approx(-kDefaultEpsilon));
  CHECK(bank.max_abs() <= kDefaultEpsilon);
  const auto once = bank.patterns;
  project_triggers(bank);
  CHECK(bank.patterns == once);
}

TEST_CASE("property: projection, budget after updates, and clip range over 1000 instances") {
  Rng rng(99);
  for (int trial = 0; trial < 1000; ++trial) {
    const ImageShape s{static_cast<std::int64_t>(1 + rng.below(5)), static_cast<std::int64_t>(1 + rng.below(5)), 3};
    const int classes = 2 + static_cast<int>(rng.below(4));
    const auto mode = trial % 2 ? TargetMode::kAllToAll : TargetMode::kAllToOne;
    const double eps = rng.uniform(0.5, 8.0) / 255.0;
    auto bank = init_triggers(s, mode, classes, eps, rng.bits());
    REQUIRE(bank.max_abs() <= eps);

    // Simulated optimizer steps with large random gradients.
    Adam<float> opt(rng.uniform(1e-3, 0.5));
    for (int step = 0; step < 3; ++step) {
      NamedTensors<float> g;
      for (const auto& [name, p] : bank.patterns) g.add(name, random_tensor(rng, p.shape(), -10.0, 10.0));
      opt.step(bank.patterns, g);
      project_triggers(bank);
      REQUIRE(bank.max_abs() <= eps);
    }
    const auto projected = bank.patterns;
    project_triggers(bank);
    REQUIRE(bank.patterns == projected);

    const std::int64_t n = 1 + static_cast<std::int64_t>(rng.below(4));
    auto x = random_images<float>(rng, n, s, 0.0, 1.0);
    for (std::int64_t i = 0; i < x.numel(); i += 3) x[i] = rng.uniform() < 0.5 ? 0.0f : 1.0f;
    std::vector<int> targets;
    for (std::int64_t i = 0; i < n; ++i) {
      targets.push_back(mode == TargetMode::kAllToOne ? 0 : static_cast<int>(rng.below(static_cast<std::uint64_t>(classes))));
    }
    const auto y = apply_trigger(x, bank, std::span<const int>(targets));
    for (std::int64_t i = 0; i < y.numel(); ++i) {
      REQUIRE(y[i] >= 0.0f);
      REQUIRE(y[i] <= 1.0f);
      REQUIRE(std::fabs(y[i] - x[i]) <= eps + 1e-7);
    }
  }
}

TEST_CASE("trigger_gradient passes through unclipped pixels and sums per target") {
  auto bank = init_triggers({1, 2, 1}, TargetMode::kAllToAll, 2, kDefaultEpsilon, 0).cast<double>();
  bank.pattern(0).fill(0.01);
  bank.pattern(1).fill(0.01);
  TensorT<double> x({3, 1, 1, 2}, {0.5, 0.995, 0.3, 0.4, 0.2, 0.1});
  TensorT<double> g({3, 1, 1, 2}, {1.0, 2.0, 3.0, 4.0, 5.0, 6.0});
  const std::vector<int> targets{0, 1, 0};
  const auto grad = trigger_gradient(x, bank, std::span<const int>(targets), g);
  // Pixel 0.995 + 0.01 is clipped, so its gradient is blocked.
  CHECK(grad.at(TriggerBankT<double>::key(0))[0] == doctest::Approx(6.0));
  CHECK(grad.at(TriggerBankT<double>::key(0))[1] == doctest::Approx(6.0));
  CHECK(grad.at(TriggerBankT<double>::key(1))[0] == doctest::Approx(3.0));
  CHECK(grad.at(TriggerBankT<double>::key(1))[1] == doctest::Approx(4.0));
}
