#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "ribac/defenses.hpp"
#include "ribac/evaluation.hpp"
#include "support.hpp"

using namespace ribac;
using namespace ribac::test;

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Direct transcription of the MAD outlier score.
double anomaly_oracle(const std::vector<double>& v) {
  const double med = median(v);
  std::vector<double> dev;
  for (double x : v) dev.push_back(std::fabs(x - med));
  const double mad = median(dev);
  const double num = std::fabs(*std::min_element(v.begin(), v.end()) - med);
  if (mad == 0) return num == 0 ? 0.0 : std::numeric_limits<double>::infinity();
  return num / (1.4826 * mad);
}

struct Fixture {
  Network<float> net{tiny_cnn()};
  ModelWeights w = net.init_weights(8);
  LabeledImageSet set = random_set(8, 30, 3);
  InspectedModel model{&net, &w, nullptr};
};

}  // namespace

TEST_CASE("anomaly index: worked values and degenerate cases") {
  CHECK(anomaly_index(std::vector<double>{1, 1, 1}) == 0.0);
  CHECK(std::isinf(anomaly_index(std::vector<double>{0, 5, 5, 5})));
  const std::vector<double> v{10, 11, 12, 13, 2};
  // median 11, deviations {1,0,1,2,9} -> MAD 1, |2 - 11| / 1.4826
  CHECK(anomaly_index(v) == doctest::Approx(9.0 / 1.4826));
  CHECK_THROWS_AS(anomaly_index(std::vector<double>{}), DefenseError);
}

TEST_CASE("property: anomaly index matches the oracle and is permutation and scale invariant") {
  Rng rng(12);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> v(2 + rng.below(20));
    for (auto& x : v) x = rng.uniform(0.1, 100.0);
    const double a = anomaly_index(v);
    CHECK(a == doctest::Approx(anomaly_oracle(v)));
    CHECK(a >= 0.0);
    auto w = v;
    rng.shuffle(w.begin(), w.end());
    CHECK(anomaly_index(w) == doctest::Approx(a));
    for (auto& x : w) x *= 3.5;
    CHECK(anomaly_index(w) == doctest::Approx(a));
  }
}

TEST_CASE("Shannon entropy bounds") {
  CHECK(shannon_entropy(std::vector<double>{1, 0, 0}) == 0.0);
  CHECK(shannon_entropy(std::vector<double>{0.25, 0.25, 0.25, 0.25}) == doctest::Approx(std::log(4.0)));
  CHECK(shannon_entropy(std::vector<double>{0.5, 0.5}) == doctest::Approx(std::log(2.0)));
}

TEST_CASE("STRIP entropies lie in [0, log c] and are seeded") {
  Fixture f;
  const auto probes = f.set.head(6);
  StripConfig cfg;
  cfg.overlays = 10;
  cfg.seed = 3;
  const auto bank = init_triggers(f.set.shape, TargetMode::kAllToOne, 3, kDefaultEpsilon, 0);
  const auto clean = strip_entropy(f.model, probes, f.set, cfg);
  const auto poisoned = strip_entropy(f.model, probes, f.set, cfg, &bank);
  REQUIRE(clean.size() == 6);
  for (double h : clean) {
    CHECK(h >= 0.0);
    CHECK(h <= std::log(3.0) + 1e-9);
  }
  CHECK(strip_entropy(f.model, probes, f.set, cfg) == clean);
  CHECK(poisoned.size() == 6);
}

TEST_CASE("Fine-Pruning: first point is the unpruned model, fractions increase to 1") {
  Fixture f;
  const auto bank = init_triggers(f.set.shape, TargetMode::kAllToAll, 3, kDefaultEpsilon, 0);
  const auto curve = fine_pruning_curve(f.model, f.set, f.set, bank, 0.25);
  REQUIRE(curve.size() == 5);
  CHECK(curve[0].pruned_fraction == 0.0);
  CHECK(curve[0].channels_pruned == 0);
  CHECK(curve[0].clean_accuracy == clean_accuracy(f.net, f.w, nullptr, f.set));
  CHECK(curve[0].attack_success_rate == attack_success_rate(f.net, f.w, nullptr, f.set, bank));
  for (std::size_t i = 1; i < curve.size(); ++i) CHECK(curve[i].pruned_fraction > curve[i - 1].pruned_fraction);
  CHECK(curve.back().pruned_fraction == 1.0);
  CHECK(curve.back().channels_pruned == 4);
  CHECK_THROWS_AS(fine_pruning_curve(f.model, f.set, f.set, bank, 0.0), DefenseError);
}

TEST_CASE("Fine-Pruning prunes the least active channels first") {
  Fixture f;
  const auto mean = mean_feature_activation(f.model, f.set);
  REQUIRE(mean.size() == 4);
  for (double m : mean) CHECK(m >= 0.0);
}

TEST_CASE("GradCAM heatmaps are normalized to [0,1]") {
  Fixture f;
  const auto x = f.set.head(1);
  Tensor image({3, 6, 6}, std::vector<float>(x.pixels.begin(), x.pixels.end()));
  const auto h = gradcam_heatmap(f.model, image, 1);
  CHECK(h.shape() == Shape{6, 6});
  float lo = 1, hi = 0;
  for (float v : h.values()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK(lo >= 0.0f);
  CHECK(hi <= 1.0f);
  CHECK((hi == 1.0f || hi == 0.0f));
}

TEST_CASE("GradCAM of a constant map is all zeros") {
  Fixture f;
  for (auto& [name, t] : f.w.params) {
    if (name.starts_with("conv2")) t.fill(0.0f);
  }
  Tensor image({3, 6, 6}, 0.5f);
  const auto cam = gradcam_heatmap(f.model, image, 0);
  for (float v : cam.values()) CHECK(v == 0.0f);
}

TEST_CASE("patch stamping writes a checkerboard in the bottom-right corner") {
  Tensor images({1, 3, 6, 6}, 0.5f);
  stamp_patch(images, 3);
  CHECK(images[0] == 0.5f);
  const auto at = [&](int c, int y, int x) { return images[(c * 6 + y) * 6 + x]; };
  for (int c = 0; c < 3; ++c) {
    CHECK(at(c, 3, 3) != at(c, 3, 4));
    CHECK(at(c, 3, 3) == at(c, 4, 4));
    CHECK((at(c, 5, 5) == 0.0f || at(c, 5, 5) == 1.0f));
    CHECK(at(c, 2, 2) == 0.5f);
  }
}

TEST_CASE("Neural Cleanse report shape on a tiny budget") {
  Fixture f;
  NeuralCleanseConfig cfg;
  cfg.epochs = 2;
  cfg.samples = 20;
  cfg.batch_size = 10;
  const auto report = neural_cleanse(f.model, f.set, cfg);
  REQUIRE(report.classes.size() == 3);
  std::vector<double> norms;
  for (const auto& r : report.classes) {
    CHECK(r.mask_l1 >= 0.0);
    CHECK(r.mask_l1 <= 36.0);
    norms.push_back(r.mask_l1);
  }
  CHECK(report.anomaly_index == doctest::Approx(anomaly_index(norms)));
  CHECK(report.flagged == (report.anomaly_index > kAnomalyThreshold));
  const auto j = to_json(report);
  CHECK(j.contains("anomaly_index"));
}

TEST_CASE("defense figures are written as PNG files") {
  const auto dir = std::filesystem::temp_directory_path() / "ribac_unit_figs";
  std::filesystem::create_directories(dir);
  std::vector<FinePruningPoint> curve{{0.0, 0, 0.9, 1.0}, {0.5, 2, 0.7, 0.95}, {1.0, 4, 0.3, 0.9}};
  write_fine_pruning_plot(dir / "fp.png", curve);
  write_strip_histogram(dir / "strip.png", {0.5, 0.6, 0.7}, {0.1, 0.2}, 3);
  Tensor img({3, 4, 4}, 0.5f);
  write_image_png(dir / "img.png", img, 2);
  for (const char* name : {"fp.png", "strip.png", "img.png"}) CHECK(std::filesystem::file_size(dir / name) > 0);
  std::filesystem::remove_all(dir);
}
