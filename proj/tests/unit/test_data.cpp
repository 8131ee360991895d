#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "ribac/datasets.hpp"
#include "support.hpp"

using namespace ribac;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("ribac_unit_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_cifar_batch(const fs::path& path, int records, int label_offset) {
  std::ofstream out(path, std::ios::binary);
  for (int r = 0; r < records; ++r) {
    out.put(static_cast<char>((r + label_offset) % 10));
    for (int k = 0; k < 3072; ++k) out.put(static_cast<char>((k + r) % 256));
  }
}

}  // namespace

TEST_CASE("make_targets worked examples") {
  CHECK(make_targets(std::vector<int>{3, 7}, TargetMode::kAllToOne, 10).targets == std::vector<int>{0, 0});
  CHECK(make_targets(std::vector<int>{9}, TargetMode::kAllToAll, 10).targets == std::vector<int>{0});
  CHECK(make_targets(std::vector<int>{0, 1, 2}, TargetMode::kAllToAll, 3).targets == std::vector<int>{1, 2, 0});
  CHECK_THROWS_AS(make_targets(std::vector<int>{0}, TargetMode::kAllToAll, 1), ConfigError);
  CHECK_THROWS_AS(make_targets(std::vector<int>{5}, TargetMode::kAllToAll, 3), ConfigError);
}

TEST_CASE("property: all-to-all targets are a fixed-point-free bijection") {
  for (int c = 2; c <= 50; ++c) {
    std::vector<int> labels(static_cast<std::size_t>(c));
    for (int i = 0; i < c; ++i) labels[static_cast<std::size_t>(i)] = i;
    const auto t = make_targets(labels, TargetMode::kAllToAll, c).targets;
    CHECK(std::set<int>(t.begin(), t.end()).size() == static_cast<std::size_t>(c));
    for (int i = 0; i < c; ++i) CHECK(t[static_cast<std::size_t>(i)] != i);
  }
}

TEST_CASE("epoch_batches: sizes, coverage, determinism") {
  const auto b = epoch_batches(10, 4, 0, 0);
  REQUIRE(b.size() == 3);
  CHECK(b[0].size() == 4);
  CHECK(b[1].size() == 4);
  CHECK(b[2].size() == 2);
  CHECK(epoch_batches(10, 4, 0, 0) == b);
  CHECK_THROWS_AS(epoch_batches(0, 4, 0, 0), ConfigError);
  CHECK_THROWS_AS(epoch_batches(10, 0, 0, 0), ConfigError);

  ribac::Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const auto n = static_cast<std::int64_t>(1 + rng.below(300));
    const auto bs = static_cast<std::int64_t>(1 + rng.below(64));
    std::vector<int> seen(static_cast<std::size_t>(n), 0);
    for (const auto& batch : epoch_batches(n, bs, rng.bits(), static_cast<std::int64_t>(rng.below(10)))) {
      CHECK(static_cast<std::int64_t>(batch.size()) <= bs);
      for (auto i : batch) ++seen[static_cast<std::size_t>(i)];
    }
    for (int s : seen) CHECK(s == 1);
  }
}

TEST_CASE("different seeds and epochs give different orders on desk_synth") {
  const auto set = make_desk_synth(Split::kTrain);
  const auto a = epoch_batches(set.size(), 64, 1, 0), b = epoch_batches(set.size(), 64, 2, 0);
  CHECK(a != b);
  CHECK(epoch_batches(set.size(), 64, 1, 1) != a);
  BatchStream s1(set, 64, 1), s2(set, 64, 1);
  CHECK(s1.next().indices == s2.next().indices);
}

TEST_CASE("desk_synth is deterministic, balanced and in range") {
  const auto train = make_desk_synth(Split::kTrain);
  CHECK(train.size() == 2048);
  CHECK(train.num_classes == 3);
  CHECK(train.shape == ImageShape{32, 32, 3});
  CHECK_NOTHROW(train.validate());
  CHECK(make_desk_synth(Split::kTrain).pixels == train.pixels);
  std::vector<int> counts(3, 0);
  for (int y : train.labels) ++counts[static_cast<std::size_t>(y)];
  for (int c : counts) CHECK(std::abs(c - 2048 / 3) <= 1);

  const auto test = make_desk_synth(Split::kTest);
  CHECK(test.size() == kDeskSynthTestSize);
  CHECK(test.pixels != std::vector<float>(train.pixels.begin(), train.pixels.begin() + static_cast<std::ptrdiff_t>(test.pixels.size())));
  const auto loaded = load_dataset(DatasetId::kDeskSynth, Split::kTrain, "");
  CHECK(loaded.pixels == train.pixels);
}

TEST_CASE("pixel normalization round trip") {
  for (int v = 0; v < 256; ++v) {
    const float p = normalize_pixel(static_cast<std::uint8_t>(v));
    CHECK(p >= 0.0f);
    CHECK(p <= 1.0f);
    CHECK(denormalize_pixel(p) == v);
    CHECK(std::fabs(normalize_pixel(denormalize_pixel(p)) - p) <= 1e-6);
  }
}

TEST_CASE("CIFAR-10 binary ingestion and errors naming the file") {
  const auto root = temp_dir("cifar");
  const auto dir = root / "cifar-10-batches-bin";
  fs::create_directories(dir);
  for (int b = 1; b <= 5; ++b) write_cifar_batch(dir / ("data_batch_" + std::to_string(b) + ".bin"), 3, b);
  write_cifar_batch(dir / "test_batch.bin", 4, 0);

  const auto train = load_dataset(DatasetId::kCifar10, Split::kTrain, root);
  CHECK(train.size() == 15);
  CHECK(train.num_classes == 10);
  CHECK(train.labels[0] == 1);
  const auto test = load_dataset(DatasetId::kCifar10, Split::kTest, root);
  CHECK(test.size() == 4);
  const auto [lo, hi] = std::minmax_element(test.pixels.begin(), test.pixels.end());
  CHECK(*lo >= 0.0f);
  CHECK(*hi <= 1.0f);
  CHECK(test.pixels[1] == normalize_pixel(1));

  {
    std::ofstream(dir / "test_batch.bin", std::ios::binary) << "short";
  }
  try {
    load_dataset(DatasetId::kCifar10, Split::kTest, root);
    FAIL("expected an ingestion error");
  } catch (const IngestionError& e) {
    CHECK(std::string(e.what()).find("test_batch.bin") != std::string::npos);
  }
  fs::remove(dir / "data_batch_3.bin");
  CHECK_THROWS_AS(load_dataset(DatasetId::kCifar10, Split::kTrain, root), IngestionError);
  fs::remove_all(root);
}

TEST_CASE("missing dataset roots raise ingestion errors") {
  const auto root = temp_dir("missing");
  CHECK_THROWS_AS(load_dataset(DatasetId::kGtsrb, Split::kTrain, root), IngestionError);
  CHECK_THROWS_AS(load_dataset(DatasetId::kTinyImagenet, Split::kTest, root), IngestionError);
  fs::remove_all(root);
}

TEST_CASE("dataset ids and modes parse") {
  CHECK(parse_dataset_id("cifar10") == DatasetId::kCifar10);
  CHECK(parse_dataset_id("desk_synth") == DatasetId::kDeskSynth);
  CHECK_THROWS_AS(parse_dataset_id("celeba"), ConfigError);
  CHECK(parse_target_mode("all2all") == TargetMode::kAllToAll);
  CHECK(to_string(TargetMode::kAllToOne) == "all2one");
}

TEST_CASE("augmentation keeps pixels in range and is seeded") {
  const auto set = ribac::test::random_set(1, 8, 3);
  const std::vector<std::int64_t> idx{0, 1, 2, 3, 4, 5, 6, 7};
  auto a = gather_batch(set, idx), b = gather_batch(set, idx);
  augment_flip_crop(a, 2, 9);
  augment_flip_crop(b, 2, 9);
  CHECK(a.images == b.images);
  for (float v : a.images.values()) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
}
