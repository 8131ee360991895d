#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "ribac/checkpoint.hpp"
#include "ribac/sparsity.hpp"
#include "support.hpp"

using namespace ribac;
namespace fs = std::filesystem;

namespace {

Checkpoint sample() {
  Checkpoint c;
  c.spec = default_spec(Arch::kDeskCnn, DatasetId::kDeskSynth);
  Network<float> net(build_architecture(c.spec));
  c.weights = net.init_weights(9);
  c.weights.provenance = Provenance::kFinetunedBackdoor;
  ribac::Rng rng(9);
  ImportanceScores s;
  for (const auto& name : net.prunable()) s.tensors.add(name, ribac::test::random_tensor(rng, c.weights.params.at(name).shape()));
  c.mask = generate_mask(s, 0.125);
  c.scores = s;
  c.bank = init_triggers(c.spec.input_shape, TargetMode::kAllToAll, 3, kDefaultEpsilon, 9);
  c.seed = 42;
  c.metrics = {{"clean_acc", 0.5}, {"asr", 0.75}};
  c.config = {{"cr", 8.0}};
  return c;
}

}  // namespace

TEST_CASE("checkpoint round trip is exact") {
  const auto path = fs::temp_directory_path() / "ribac_unit.ckpt";
  const auto c = sample();
  save_checkpoint(path, c);
  CHECK_FALSE(fs::exists(path.string() + ".tmp"));
  const auto r = load_checkpoint(path);
  CHECK(r.spec == c.spec);
  CHECK(r.weights == c.weights);
  REQUIRE(r.mask);
  CHECK(*r.mask == *c.mask);
  REQUIRE(r.scores);
  CHECK(r.scores->tensors == c.scores->tensors);
  REQUIRE(r.bank);
  CHECK(r.bank->patterns == c.bank->patterns);
  CHECK(r.bank->mode == TargetMode::kAllToAll);
  CHECK(r.bank->epsilon == c.bank->epsilon);
  CHECK(r.seed == 42);
  CHECK(r.metrics == c.metrics);
  CHECK(r.config == c.config);

  std::ifstream in(path, std::ios::binary);
  std::string magic;
  std::getline(in, magic);
  CHECK(magic == "RIBAC-CKPT-v1");
  fs::remove(path);
}

TEST_CASE("dense checkpoint without mask or triggers") {
  const auto path = fs::temp_directory_path() / "ribac_unit_dense.ckpt";
  auto c = sample();
  c.mask.reset();
  c.scores.reset();
  c.bank.reset();
  c.weights.provenance = Provenance::kPretrainedClean;
  save_checkpoint(path, c);
  const auto r = load_checkpoint(path);
  CHECK_FALSE(r.mask);
  CHECK_FALSE(r.bank);
  CHECK(r.weights.provenance == Provenance::kPretrainedClean);
  fs::remove(path);
}

TEST_CASE("corrupt checkpoints are rejected") {
  const auto path = fs::temp_directory_path() / "ribac_unit_bad.ckpt";
  {
    std::ofstream(path) << "NOT-A-CHECKPOINT\n";
  }
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);

  save_checkpoint(path, sample());
  const auto size = fs::file_size(path);
  fs::resize_file(path, size - 100);
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
  fs::remove(path);
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
}
