#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ribac/checkpoint.hpp"
#include "ribac/datasets.hpp"
#include "ribac/defenses.hpp"
#include "ribac/engine.hpp"
#include "ribac/evaluation.hpp"
#include "ribac/model.hpp"

namespace ribac {

struct ExperimentConfig {
  std::string command = "train";
  Arch arch = Arch::kDeskCnn;
  DatasetId dataset = DatasetId::kDeskSynth;
  std::filesystem::path data_root;
  std::filesystem::path out = "runs/default";
  std::filesystem::path pretrained;  // clean checkpoint; pretrained on the fly when empty
  std::filesystem::path ckpt;        // input checkpoint for defend/verify/export-triggers
  Method method = Method::kRibac;
  RibacConfig ribac;
  PretrainConfig pretrain;
  std::int64_t train_limit = 0;  // 0 keeps the whole split
  std::int64_t test_limit = 0;

  std::string defense = "finepruning";
  double fp_step = 0.05;
  std::int64_t strip_probes = 200;
  StripConfig strip;
  NeuralCleanseConfig neural_cleanse;
  int gradcam_images = 4;
  double amplify = 10.0;
  int parallel = 1;

  // Global seed; fans out to ribac, pretrain, and defense substreams.
  std::uint64_t seed = 0;

  void validate() const;
  double compression_ratio() const { return 1.0 / ribac.keep_fraction; }
};

nlohmann::json to_json(const ExperimentConfig& cfg);

// Applies `j` on top of `base`. Unknown keys and conflicting keys
// (cr vs keep_fraction) raise ConfigError naming the key.
ExperimentConfig apply_config(ExperimentConfig base, const nlohmann::json& j);

// Defaults <- file (if any) <- overrides; then validation.
ExperimentConfig parse_config(const nlohmann::json& overrides, const std::optional<std::filesystem::path>& file);

nlohmann::json read_json_file(const std::filesystem::path& path);

// data_root from the config, else $RIBAC_DATA_ROOT.
std::filesystem::path resolve_data_root(const ExperimentConfig& cfg);

struct DataSplits {
  LabeledImageSet train;
  LabeledImageSet test;
};

DataSplits load_splits(const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------
// Commands

struct TrainOutcome {
  ResultRecord record;
  std::vector<EpochRecord> history;
  std::filesystem::path checkpoint;
};

// Pretrains a clean model and writes out/pretrained.ckpt and pretrain.json.
Checkpoint run_pretrain(const ExperimentConfig& cfg, const DataSplits* data = nullptr);

// `train` (RIBAC) and `baseline` (any other method): writes result.json,
// model.ckpt and history.csv into cfg.out.
TrainOutcome run_train(const ExperimentConfig& cfg, const DataSplits* data = nullptr);

// Writes <defense>.json plus figures into cfg.out; returns the report.
nlohmann::json run_defend(const ExperimentConfig& cfg, const DataSplits* data = nullptr);

struct VerifyOutcome {
  bool ok = false;
  ResultRecord stored;
  ResultRecord recomputed;
  std::vector<std::string> mismatches;
};

// Recomputes clean accuracy, ASR and C.R. from a checkpoint and compares
// them exactly with the stored result.json. Clean pretrained checkpoints are
// checked against pretrain.json instead. An empty `result` picks the file
// next to the checkpoint.
VerifyOutcome run_verify(const std::filesystem::path& ckpt, const std::filesystem::path& result,
                         const std::optional<std::filesystem::path>& data_root = std::nullopt);

// One PNG per trigger: clip01(0.5 + amplify * τ).
std::vector<std::filesystem::path> export_triggers(const std::filesystem::path& ckpt,
                                                   const std::filesystem::path& out_dir, double amplify, int scale = 1);

// ---------------------------------------------------------------------------
// Suites

struct SuiteSpec {
  ExperimentConfig base;
  std::vector<double> ratios{2, 4, 8, 16, 32};
  std::vector<Method> methods{Method::kRibac, Method::kPThenBRandom, Method::kBThenP};
  std::vector<std::uint64_t> seeds{0};
  std::vector<TargetMode> modes{TargetMode::kAllToOne};
};

SuiteSpec suite_from_json(const nlohmann::json& j, const ExperimentConfig& base);

struct CellOutcome {
  ExperimentConfig config;
  std::optional<ResultRecord> record;
  std::string error;
};

std::vector<ExperimentConfig> expand_suite(const SuiteSpec& suite);

// Runs every cell (up to `parallel` at a time); a failing cell is recorded
// and the suite continues. Writes results.csv and table.txt into base.out.
std::vector<CellOutcome> run_suite(const SuiteSpec& suite, int parallel,
                                   const std::function<void(const CellOutcome&)>& on_cell = {});

// Collects every result.json below `dir`.
std::vector<ResultRecord> collect_results(const std::filesystem::path& dir);

}  // namespace ribac
