#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "ribac/datasets.hpp"
#include "ribac/mask.hpp"
#include "ribac/model.hpp"
#include "ribac/triggers.hpp"

namespace ribac {

inline constexpr std::int64_t kEvalBatch = 256;

// Fraction of samples whose argmax prediction equals the label.
double clean_accuracy(const Network<float>& net, const ModelWeights& weights, const PruneMask* mask,
                      const LabeledImageSet& test);

// Fraction of trigger-stamped samples classified as their attack target.
// By default every sample counts, including those already of the target class.
double attack_success_rate(const Network<float>& net, const ModelWeights& weights, const PruneMask* mask,
                           const LabeledImageSet& test, const TriggerBank& bank, bool exclude_target = false);

// Predictions for a whole set, optionally trigger-stamped.
std::vector<int> predict(const Network<float>& net, const ModelWeights& weights, const PruneMask* mask,
                         const LabeledImageSet& set, const TriggerBank* bank = nullptr,
                         const std::vector<std::uint8_t>* feature_channel_keep = nullptr);

struct ResultRecord {
  std::string method;
  double clean_accuracy = 0.0;
  double attack_success_rate = 0.0;
  double compression_ratio = 1.0;
  std::string mode;
  std::string arch;
  std::string dataset;
  std::uint64_t seed = 0;
  double beta = 0.0;
  double epsilon = 0.0;
  std::string git_rev;
  double wall_time = 0.0;
  nlohmann::json config = nlohmann::json::object();

  void validate() const;
  friend bool operator==(const ResultRecord&, const ResultRecord&) = default;
};

nlohmann::json to_json(const ResultRecord& r);
ResultRecord record_from_json(const nlohmann::json& j);

void write_result_json(const std::filesystem::path& path, const ResultRecord& r);
ResultRecord read_result_json(const std::filesystem::path& path);

std::string records_to_csv(const std::vector<ResultRecord>& records);
std::vector<ResultRecord> records_from_csv(const std::string& text);

// Paper-style table: one block per (arch, dataset), rows by compression
// ratio, one column per method, cells "clean / asr" in percent.
std::string render_table(const std::vector<ResultRecord>& records);

std::string format_cell(double clean, double asr);

std::string git_revision();

}  // namespace ribac
