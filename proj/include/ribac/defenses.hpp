#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ribac/datasets.hpp"
#include "ribac/mask.hpp"
#include "ribac/model.hpp"
#include "ribac/triggers.hpp"

namespace ribac {

class DefenseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// The model under inspection. `mask` may be null for dense models.
struct InspectedModel {
  const Network<float>* net = nullptr;
  const ModelWeights* weights = nullptr;
  const PruneMask* mask = nullptr;
};

// ---------------------------------------------------------------------------
// Fine-Pruning

struct FinePruningPoint {
  double pruned_fraction = 0.0;
  std::int64_t channels_pruned = 0;
  double clean_accuracy = 0.0;
  double attack_success_rate = 0.0;
};

// Mean activation per channel of the last convolution stage over `set`.
std::vector<double> mean_feature_activation(const InspectedModel& model, const LabeledImageSet& set);

// Channels of the last convolution stage are ranked by mean activation on
// `ranking_set` (ascending) and zeroed cumulatively every `step` of the
// channel count; metrics are measured on `eval_set` at each point.
std::vector<FinePruningPoint> fine_pruning_curve(const InspectedModel& model, const LabeledImageSet& ranking_set,
                                                 const LabeledImageSet& eval_set, const TriggerBank& bank,
                                                 double step = 0.05);

// ---------------------------------------------------------------------------
// STRIP

struct StripConfig {
  int overlays = 100;
  double blend = 0.5;
  std::uint64_t seed = 0;
};

// Shannon entropy (nats) of a probability row.
double shannon_entropy(std::span<const double> p);

// Mean prediction entropy per probe over random benign overlays. Probes are
// trigger-stamped when `bank` is given.
std::vector<double> strip_entropy(const InspectedModel& model, const LabeledImageSet& probes,
                                  const LabeledImageSet& overlays, const StripConfig& cfg,
                                  const TriggerBank* bank = nullptr);

// ---------------------------------------------------------------------------
// Neural Cleanse

struct NeuralCleanseConfig {
  int epochs = 100;
  std::int64_t samples = 1000;
  std::int64_t batch_size = 128;
  double lr = 0.1;
  double initial_lambda = 0.01;
  double target_accuracy = 0.99;
  // Consecutive epochs above/below the target accuracy before lambda is
  // doubled/halved.
  int patience = 5;
  std::uint64_t seed = 0;
};

struct ReversedTrigger {
  int target = 0;
  double mask_l1 = 0.0;
  double attack_accuracy = 0.0;
  double lambda = 0.0;
  bool reached_target = false;
  bool diverged = false;
  Tensor mask;     // (H,W)
  Tensor pattern;  // (C,H,W)
};

struct NeuralCleanseReport {
  std::vector<ReversedTrigger> classes;
  double anomaly_index = 0.0;
  int suspect_class = -1;  // class with the smallest mask norm
  bool flagged = false;
};

inline constexpr double kAnomalyThreshold = 2.0;
inline constexpr double kMadConsistency = 1.4826;

// |min - median| / (1.4826 * MAD); 0/0 is 0.
double anomaly_index(std::span<const double> l1_norms);

ReversedTrigger reverse_engineer_trigger(const InspectedModel& model, const LabeledImageSet& clean, int target,
                                         const NeuralCleanseConfig& cfg);

NeuralCleanseReport neural_cleanse(const InspectedModel& model, const LabeledImageSet& clean,
                                   const NeuralCleanseConfig& cfg);

// ---------------------------------------------------------------------------
// GradCAM

// Heatmap (H,W) in [0,1] for one image (C,H,W); all zeros if the raw map is
// constant.
Tensor gradcam_heatmap(const InspectedModel& model, const Tensor& image, int class_id);

// ---------------------------------------------------------------------------
// Positive control: a model carrying a visible patch backdoor

struct PatchBackdoorConfig {
  int patch_size = 3;
  int target = 0;
  double poison_rate = 0.1;
  int epochs = 5;
  double lr = 1e-3;
  std::int64_t batch_size = 64;
  std::uint64_t seed = 0;
};

// Stamps a black/white checkerboard patch in the bottom-right corner.
void stamp_patch(Tensor& images, int patch_size);

// Fine-tunes `initial` on data where a fraction of samples carry the patch
// and are relabelled to the target class.
ModelWeights train_patch_backdoor(const Network<float>& net, const ModelWeights& initial,
                                  const LabeledImageSet& train, const PatchBackdoorConfig& cfg);

double patch_attack_success_rate(const InspectedModel& model, const LabeledImageSet& test, const PatchBackdoorConfig& cfg);

// ---------------------------------------------------------------------------
// Reports and figures

nlohmann::json to_json(const std::vector<FinePruningPoint>& curve);
nlohmann::json strip_json(const std::vector<double>& clean, const std::vector<double>& poisoned);
nlohmann::json to_json(const NeuralCleanseReport& report);

void write_fine_pruning_plot(const std::filesystem::path& path, const std::vector<FinePruningPoint>& curve);
void write_strip_histogram(const std::filesystem::path& path, const std::vector<double>& clean,
                           const std::vector<double>& poisoned, int num_classes);
void write_neural_cleanse_plot(const std::filesystem::path& path, const NeuralCleanseReport& report);
// Image and heatmap overlays side by side; images are (C,H,W) in [0,1].
void write_gradcam_panel(const std::filesystem::path& path, const std::vector<Tensor>& images,
                         const std::vector<Tensor>& heatmaps);
// Single (C,H,W) image in [0,1] to PNG, optionally upscaled.
void write_image_png(const std::filesystem::path& path, const Tensor& image, int scale = 1);

}  // namespace ribac
