#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ribac/datasets.hpp"
#include "ribac/evaluation.hpp"
#include "ribac/mask.hpp"
#include "ribac/model.hpp"
#include "ribac/sparsity.hpp"
#include "ribac/triggers.hpp"

namespace ribac {

struct RibacConfig {
  double beta = 1.0;
  double epsilon = kDefaultEpsilon;
  double keep_fraction = 0.5;
  int epochs_step1 = 30;
  int epochs_step2 = 30;
  double lr_scores = 3e-4;
  double lr_triggers = 3e-4;
  double lr_weights = 3e-4;
  std::int64_t batch_size = 128;
  TargetMode mode = TargetMode::kAllToOne;
  ScoreInit score_init = ScoreInit::kAbs;
  std::uint64_t seed = 0;
  // Evaluate clean accuracy and ASR on the test split after every epoch.
  bool evaluate_epochs = true;
  bool asr_exclude_target = false;

  void validate() const;
  int total_epochs() const { return epochs_step1 + epochs_step2; }
};

// ---------------------------------------------------------------------------
// Unified objective J = CE(f(x), y) + beta * CE(f(clip(x + τ)), t)

template <typename T>
struct LossOptions {
  bool gradients = true;
  bool input_gradients = true;  // needed for trigger updates
  NormMode norm = NormMode::kInference;
  NamedTensors<T>* running_stats = nullptr;
};

template <typename T>
struct LossResult {
  double total = 0.0;
  double clean = 0.0;
  double trojan = 0.0;
  // dJ/dŵ for prunable weights (ŵ = W⊙M) and dJ/dp for other parameters.
  NamedTensors<T> param_grad;
  NamedTensors<T> trigger_grad;
};

// Mean softmax cross-entropy and, optionally, its gradient w.r.t. logits.
template <typename T>
double cross_entropy(const TensorT<T>& logits, std::span<const int> labels, TensorT<T>* grad = nullptr,
                     double scale = 1.0);

template <typename T>
LossResult<T> unified_loss(const Network<T>& net, const ModelWeightsT<T>& weights, const PruneMask* mask,
                           const TensorT<T>& x, std::span<const int> labels, const TriggerBankT<T>& bank,
                           std::span<const int> targets, double beta, const LossOptions<T>& options = {});

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
  std::string stage;
  int epoch = 0;
  double loss = 0.0;
  double clean_loss = 0.0;
  double trojan_loss = 0.0;
  double clean_accuracy = -1.0;
  double attack_success_rate = -1.0;
};

std::string history_to_csv(const std::vector<EpochRecord>& history);

using EpochCallback = std::function<void(const EpochRecord&)>;

struct TrainSets {
  const LabeledImageSet* train = nullptr;
  const LabeledImageSet* test = nullptr;  // optional; used for per-epoch metrics
};

struct Step1Result {
  ImportanceScores scores;
  TriggerBank bank;
  PruneMask mask;
  std::vector<EpochRecord> history;
};

// Learn importance scores and triggers with the pretrained weights frozen.
Step1Result step1_train(const Network<float>& net, const ModelWeights& pretrained, ImportanceScores scores,
                        TriggerBank bank, const TrainSets& data, const RibacConfig& cfg,
                        const EpochCallback& on_epoch = {});

struct Step2Result {
  ModelWeights weights;  // finalized: W⊙M
  TriggerBank bank;
  std::vector<EpochRecord> history;
};

// Fine-tune weights (starting from the pretrained ones) and triggers under a fixed mask.
Step2Result step2_train(const Network<float>& net, const ModelWeights& pretrained, const PruneMask& mask,
                        TriggerBank bank, const TrainSets& data, const RibacConfig& cfg,
                        const EpochCallback& on_epoch = {});

struct BackdooredSparseModel {
  ModelWeights weights;
  PruneMask mask;
  TriggerBank bank;
  ImportanceScores scores;
  RibacConfig config;
  std::vector<EpochRecord> history;
  // Metrics of the frozen-weight model right after Step 1.
  double step1_clean_accuracy = -1.0;
  double step1_attack_success_rate = -1.0;
};

class StageError : public std::runtime_error {
 public:
  StageError(const std::string& stage, const std::string& what)
      : std::runtime_error("stage " + stage + " failed: " + what), stage_(stage) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

// score_init -> step1_train -> step2_train.
BackdooredSparseModel run_ribac(const Network<float>& net, const ModelWeights& pretrained, const TrainSets& data,
                                const RibacConfig& cfg, const EpochCallback& on_epoch = {});

// Operation "B": joint weight + trigger training with a fixed mask (all ones
// when `mask` is null) for `epochs` epochs. Returned weights have the mask
// applied.
Step2Result baseline_backdoor_train(const Network<float>& net, const ModelWeights& initial, const PruneMask* mask,
                                    TriggerBank bank, const TrainSets& data, const RibacConfig& cfg, int epochs,
                                    const std::string& stage = "backdoor", const EpochCallback& on_epoch = {});

// Scores, triggers and weights all updated every batch ("single step").
BackdooredSparseModel single_step_train(const Network<float>& net, const ModelWeights& pretrained,
                                        const TrainSets& data, const RibacConfig& cfg,
                                        const EpochCallback& on_epoch = {});

// ---------------------------------------------------------------------------
// Sequential baselines and pruning-only references

enum class Method {
  kRibac,
  kStep1Only,
  kSingleStep,
  kPThenBRandom,
  kPThenBPretrained,
  kBThenP,
  kL1Prune,
  kScorePrune,
};

std::string to_string(Method m);
Method parse_method(const std::string& name);

struct MethodOutcome {
  Method method = Method::kRibac;
  ModelWeights weights;
  PruneMask mask;
  TriggerBank bank;
  double clean_accuracy = 0.0;
  double attack_success_rate = 0.0;
  double compression_ratio = 1.0;
  std::vector<EpochRecord> history;
};

// P→B: L1-global mask on random-init or pretrained weights, then B on the
// masked model.
MethodOutcome pipeline_p_then_b(const Network<float>& net, const ModelWeights& pretrained, const TrainSets& data,
                                const RibacConfig& cfg, bool from_pretrained);

// B→P: B on the dense pretrained model, then L1-global pruning with no
// retraining. `dense_backdoored` reuses an existing B result.
MethodOutcome pipeline_b_then_p(const Network<float>& net, const ModelWeights& pretrained, const TrainSets& data,
                                const RibacConfig& cfg, const Step2Result* dense_backdoored = nullptr);

// Pruning-only references (beta = 0): L1-global pruning + clean fine-tune,
// and importance-score pruning (score learning then fine-tune).
MethodOutcome pruning_only(const Network<float>& net, const ModelWeights& pretrained, const TrainSets& data,
                           const RibacConfig& cfg, Method which);

// Dispatch on method; ASR is still measured for pruning-only methods.
MethodOutcome run_method(Method method, const Network<float>& net, const ModelWeights& pretrained,
                         const TrainSets& data, const RibacConfig& cfg);

}  // namespace ribac
