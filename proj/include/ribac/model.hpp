#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ribac/datasets.hpp"
#include "ribac/mask.hpp"
#include "ribac/tensor.hpp"

namespace ribac {

enum class Arch { kPreactResnet18, kResnet18, kDeskCnn };

Arch parse_arch(const std::string& name);
std::string to_string(Arch arch);

struct ModelSpec {
  Arch arch = Arch::kDeskCnn;
  int num_classes = 3;
  ImageShape input_shape{32, 32, 3};
  // Per-channel statistics folded into the first layer so that triggers
  // operate on raw [0,1] pixels.
  std::array<float, 3> channel_mean{0.5f, 0.5f, 0.5f};
  std::array<float, 3> channel_std{0.25f, 0.25f, 0.25f};

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

// Default spec for a dataset (input shape, classes, channel statistics).
ModelSpec default_spec(Arch arch, DatasetId dataset);

enum class Provenance { kRandomInit, kPretrainedClean, kFinetunedBackdoor };
std::string to_string(Provenance p);
Provenance parse_provenance(const std::string& name);

template <typename T>
struct ModelWeightsT {
  NamedTensors<T> params;   // conv/linear weights, biases, norm affine terms
  NamedTensors<T> buffers;  // normalization running statistics
  Provenance provenance = Provenance::kRandomInit;

  template <typename U>
  ModelWeightsT<U> cast() const {
    return {params.template cast<U>(), buffers.template cast<U>(), provenance};
  }
  friend bool operator==(const ModelWeightsT&, const ModelWeightsT&) = default;
};

using ModelWeights = ModelWeightsT<float>;

// ---------------------------------------------------------------------------
// Computation graph

enum class OpKind { kInput, kNormalize, kConv2d, kBatchNorm, kRelu, kMaxPool2, kGlobalAvgPool, kLinear, kAdd };

struct GraphNode {
  OpKind op = OpKind::kInput;
  std::vector<int> inputs;
  std::string weight;  // conv/linear weight or norm scale
  std::string bias;    // optional
  std::string running_mean;
  std::string running_var;
  int kernel = 1;
  int stride = 1;
  int padding = 0;
  // Output shape without batch: (C,H,W) for maps, (F) for vectors.
  Shape out_shape;
};

enum class ParamInit { kKaimingNormal, kLinearUniform, kOnes, kZeros };

struct ParamInfo {
  std::string name;
  Shape shape;
  ParamInit init = ParamInit::kZeros;
  std::int64_t fan_in = 1;
  bool prunable = false;
};

struct Architecture {
  ImageShape input;
  int num_classes = 0;
  std::vector<GraphNode> nodes;
  int output_node = -1;
  // Last convolution stage activation: target of Fine-Pruning and GradCAM.
  int feature_node = -1;
  std::vector<ParamInfo> params;
  std::vector<ParamInfo> buffers;
  std::array<float, 3> channel_mean{0.f, 0.f, 0.f};
  std::array<float, 3> channel_std{1.f, 1.f, 1.f};

  // Conv and linear weight tensors, in registration order.
  std::vector<std::string> prunable() const;
  std::int64_t parameter_count() const;
};

// Incremental graph construction with shape inference. Node 0 is the input.
class ArchitectureBuilder {
 public:
  ArchitectureBuilder(ImageShape input, int num_classes);

  int input() const { return 0; }
  int normalize(int x, std::array<float, 3> mean, std::array<float, 3> stddev);
  int conv(int x, const std::string& name, std::int64_t out_channels, int kernel, int stride, int padding,
           bool bias = false);
  int batch_norm(int x, const std::string& name);
  int relu(int x);
  int max_pool2(int x);
  int global_avg_pool(int x);
  int linear(int x, const std::string& name, std::int64_t out_features, bool bias = true);
  int add(int a, int b);
  void mark_feature(int x) { arch_.feature_node = x; }
  Architecture finish(int output);

 private:
  int push(GraphNode node);
  Architecture arch_;
};

Architecture build_architecture(const ModelSpec& spec);

// ---------------------------------------------------------------------------
// Execution

enum class NormMode { kInference, kTrain };

template <typename T>
struct ForwardOptions {
  NormMode norm = NormMode::kInference;
  // When set in train mode, running statistics are updated in place.
  NamedTensors<T>* running_stats = nullptr;
  double momentum = 0.1;
  // Per-channel keep flags applied to the feature node output.
  const std::vector<std::uint8_t>* feature_channel_keep = nullptr;
};

template <typename T>
struct Tape {
  struct Slot {
    TensorT<T> value;
    std::vector<T> aux;             // batch-norm normalized input / inverse std
    std::vector<std::int32_t> idx;  // max-pool argmax
  };
  std::vector<Slot> slots;
  NamedTensors<T> effective;  // masked copies of prunable weights
  NormMode norm = NormMode::kInference;
  const std::vector<std::uint8_t>* feature_channel_keep = nullptr;
};

struct BackwardOptions {
  bool params = true;
  bool input = false;
  bool feature = false;
};

template <typename T>
struct Gradients {
  // Gradient with respect to the parameter as used in the forward pass;
  // for prunable weights that is the masked weight W⊙M.
  NamedTensors<T> params;
  TensorT<T> input;
  TensorT<T> feature;
};

template <typename T>
class Network {
 public:
  explicit Network(Architecture arch);

  const Architecture& arch() const { return arch_; }
  std::vector<std::string> prunable() const { return arch_.prunable(); }

  ModelWeightsT<T> init_weights(std::uint64_t seed) const;

  // Logits (N, classes). Prunable weights are multiplied by `mask` when given.
  TensorT<T> forward(const ModelWeightsT<T>& weights, const PruneMask* mask, const TensorT<T>& x,
                     const ForwardOptions<T>& options = {}, Tape<T>* tape = nullptr) const;

  Gradients<T> backward(const ModelWeightsT<T>& weights, const Tape<T>& tape, const TensorT<T>& grad_logits,
                        const BackwardOptions& options = {}) const;

  void check_weights(const ModelWeightsT<T>& weights) const;
  void check_mask(const PruneMask& mask) const;

 private:
  Architecture arch_;
};

extern template class Network<float>;
extern template class Network<double>;

// Deterministic random initialization; provenance = random init.
ModelWeights build_model(const ModelSpec& spec, std::uint64_t seed);

// Predicted class per row of a logits tensor (lowest index wins ties).
template <typename T>
std::vector<int> argmax_rows(const TensorT<T>& logits);

// ---------------------------------------------------------------------------
// Clean pretraining

struct PretrainConfig {
  int epochs = 5;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::int64_t batch_size = 64;
  bool augment = false;
  std::uint64_t seed = 0;
};

struct PretrainResult {
  ModelWeights weights;
  double test_accuracy = 0.0;
  std::vector<double> epoch_loss;
};

class TrainingDivergence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// SGD with momentum and a cosine schedule on clean data.
PretrainResult pretrain_clean(const ModelSpec& spec, const LabeledImageSet& train, const LabeledImageSet& test,
                              const PretrainConfig& config);

}  // namespace ribac
