#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ribac/tensor.hpp"

namespace ribac {

class IngestionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Split { kTrain, kTest };
enum class DatasetId { kCifar10, kGtsrb, kTinyImagenet, kDeskSynth };
enum class TargetMode { kAllToOne, kAllToAll };

DatasetId parse_dataset_id(const std::string& name);
std::string to_string(DatasetId id);
Split parse_split(const std::string& name);
std::string to_string(Split split);
TargetMode parse_target_mode(const std::string& name);
std::string to_string(TargetMode mode);

struct ImageShape {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::int64_t channels = 0;

  std::int64_t numel() const { return height * width * channels; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

// Images are stored channel-planar (C,H,W) per sample, pixels in [0,1].
struct LabeledImageSet {
  ImageShape shape;
  std::vector<float> pixels;
  std::vector<int> labels;
  int num_classes = 0;
  Split split = Split::kTrain;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  std::span<const float> image(std::int64_t i) const {
    return {pixels.data() + i * shape.numel(), static_cast<std::size_t>(shape.numel())};
  }
  std::span<float> image(std::int64_t i) {
    return {pixels.data() + i * shape.numel(), static_cast<std::size_t>(shape.numel())};
  }

  // Throws IngestionError when a documented invariant is broken.
  void validate() const;

  LabeledImageSet subset(std::span<const std::int64_t> indices) const;
  LabeledImageSet head(std::int64_t count) const;
};

struct TargetAssignment {
  TargetMode mode = TargetMode::kAllToOne;
  std::vector<int> targets;
};

LabeledImageSet load_dataset(DatasetId name, Split split, const std::filesystem::path& root);

// Three-class synthetic task of coloured Gaussian blobs over textured noise.
LabeledImageSet make_desk_synth(Split split);

inline constexpr std::int64_t kDeskSynthTrainSize = 2048;
inline constexpr std::int64_t kDeskSynthTestSize = 2048;

inline float normalize_pixel(std::uint8_t v) { return static_cast<float>(v) / 255.0f; }
std::uint8_t denormalize_pixel(float v);

TargetAssignment make_targets(std::span<const int> labels, TargetMode mode, int num_classes);

// Target for a single label; shared by training and ASR evaluation.
inline int target_for(int label, TargetMode mode, int num_classes) {
  return mode == TargetMode::kAllToOne ? 0 : (label + 1) % num_classes;
}

struct Batch {
  TensorT<float> images;  // (N,C,H,W)
  std::vector<int> labels;
  std::vector<std::int64_t> indices;
};

Batch gather_batch(const LabeledImageSet& set, std::span<const std::int64_t> indices);

// Sample order for one epoch: a permutation that is a pure function of
// (seed, epoch), cut into batches of `batch_size` (last one may be short).
std::vector<std::vector<std::int64_t>> epoch_batches(std::int64_t dataset_size, std::int64_t batch_size,
                                                     std::uint64_t seed, std::int64_t epoch);

class BatchStream {
 public:
  BatchStream(const LabeledImageSet& set, std::int64_t batch_size, std::uint64_t seed, std::int64_t epoch = 0);

  bool done() const { return cursor_ >= plan_.size(); }
  Batch next();
  std::size_t num_batches() const { return plan_.size(); }

 private:
  const LabeledImageSet* set_;
  std::vector<std::vector<std::int64_t>> plan_;
  std::size_t cursor_ = 0;
};

// Random horizontal flip plus zero-padded random crop, in place.
void augment_flip_crop(Batch& batch, std::int64_t padding, std::uint64_t seed);

}  // namespace ribac
