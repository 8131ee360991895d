#include "ribac/datasets.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "ribac/rng.hpp"

namespace ribac {

namespace fs = std::filesystem;

std::string shape_to_string(const Shape& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

DatasetId parse_dataset_id(const std::string& name) {
  if (name == "cifar10") return DatasetId::kCifar10;
  if (name == "gtsrb") return DatasetId::kGtsrb;
  if (name == "tiny_imagenet") return DatasetId::kTinyImagenet;
  if (name == "desk_synth") return DatasetId::kDeskSynth;
  throw ConfigError("unknown dataset id: " + name);
}

std::string to_string(DatasetId id) {
  switch (id) {
    case DatasetId::kCifar10: return "cifar10";
    case DatasetId::kGtsrb: return "gtsrb";
    case DatasetId::kTinyImagenet: return "tiny_imagenet";
    case DatasetId::kDeskSynth: return "desk_synth";
  }
  return "?";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "test") return Split::kTest;
  throw ConfigError("unknown split: " + name);
}

std::string to_string(Split split) { return split == Split::kTrain ? "train" : "test"; }

TargetMode parse_target_mode(const std::string& name) {
  if (name == "all2one" || name == "all_to_one") return TargetMode::kAllToOne;
  if (name == "all2all" || name == "all_to_all") return TargetMode::kAllToAll;
  throw ConfigError("unknown target mode: " + name);
}

std::string to_string(TargetMode mode) { return mode == TargetMode::kAllToOne ? "all2one" : "all2all"; }

std::uint8_t denormalize_pixel(float v) {
  const float scaled = std::clamp(v, 0.0f, 1.0f) * 255.0f;
  return static_cast<std::uint8_t>(std::lround(scaled));
}

void LabeledImageSet::validate() const {
  if (num_classes < 1) throw IngestionError("dataset has no classes");
  if (static_cast<std::int64_t>(pixels.size()) != size() * shape.numel()) {
    throw IngestionError("pixel buffer holds " + std::to_string(pixels.size()) + " values, expected " +
                         std::to_string(size() * shape.numel()));
  }
  for (float p : pixels) {
    if (!(p >= 0.0f && p <= 1.0f)) throw IngestionError("pixel outside [0,1]");
  }
  for (int y : labels) {
    if (y < 0 || y >= num_classes) throw IngestionError("label " + std::to_string(y) + " out of range");
  }
}

LabeledImageSet LabeledImageSet::subset(std::span<const std::int64_t> indices) const {
  LabeledImageSet out;
  out.shape = shape;
  out.num_classes = num_classes;
  out.split = split;
  out.pixels.reserve(indices.size() * static_cast<std::size_t>(shape.numel()));
  out.labels.reserve(indices.size());
  for (auto i : indices) {
    if (i < 0 || i >= size()) throw std::out_of_range("subset index out of range");
    auto img = image(i);
    out.pixels.insert(out.pixels.end(), img.begin(), img.end());
    out.labels.push_back(labels[static_cast<std::size_t>(i)]);
  }
  return out;
}

LabeledImageSet LabeledImageSet::head(std::int64_t count) const {
  count = std::min(count, size());
  std::vector<std::int64_t> idx(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) idx[static_cast<std::size_t>(i)] = i;
  return subset(idx);
}

namespace {

std::vector<char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open dataset file: " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

// CIFAR-10 binary layout: per record 1 label byte + 3072 channel-planar bytes.
LabeledImageSet load_cifar10(Split split, const fs::path& root) {
  fs::path dir = root / "cifar-10-batches-bin";
  if (!fs::exists(dir)) dir = root;
  std::vector<fs::path> files;
  if (split == Split::kTrain) {
    for (int b = 1; b <= 5; ++b) files.push_back(dir / ("data_batch_" + std::to_string(b) + ".bin"));
  } else {
    files.push_back(dir / "test_batch.bin");
  }
  LabeledImageSet set;
  set.shape = {32, 32, 3};
  set.num_classes = 10;
  set.split = split;
  constexpr std::size_t kRecord = 1 + 3072;
  for (const auto& file : files) {
    const auto bytes = read_file(file);
    if (bytes.empty() || bytes.size() % kRecord != 0) {
      throw IngestionError("corrupt CIFAR-10 batch (size " + std::to_string(bytes.size()) +
                           " not a multiple of 3073): " + file.string());
    }
    for (std::size_t off = 0; off < bytes.size(); off += kRecord) {
      const auto label = static_cast<unsigned char>(bytes[off]);
      if (label >= 10) throw IngestionError("corrupt CIFAR-10 label in " + file.string());
      set.labels.push_back(label);
      for (std::size_t k = 1; k < kRecord; ++k) {
        set.pixels.push_back(normalize_pixel(static_cast<unsigned char>(bytes[off + k])));
      }
    }
  }
  return set;
}

// Decode, resize with bilinear resampling and append one image.
void append_image(LabeledImageSet& set, const fs::path& file, int label) {
  cv::Mat img = cv::imread(file.string(), cv::IMREAD_COLOR);
  if (img.empty()) throw IngestionError("cannot decode image: " + file.string());
  const int h = static_cast<int>(set.shape.height);
  const int w = static_cast<int>(set.shape.width);
  if (img.rows != h || img.cols != w) {
    cv::Mat resized;
    cv::resize(img, resized, cv::Size(w, h), 0, 0, cv::INTER_LINEAR);
    img = resized;
  }
  // OpenCV decodes to BGR interleaved; store RGB planar.
  const std::size_t base = set.pixels.size();
  set.pixels.resize(base + static_cast<std::size_t>(set.shape.numel()));
  for (int y = 0; y < h; ++y) {
    const auto* row = img.ptr<cv::Vec3b>(y);
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        set.pixels[base + static_cast<std::size_t>((c * h + y) * w + x)] = normalize_pixel(row[x][2 - c]);
      }
    }
  }
  set.labels.push_back(label);
}

std::vector<std::string> split_fields(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, sep)) out.push_back(field);
  return out;
}

// GTSRB: Final_Training/Images/<class>/GT-<class>.csv and
// Final_Test/Images/*.ppm with GT-final_test.csv (semicolon separated).
LabeledImageSet load_gtsrb(Split split, const fs::path& root) {
  fs::path base = root / "GTSRB";
  if (!fs::exists(base)) base = root;
  LabeledImageSet set;
  set.shape = {32, 32, 3};
  set.num_classes = 43;
  set.split = split;
  auto read_csv = [&](const fs::path& csv, const fs::path& image_dir) {
    std::ifstream in(csv);
    if (!in) throw IngestionError("cannot open dataset file: " + csv.string());
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      const auto fields = split_fields(line, ';');
      if (fields.size() < 8) throw IngestionError("malformed row in " + csv.string());
      append_image(set, image_dir / fields[0], std::stoi(fields[7]));
    }
  };
  if (split == Split::kTrain) {
    const fs::path images = base / "Final_Training" / "Images";
    for (int c = 0; c < set.num_classes; ++c) {
      char name[16];
      std::snprintf(name, sizeof(name), "%05d", c);
      const fs::path dir = images / name;
      read_csv(dir / ("GT-" + std::string(name) + ".csv"), dir);
    }
  } else {
    const fs::path images = base / "Final_Test" / "Images";
    read_csv(images / "GT-final_test.csv", images);
  }
  return set;
}

// Tiny ImageNet: wnids.txt, train/<wnid>/images/*.JPEG, val annotations as test.
LabeledImageSet load_tiny_imagenet(Split split, const fs::path& root) {
  fs::path base = root / "tiny-imagenet-200";
  if (!fs::exists(base)) base = root;
  const fs::path wnids_file = base / "wnids.txt";
  std::ifstream wn(wnids_file);
  if (!wn) throw IngestionError("cannot open dataset file: " + wnids_file.string());
  std::vector<std::string> wnids;
  for (std::string line; std::getline(wn, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) wnids.push_back(line);
  }
  std::sort(wnids.begin(), wnids.end());
  std::map<std::string, int> class_of;
  for (std::size_t i = 0; i < wnids.size(); ++i) class_of[wnids[i]] = static_cast<int>(i);

  LabeledImageSet set;
  set.shape = {64, 64, 3};
  set.num_classes = static_cast<int>(wnids.size());
  set.split = split;
  if (split == Split::kTrain) {
    for (const auto& id : wnids) {
      const fs::path dir = base / "train" / id / "images";
      if (!fs::exists(dir)) throw IngestionError("missing dataset directory: " + dir.string());
      std::vector<fs::path> files;
      for (const auto& e : fs::directory_iterator(dir)) files.push_back(e.path());
      std::sort(files.begin(), files.end());
      for (const auto& f : files) append_image(set, f, class_of[id]);
    }
  } else {
    const fs::path ann = base / "val" / "val_annotations.txt";
    std::ifstream in(ann);
    if (!in) throw IngestionError("cannot open dataset file: " + ann.string());
    std::vector<std::pair<std::string, int>> rows;
    for (std::string line; std::getline(in, line);) {
      const auto fields = split_fields(line, '\t');
      if (fields.size() < 2) continue;
      auto it = class_of.find(fields[1]);
      if (it == class_of.end()) throw IngestionError("unknown wnid in " + ann.string() + ": " + fields[1]);
      rows.emplace_back(fields[0], it->second);
    }
    std::sort(rows.begin(), rows.end());
    for (const auto& [file, label] : rows) append_image(set, base / "val" / "images" / file, label);
  }
  return set;
}

}  // namespace

LabeledImageSet make_desk_synth(Split split) {
  constexpr int kSize = 32;
  constexpr int kClasses = 3;
  // Class colour directions, offsets from mid-grey.
  constexpr std::array<std::array<float, 3>, kClasses> kColour = {{
      {0.55f, 0.05f, -0.35f},
      {-0.35f, 0.55f, 0.05f},
      {0.05f, -0.35f, 0.55f},
  }};
  const std::int64_t count = split == Split::kTrain ? kDeskSynthTrainSize : kDeskSynthTestSize;
  Rng rng(split == Split::kTrain ? 0x5eed0001ULL : 0x5eed0002ULL);

  LabeledImageSet set;
  set.shape = {kSize, kSize, 3};
  set.num_classes = kClasses;
  set.split = split;
  set.pixels.resize(static_cast<std::size_t>(count * set.shape.numel()));
  set.labels.resize(static_cast<std::size_t>(count));

  std::vector<float> canvas(static_cast<std::size_t>(set.shape.numel()));
  for (std::int64_t n = 0; n < count; ++n) {
    const int label = static_cast<int>(n % kClasses);
    set.labels[static_cast<std::size_t>(n)] = label;

    // Low-frequency texture per channel plus pixel noise.
    for (int c = 0; c < 3; ++c) {
      const double fx = rng.uniform(0.1, 0.6), fy = rng.uniform(0.1, 0.6);
      const double phase = rng.uniform(0.0, 6.283185307179586);
      const double amp = rng.uniform(0.02, 0.10);
      for (int y = 0; y < kSize; ++y) {
        for (int x = 0; x < kSize; ++x) {
          canvas[static_cast<std::size_t>((c * kSize + y) * kSize + x)] =
              static_cast<float>(0.5 + amp * std::sin(fx * x + fy * y + phase) + rng.normal(0.0, 0.06));
        }
      }
    }

    auto stamp = [&](int cls, double amplitude) {
      const double cx = rng.uniform(7.0, 25.0), cy = rng.uniform(7.0, 25.0);
      const double sigma = rng.uniform(2.5, 5.0);
      for (int y = 0; y < kSize; ++y) {
        for (int x = 0; x < kSize; ++x) {
          const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
          const double g = amplitude * std::exp(-d2 / (2.0 * sigma * sigma));
          for (int c = 0; c < 3; ++c) {
            canvas[static_cast<std::size_t>((c * kSize + y) * kSize + x)] += static_cast<float>(g * kColour[cls][c]);
          }
        }
      }
    };
    const double main_amp = rng.uniform(0.45, 0.9);
    stamp(label, main_amp);
    if (rng.uniform() < 0.5) {
      const int other = static_cast<int>((label + 1 + rng.below(kClasses - 1)) % kClasses);
      stamp(other, main_amp * rng.uniform(0.2, 0.75));
    }

    auto out = set.image(n);
    for (std::size_t i = 0; i < canvas.size(); ++i) out[i] = normalize_pixel(denormalize_pixel(canvas[i]));
  }
  return set;
}

LabeledImageSet load_dataset(DatasetId name, Split split, const fs::path& root) {
  LabeledImageSet set;
  switch (name) {
    case DatasetId::kDeskSynth: set = make_desk_synth(split); break;
    case DatasetId::kCifar10: set = load_cifar10(split, root); break;
    case DatasetId::kGtsrb: set = load_gtsrb(split, root); break;
    case DatasetId::kTinyImagenet: set = load_tiny_imagenet(split, root); break;
  }
  if (set.size() == 0) throw IngestionError("dataset " + to_string(name) + " is empty under " + root.string());
  set.validate();
  return set;
}

TargetAssignment make_targets(std::span<const int> labels, TargetMode mode, int num_classes) {
  if (num_classes < 2) throw ConfigError("target generation needs at least 2 classes, got " + std::to_string(num_classes));
  TargetAssignment out;
  out.mode = mode;
  out.targets.reserve(labels.size());
  for (int y : labels) {
    if (y < 0 || y >= num_classes) throw ConfigError("label " + std::to_string(y) + " outside [0, c)");
    out.targets.push_back(target_for(y, mode, num_classes));
  }
  return out;
}

Batch gather_batch(const LabeledImageSet& set, std::span<const std::int64_t> indices) {
  const auto& s = set.shape;
  Batch batch;
  batch.images = TensorT<float>({static_cast<std::int64_t>(indices.size()), s.channels, s.height, s.width});
  batch.labels.reserve(indices.size());
  batch.indices.assign(indices.begin(), indices.end());
  float* dst = batch.images.data();
  for (auto i : indices) {
    auto img = set.image(i);
    dst = std::copy(img.begin(), img.end(), dst);
    batch.labels.push_back(set.labels[static_cast<std::size_t>(i)]);
  }
  return batch;
}

std::vector<std::vector<std::int64_t>> epoch_batches(std::int64_t dataset_size, std::int64_t batch_size,
                                                     std::uint64_t seed, std::int64_t epoch) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (dataset_size < 1) throw ConfigError("cannot iterate an empty dataset");
  Rng rng(splitmix64(seed) ^ splitmix64(static_cast<std::uint64_t>(epoch) + 0x1234567ULL));
  const auto order = rng.permutation(dataset_size);
  std::vector<std::vector<std::int64_t>> out;
  for (std::int64_t start = 0; start < dataset_size; start += batch_size) {
    const auto stop = std::min(dataset_size, start + batch_size);
    out.emplace_back(order.begin() + start, order.begin() + stop);
  }
  return out;
}

BatchStream::BatchStream(const LabeledImageSet& set, std::int64_t batch_size, std::uint64_t seed, std::int64_t epoch)
    : set_(&set), plan_(epoch_batches(set.size(), batch_size, seed, epoch)) {}

Batch BatchStream::next() {
  if (done()) throw std::out_of_range("batch stream exhausted");
  return gather_batch(*set_, plan_[cursor_++]);
}

void augment_flip_crop(Batch& batch, std::int64_t padding, std::uint64_t seed) {
  Rng rng(seed);
  const auto n = batch.images.dim(0), c = batch.images.dim(1), h = batch.images.dim(2), w = batch.images.dim(3);
  std::vector<float> src(static_cast<std::size_t>(c * h * w));
  for (std::int64_t i = 0; i < n; ++i) {
    float* img = batch.images.data() + i * c * h * w;
    std::copy(img, img + c * h * w, src.begin());
    const bool flip = rng.uniform() < 0.5;
    const auto dy = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(2 * padding + 1))) - padding;
    const auto dx = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(2 * padding + 1))) - padding;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
          const auto sy = y + dy;
          auto sx = x + dx;
          if (flip) sx = w - 1 - sx;
          float v = 0.0f;
          if (sy >= 0 && sy < h && sx >= 0 && sx < w) v = src[static_cast<std::size_t>((ch * h + sy) * w + sx)];
          img[(ch * h + y) * w + x] = v;
        }
      }
    }
  }
}

}  // namespace ribac
