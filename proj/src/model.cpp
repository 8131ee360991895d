#include <stdexcept>

#include "ribac/model.hpp"

namespace ribac {

Arch parse_arch(const std::string& name) {
  if (name == "preact_resnet18") return Arch::kPreactResnet18;
  if (name == "resnet18") return Arch::kResnet18;
  if (name == "desk_cnn") return Arch::kDeskCnn;
  throw ConfigError("unknown arch: " + name);
}

std::string to_string(Arch arch) {
  switch (arch) {
    case Arch::kPreactResnet18: return "preact_resnet18";
    case Arch::kResnet18: return "resnet18";
    case Arch::kDeskCnn: return "desk_cnn";
  }
  return "?";
}

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::kRandomInit: return "random_init";
    case Provenance::kPretrainedClean: return "pretrained_clean";
    case Provenance::kFinetunedBackdoor: return "finetuned_backdoor";
  }
  return "?";
}

Provenance parse_provenance(const std::string& name) {
  if (name == "random_init") return Provenance::kRandomInit;
  if (name == "pretrained_clean") return Provenance::kPretrainedClean;
  if (name == "finetuned_backdoor") return Provenance::kFinetunedBackdoor;
  throw std::invalid_argument("unknown provenance: " + name);
}

ModelSpec default_spec(Arch arch, DatasetId dataset) {
  ModelSpec spec;
  spec.arch = arch;
  switch (dataset) {
    case DatasetId::kCifar10:
      spec.num_classes = 10;
      spec.input_shape = {32, 32, 3};
      spec.channel_mean = {0.4914f, 0.4822f, 0.4465f};
      spec.channel_std = {0.2470f, 0.2435f, 0.2616f};
      break;
    case DatasetId::kGtsrb:
      spec.num_classes = 43;
      spec.input_shape = {32, 32, 3};
      spec.channel_mean = {0.3403f, 0.3121f, 0.3214f};
      spec.channel_std = {0.2724f, 0.2608f, 0.2669f};
      break;
    case DatasetId::kTinyImagenet:
      spec.num_classes = 200;
      spec.input_shape = {64, 64, 3};
      spec.channel_mean = {0.4802f, 0.4481f, 0.3975f};
      spec.channel_std = {0.2770f, 0.2691f, 0.2821f};
      break;
    case DatasetId::kDeskSynth:
      spec.num_classes = 3;
      spec.input_shape = {32, 32, 3};
      spec.channel_mean = {0.5f, 0.5f, 0.5f};
      spec.channel_std = {0.12f, 0.12f, 0.12f};
      break;
  }
  return spec;
}

std::vector<std::string> Architecture::prunable() const {
  std::vector<std::string> out;
  for (const auto& p : params) {
    if (p.prunable) out.push_back(p.name);
  }
  return out;
}

std::int64_t Architecture::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : params) n += shape_numel(p.shape);
  return n;
}

ArchitectureBuilder::ArchitectureBuilder(ImageShape input, int num_classes) {
  arch_.input = input;
  arch_.num_classes = num_classes;
  GraphNode in;
  in.op = OpKind::kInput;
  in.out_shape = {input.channels, input.height, input.width};
  arch_.nodes.push_back(in);
}

int ArchitectureBuilder::push(GraphNode node) {
  for (int i : node.inputs) {
    if (i < 0 || i >= static_cast<int>(arch_.nodes.size())) throw std::logic_error("graph input refers to a later node");
  }
  arch_.nodes.push_back(std::move(node));
  return static_cast<int>(arch_.nodes.size()) - 1;
}

int ArchitectureBuilder::normalize(int x, std::array<float, 3> mean, std::array<float, 3> stddev) {
  arch_.channel_mean = mean;
  arch_.channel_std = stddev;
  GraphNode n;
  n.op = OpKind::kNormalize;
  n.inputs = {x};
  n.out_shape = arch_.nodes[static_cast<std::size_t>(x)].out_shape;
  return push(n);
}

int ArchitectureBuilder::conv(int x, const std::string& name, std::int64_t out_channels, int kernel, int stride,
                              int padding, bool bias) {
  const auto& in = arch_.nodes[static_cast<std::size_t>(x)].out_shape;
  if (in.size() != 3) throw std::logic_error("conv expects a feature map input");
  GraphNode n;
  n.op = OpKind::kConv2d;
  n.inputs = {x};
  n.kernel = kernel;
  n.stride = stride;
  n.padding = padding;
  n.weight = name + ".weight";
  const auto fan_in = in[0] * kernel * kernel;
  arch_.params.push_back({n.weight, {out_channels, in[0], kernel, kernel}, ParamInit::kKaimingNormal, fan_in, true});
  if (bias) {
    n.bias = name + ".bias";
    arch_.params.push_back({n.bias, {out_channels}, ParamInit::kLinearUniform, fan_in, false});
  }
  n.out_shape = {out_channels, (in[1] + 2 * padding - kernel) / stride + 1, (in[2] + 2 * padding - kernel) / stride + 1};
  return push(n);
}

int ArchitectureBuilder::batch_norm(int x, const std::string& name) {
  const auto& in = arch_.nodes[static_cast<std::size_t>(x)].out_shape;
  GraphNode n;
  n.op = OpKind::kBatchNorm;
  n.inputs = {x};
  n.weight = name + ".weight";
  n.bias = name + ".bias";
  n.running_mean = name + ".running_mean";
  n.running_var = name + ".running_var";
  arch_.params.push_back({n.weight, {in[0]}, ParamInit::kOnes, 1, false});
  arch_.params.push_back({n.bias, {in[0]}, ParamInit::kZeros, 1, false});
  arch_.buffers.push_back({n.running_mean, {in[0]}, ParamInit::kZeros, 1, false});
  arch_.buffers.push_back({n.running_var, {in[0]}, ParamInit::kOnes, 1, false});
  n.out_shape = in;
  return push(n);
}

int ArchitectureBuilder::relu(int x) {
  GraphNode n;
  n.op = OpKind::kRelu;
  n.inputs = {x};
  n.out_shape = arch_.nodes[static_cast<std::size_t>(x)].out_shape;
  return push(n);
}

int ArchitectureBuilder::max_pool2(int x) {
  const auto& in = arch_.nodes[static_cast<std::size_t>(x)].out_shape;
  GraphNode n;
  n.op = OpKind::kMaxPool2;
  n.inputs = {x};
  n.out_shape = {in[0], in[1] / 2, in[2] / 2};
  return push(n);
}

int ArchitectureBuilder::global_avg_pool(int x) {
  const auto& in = arch_.nodes[static_cast<std::size_t>(x)].out_shape;
  GraphNode n;
  n.op = OpKind::kGlobalAvgPool;
  n.inputs = {x};
  n.out_shape = {in[0]};
  return push(n);
}

int ArchitectureBuilder::linear(int x, const std::string& name, std::int64_t out_features, bool bias) {
  const auto features = shape_numel(arch_.nodes[static_cast<std::size_t>(x)].out_shape);
  GraphNode n;
  n.op = OpKind::kLinear;
  n.inputs = {x};
  n.weight = name + ".weight";
  arch_.params.push_back({n.weight, {out_features, features}, ParamInit::kLinearUniform, features, true});
  if (bias) {
    n.bias = name + ".bias";
    arch_.params.push_back({n.bias, {out_features}, ParamInit::kLinearUniform, features, false});
  }
  n.out_shape = {out_features};
  return push(n);
}

int ArchitectureBuilder::add(int a, int b) {
  if (arch_.nodes[static_cast<std::size_t>(a)].out_shape != arch_.nodes[static_cast<std::size_t>(b)].out_shape) {
    throw std::logic_error("residual add of mismatched shapes");
  }
  GraphNode n;
  n.op = OpKind::kAdd;
  n.inputs = {a, b};
  n.out_shape = arch_.nodes[static_cast<std::size_t>(a)].out_shape;
  return push(n);
}

Architecture ArchitectureBuilder::finish(int output) {
  arch_.output_node = output;
  return arch_;
}

namespace {

// Pre-activation basic block: bn-relu feeds both the residual path and
// (when shapes change) the 1x1 projection shortcut.
int preact_block(ArchitectureBuilder& b, int x, const std::string& name, std::int64_t in_planes, std::int64_t planes,
                 int stride) {
  int out = b.relu(b.batch_norm(x, name + ".bn1"));
  int shortcut = x;
  if (stride != 1 || in_planes != planes) shortcut = b.conv(out, name + ".shortcut.0", planes, 1, stride, 0);
  out = b.conv(out, name + ".conv1", planes, 3, stride, 1);
  out = b.conv(b.relu(b.batch_norm(out, name + ".bn2")), name + ".conv2", planes, 3, 1, 1);
  return b.add(out, shortcut);
}

int basic_block(ArchitectureBuilder& b, int x, const std::string& name, std::int64_t in_planes, std::int64_t planes,
                int stride) {
  int out = b.relu(b.batch_norm(b.conv(x, name + ".conv1", planes, 3, stride, 1), name + ".bn1"));
  out = b.batch_norm(b.conv(out, name + ".conv2", planes, 3, 1, 1), name + ".bn2");
  int shortcut = x;
  if (stride != 1 || in_planes != planes) {
    shortcut = b.batch_norm(b.conv(x, name + ".shortcut.0", planes, 1, stride, 0), name + ".shortcut.1");
  }
  return b.relu(b.add(out, shortcut));
}

Architecture resnet18_family(const ModelSpec& spec, bool preact) {
  ArchitectureBuilder b(spec.input_shape, spec.num_classes);
  int x = b.normalize(b.input(), spec.channel_mean, spec.channel_std);
  x = b.conv(x, "conv1", 64, 3, 1, 1);
  if (!preact) x = b.relu(b.batch_norm(x, "bn1"));
  std::int64_t in_planes = 64;
  const std::int64_t planes[4] = {64, 128, 256, 512};
  for (int layer = 0; layer < 4; ++layer) {
    for (int blk = 0; blk < 2; ++blk) {
      const int stride = (layer > 0 && blk == 0) ? 2 : 1;
      const std::string name = "layer" + std::to_string(layer + 1) + "." + std::to_string(blk);
      x = preact ? preact_block(b, x, name, in_planes, planes[layer], stride)
                 : basic_block(b, x, name, in_planes, planes[layer], stride);
      in_planes = planes[layer];
    }
  }
  b.mark_feature(x);
  x = b.linear(b.global_avg_pool(x), "linear", spec.num_classes);
  return b.finish(x);
}

Architecture desk_cnn(const ModelSpec& spec) {
  ArchitectureBuilder b(spec.input_shape, spec.num_classes);
  int x = b.normalize(b.input(), spec.channel_mean, spec.channel_std);
  x = b.relu(b.batch_norm(b.conv(x, "conv1", 32, 3, 2, 1), "bn1"));
  x = b.relu(b.batch_norm(b.conv(x, "conv2", 32, 3, 2, 1), "bn2"));
  x = b.relu(b.batch_norm(b.conv(x, "conv3", 64, 3, 1, 1), "bn3"));
  x = b.max_pool2(x);
  x = b.relu(b.batch_norm(b.conv(x, "conv4", 128, 3, 1, 1), "bn4"));
  b.mark_feature(x);
  x = b.linear(b.global_avg_pool(x), "linear", spec.num_classes);
  return b.finish(x);
}

}  // namespace

Architecture build_architecture(const ModelSpec& spec) {
  if (spec.num_classes < 1) throw ConfigError("num_classes must be positive");
  if (spec.input_shape.channels != 3) throw ConfigError("only 3-channel inputs are supported");
  switch (spec.arch) {
    case Arch::kPreactResnet18: return resnet18_family(spec, true);
    case Arch::kResnet18: return resnet18_family(spec, false);
    case Arch::kDeskCnn: return desk_cnn(spec);
  }
  throw ConfigError("unknown arch");
}

ModelWeights build_model(const ModelSpec& spec, std::uint64_t seed) {
  return Network<float>(build_architecture(spec)).init_weights(seed);
}

}  // namespace ribac
