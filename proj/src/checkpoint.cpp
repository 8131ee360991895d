#include "ribac/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace ribac {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

nlohmann::json spec_to_json(const ModelSpec& spec) {
  return {{"arch", to_string(spec.arch)},
          {"num_classes", spec.num_classes},
          {"input_shape", {spec.input_shape.height, spec.input_shape.width, spec.input_shape.channels}},
          {"channel_mean", spec.channel_mean},
          {"channel_std", spec.channel_std}};
}

ModelSpec spec_from_json(const nlohmann::json& j) {
  ModelSpec spec;
  spec.arch = parse_arch(j.at("arch").get<std::string>());
  spec.num_classes = j.at("num_classes").get<int>();
  const auto shape = j.at("input_shape").get<std::vector<std::int64_t>>();
  if (shape.size() != 3) throw CheckpointError("input_shape must have three entries");
  spec.input_shape = {shape[0], shape[1], shape[2]};
  spec.channel_mean = j.at("channel_mean").get<std::array<float, 3>>();
  spec.channel_std = j.at("channel_std").get<std::array<float, 3>>();
  return spec;
}

namespace {

class PayloadWriter {
 public:
  nlohmann::json add(const std::string& group, const std::string& name, const Tensor& t) {
    const auto offset = bytes_.size();
    const auto n = static_cast<std::size_t>(t.numel()) * sizeof(float);
    bytes_.resize(offset + n);
    std::memcpy(bytes_.data() + offset, t.data(), n);
    return entry(group, name, t.shape(), "f32", offset, n);
  }
  nlohmann::json add_bits(const std::string& group, const std::string& name, const TensorT<std::uint8_t>& t) {
    const auto offset = bytes_.size();
    const auto n = static_cast<std::size_t>((t.numel() + 7) / 8);
    bytes_.resize(offset + n, 0);
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      if (t[i] > 1) throw CheckpointError("mask " + name + " is not binary");
      if (t[i]) bytes_[offset + static_cast<std::size_t>(i / 8)] |= static_cast<char>(1u << (i % 8));
    }
    return entry(group, name, t.shape(), "bits", offset, n);
  }
  const std::string& bytes() const { return bytes_; }

 private:
  static nlohmann::json entry(const std::string& group, const std::string& name, const Shape& shape,
                              const std::string& dtype, std::size_t offset, std::size_t n) {
    return {{"group", group}, {"name", name}, {"shape", shape}, {"dtype", dtype}, {"offset", offset}, {"nbytes", n}};
  }
  std::string bytes_;
};

Tensor read_f32(const std::string& payload, const nlohmann::json& e) {
  const Shape shape = e.at("shape").get<Shape>();
  Tensor t(shape);
  const auto offset = e.at("offset").get<std::size_t>(), n = e.at("nbytes").get<std::size_t>();
  if (e.at("dtype") != "f32" || n != static_cast<std::size_t>(t.numel()) * sizeof(float) || offset + n > payload.size()) {
    throw CheckpointError("corrupt tensor entry " + e.at("name").get<std::string>());
  }
  std::memcpy(t.data(), payload.data() + offset, n);
  return t;
}

TensorT<std::uint8_t> read_bits(const std::string& payload, const nlohmann::json& e) {
  const Shape shape = e.at("shape").get<Shape>();
  TensorT<std::uint8_t> t(shape);
  const auto offset = e.at("offset").get<std::size_t>(), n = e.at("nbytes").get<std::size_t>();
  if (e.at("dtype") != "bits" || n != static_cast<std::size_t>((t.numel() + 7) / 8) || offset + n > payload.size()) {
    throw CheckpointError("corrupt mask entry " + e.at("name").get<std::string>());
  }
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    t[i] = (static_cast<unsigned char>(payload[offset + static_cast<std::size_t>(i / 8)]) >> (i % 8)) & 1u;
  }
  return t;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  PayloadWriter payload;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, t] : ckpt.weights.params) tensors.push_back(payload.add("param", name, t));
  for (const auto& [name, t] : ckpt.weights.buffers) tensors.push_back(payload.add("buffer", name, t));
  nlohmann::json header = {{"format", kCheckpointMagic},
                           {"spec", spec_to_json(ckpt.spec)},
                           {"provenance", to_string(ckpt.weights.provenance)},
                           {"seed", ckpt.seed},
                           {"metrics", ckpt.metrics},
                           {"config", ckpt.config}};
  if (ckpt.mask) {
    for (const auto& [name, m] : ckpt.mask->layers) tensors.push_back(payload.add_bits("mask", name, m));
    header["keep_fraction"] = ckpt.mask->keep_fraction;
  }
  if (ckpt.scores) {
    for (const auto& [name, s] : ckpt.scores->tensors) tensors.push_back(payload.add("scores", name, s));
  }
  if (ckpt.bank) {
    for (const auto& [name, p] : ckpt.bank->patterns) tensors.push_back(payload.add("trigger", name, p));
    header["trigger"] = {{"epsilon", ckpt.bank->epsilon},
                         {"mode", to_string(ckpt.bank->mode)},
                         {"num_classes", ckpt.bank->num_classes},
                         {"shape", {ckpt.bank->shape.height, ckpt.bank->shape.width, ckpt.bank->shape.channels}}};
  }
  header["tensors"] = tensors;

  const std::string text = header.dump();
  const std::uint64_t len = text.size();
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot write " + tmp);
    out << kCheckpointMagic << '\n';
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out << text;
    out.write(payload.bytes().data(), static_cast<std::streamsize>(payload.bytes().size()));
    if (!out) throw CheckpointError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::string magic;
  std::getline(in, magic);
  if (magic != kCheckpointMagic) throw CheckpointError(path.string() + " is not a " + kCheckpointMagic + " file");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len > (std::uint64_t{1} << 32)) throw CheckpointError("corrupt checkpoint header length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  std::ostringstream rest;
  rest << in.rdbuf();
  const std::string payload = rest.str();
  if (!in) throw CheckpointError("truncated checkpoint header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  }
  Checkpoint ckpt;
  ckpt.spec = spec_from_json(header.at("spec"));
  ckpt.weights.provenance = parse_provenance(header.at("provenance").get<std::string>());
  ckpt.seed = header.at("seed").get<std::uint64_t>();
  ckpt.metrics = header.value("metrics", nlohmann::json::object());
  ckpt.config = header.value("config", nlohmann::json::object());
  if (header.contains("keep_fraction")) {
    ckpt.mask = PruneMask{};
    ckpt.mask->keep_fraction = header.at("keep_fraction").get<double>();
  }
  if (header.contains("trigger")) {
    const auto& t = header.at("trigger");
    TriggerBank bank;
    bank.epsilon = t.at("epsilon").get<double>();
    bank.mode = parse_target_mode(t.at("mode").get<std::string>());
    bank.num_classes = t.at("num_classes").get<int>();
    const auto shape = t.at("shape").get<std::vector<std::int64_t>>();
    bank.shape = {shape.at(0), shape.at(1), shape.at(2)};
    ckpt.bank = std::move(bank);
  }
  for (const auto& e : header.at("tensors")) {
    const auto group = e.at("group").get<std::string>();
    const auto name = e.at("name").get<std::string>();
    if (group == "param") {
      ckpt.weights.params.add(name, read_f32(payload, e));
    } else if (group == "buffer") {
      ckpt.weights.buffers.add(name, read_f32(payload, e));
    } else if (group == "mask") {
      if (!ckpt.mask) throw CheckpointError("mask tensors without keep_fraction");
      ckpt.mask->layers.add(name, read_bits(payload, e));
    } else if (group == "scores") {
      if (!ckpt.scores) ckpt.scores = ImportanceScores{};
      ckpt.scores->tensors.add(name, read_f32(payload, e));
    } else if (group == "trigger") {
      if (!ckpt.bank) throw CheckpointError("trigger tensors without trigger metadata");
      ckpt.bank->patterns.add(name, read_f32(payload, e));
    } else {
      throw CheckpointError("unknown tensor group " + group);
    }
  }
  Network<float>(build_architecture(ckpt.spec)).check_weights(ckpt.weights);
  return ckpt;
}

}  // namespace ribac
