#include "ribac/experiment.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <thread>

#include "ribac/rng.hpp"
#include "ribac/sparsity.hpp"

namespace ribac {

namespace fs = std::filesystem;

void ExperimentConfig::validate() const {
  static const std::set<std::string> commands{"pretrain", "train", "baseline", "defend", "report", "verify",
                                              "export-triggers"};
  if (!commands.count(command)) throw ConfigError("unknown command: " + command);
  ribac.validate();
  if (ribac.epochs_step1 < 1 || ribac.epochs_step2 < 1) throw ConfigError("epochs_step1 and epochs_step2 must be >= 1");
  if (pretrain.epochs < 1 || !(pretrain.lr > 0) || pretrain.batch_size < 1) throw ConfigError("invalid pretrain settings");
  if (train_limit < 0 || test_limit < 0) throw ConfigError("subset limits must be >= 0");
  static const std::set<std::string> defenses{"finepruning", "strip", "neuralcleanse", "gradcam"};
  if (!defenses.count(defense)) throw ConfigError("unknown defense: " + defense);
  if (!(fp_step > 0 && fp_step <= 1)) throw ConfigError("fp_step must lie in (0,1]");
  if (strip_probes < 1 || strip.overlays < 1) throw ConfigError("STRIP needs probes and overlays");
  if (neural_cleanse.epochs < 1 || neural_cleanse.samples < 1) throw ConfigError("invalid Neural Cleanse settings");
  if (gradcam_images < 1) throw ConfigError("gradcam_images must be >= 1");
  if (parallel < 1) throw ConfigError("parallel must be >= 1");
  if (command == "baseline" && method == Method::kRibac) throw ConfigError("baseline needs a non-RIBAC method");
}

nlohmann::json to_json(const ExperimentConfig& c) {
  return {
      {"command", c.command},
      {"arch", to_string(c.arch)},
      {"dataset", to_string(c.dataset)},
      {"data_root", c.data_root.string()},
      {"out", c.out.string()},
      {"pretrained", c.pretrained.string()},
      {"ckpt", c.ckpt.string()},
      {"method", to_string(c.method)},
      {"seed", c.seed},
      {"beta", c.ribac.beta},
      {"epsilon", c.ribac.epsilon},
      {"keep_fraction", c.ribac.keep_fraction},
      {"cr", c.compression_ratio()},
      {"epochs_step1", c.ribac.epochs_step1},
      {"epochs_step2", c.ribac.epochs_step2},
      {"lr_scores", c.ribac.lr_scores},
      {"lr_triggers", c.ribac.lr_triggers},
      {"lr_weights", c.ribac.lr_weights},
      {"batch_size", c.ribac.batch_size},
      {"mode", to_string(c.ribac.mode)},
      {"score_init", to_string(c.ribac.score_init)},
      {"asr_exclude_target", c.ribac.asr_exclude_target},
      {"evaluate_epochs", c.ribac.evaluate_epochs},
      {"train_limit", c.train_limit},
      {"test_limit", c.test_limit},
      {"pretrain_epochs", c.pretrain.epochs},
      {"pretrain_lr", c.pretrain.lr},
      {"pretrain_momentum", c.pretrain.momentum},
      {"pretrain_weight_decay", c.pretrain.weight_decay},
      {"pretrain_batch_size", c.pretrain.batch_size},
      {"augment", c.pretrain.augment},
      {"defense", c.defense},
      {"fp_step", c.fp_step},
      {"strip_probes", c.strip_probes},
      {"strip_overlays", c.strip.overlays},
      {"nc_epochs", c.neural_cleanse.epochs},
      {"nc_samples", c.neural_cleanse.samples},
      {"nc_lambda", c.neural_cleanse.initial_lambda},
      {"nc_lr", c.neural_cleanse.lr},
      {"nc_patience", c.neural_cleanse.patience},
      {"gradcam_images", c.gradcam_images},
      {"amplify", c.amplify},
      {"parallel", c.parallel},
  };
}

namespace {

template <typename T>
T get_as(const nlohmann::json& v, const std::string& key) {
  try {
    return v.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("invalid value for key '" + key + "': " + v.dump());
  }
}

// Seeds of the sub-configs follow the global seed.
void fan_out_seed(ExperimentConfig& c) {
  c.ribac.seed = c.seed;
  c.pretrain.seed = substream_seed(c.seed, "pretrain");
  c.strip.seed = substream_seed(c.seed, "defense/strip");
  c.neural_cleanse.seed = substream_seed(c.seed, "defense/neural_cleanse");
}

}  // namespace

ExperimentConfig apply_config(ExperimentConfig c, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("configuration must be a JSON object");
  if (j.contains("cr") && j.contains("keep_fraction")) {
    const double cr = get_as<double>(j.at("cr"), "cr");
    const double k = get_as<double>(j.at("keep_fraction"), "keep_fraction");
    if (!(cr > 0) || std::fabs(1.0 / cr - k) > 1e-12) {
      throw ConfigError("conflicting keys 'cr' and 'keep_fraction'");
    }
  }
  using Setter = std::function<void(ExperimentConfig&, const nlohmann::json&, const std::string&)>;
  static const std::map<std::string, Setter> setters = {
      {"command", [](auto& c, auto& v, auto& k) { c.command = get_as<std::string>(v, k); }},
      {"arch", [](auto& c, auto& v, auto& k) { c.arch = parse_arch(get_as<std::string>(v, k)); }},
      {"dataset", [](auto& c, auto& v, auto& k) { c.dataset = parse_dataset_id(get_as<std::string>(v, k)); }},
      {"data_root", [](auto& c, auto& v, auto& k) { c.data_root = get_as<std::string>(v, k); }},
      {"out", [](auto& c, auto& v, auto& k) { c.out = get_as<std::string>(v, k); }},
      {"pretrained", [](auto& c, auto& v, auto& k) { c.pretrained = get_as<std::string>(v, k); }},
      {"ckpt", [](auto& c, auto& v, auto& k) { c.ckpt = get_as<std::string>(v, k); }},
      {"method", [](auto& c, auto& v, auto& k) { c.method = parse_method(get_as<std::string>(v, k)); }},
      {"seed", [](auto& c, auto& v, auto& k) { c.seed = get_as<std::uint64_t>(v, k); }},
      {"beta", [](auto& c, auto& v, auto& k) { c.ribac.beta = get_as<double>(v, k); }},
      {"epsilon", [](auto& c, auto& v, auto& k) { c.ribac.epsilon = get_as<double>(v, k); }},
      {"keep_fraction", [](auto& c, auto& v, auto& k) { c.ribac.keep_fraction = get_as<double>(v, k); }},
      {"cr",
       [](auto& c, auto& v, auto& k) {
         const double cr = get_as<double>(v, k);
         if (!(cr >= 1.0)) throw ConfigError("cr must be >= 1");
         c.ribac.keep_fraction = 1.0 / cr;
       }},
      {"epochs_step1", [](auto& c, auto& v, auto& k) { c.ribac.epochs_step1 = get_as<int>(v, k); }},
      {"epochs_step2", [](auto& c, auto& v, auto& k) { c.ribac.epochs_step2 = get_as<int>(v, k); }},
      {"lr_scores", [](auto& c, auto& v, auto& k) { c.ribac.lr_scores = get_as<double>(v, k); }},
      {"lr_triggers", [](auto& c, auto& v, auto& k) { c.ribac.lr_triggers = get_as<double>(v, k); }},
      {"lr_weights", [](auto& c, auto& v, auto& k) { c.ribac.lr_weights = get_as<double>(v, k); }},
      {"batch_size", [](auto& c, auto& v, auto& k) { c.ribac.batch_size = get_as<std::int64_t>(v, k); }},
      {"mode", [](auto& c, auto& v, auto& k) { c.ribac.mode = parse_target_mode(get_as<std::string>(v, k)); }},
      {"score_init", [](auto& c, auto& v, auto& k) { c.ribac.score_init = parse_score_init(get_as<std::string>(v, k)); }},
      {"asr_exclude_target", [](auto& c, auto& v, auto& k) { c.ribac.asr_exclude_target = get_as<bool>(v, k); }},
      {"evaluate_epochs", [](auto& c, auto& v, auto& k) { c.ribac.evaluate_epochs = get_as<bool>(v, k); }},
      {"train_limit", [](auto& c, auto& v, auto& k) { c.train_limit = get_as<std::int64_t>(v, k); }},
      {"test_limit", [](auto& c, auto& v, auto& k) { c.test_limit = get_as<std::int64_t>(v, k); }},
      {"pretrain_epochs", [](auto& c, auto& v, auto& k) { c.pretrain.epochs = get_as<int>(v, k); }},
      {"pretrain_lr", [](auto& c, auto& v, auto& k) { c.pretrain.lr = get_as<double>(v, k); }},
      {"pretrain_momentum", [](auto& c, auto& v, auto& k) { c.pretrain.momentum = get_as<double>(v, k); }},
      {"pretrain_weight_decay", [](auto& c, auto& v, auto& k) { c.pretrain.weight_decay = get_as<double>(v, k); }},
      {"pretrain_batch_size", [](auto& c, auto& v, auto& k) { c.pretrain.batch_size = get_as<std::int64_t>(v, k); }},
      {"augment", [](auto& c, auto& v, auto& k) { c.pretrain.augment = get_as<bool>(v, k); }},
      {"defense", [](auto& c, auto& v, auto& k) { c.defense = get_as<std::string>(v, k); }},
      {"fp_step", [](auto& c, auto& v, auto& k) { c.fp_step = get_as<double>(v, k); }},
      {"strip_probes", [](auto& c, auto& v, auto& k) { c.strip_probes = get_as<std::int64_t>(v, k); }},
      {"strip_overlays", [](auto& c, auto& v, auto& k) { c.strip.overlays = get_as<int>(v, k); }},
      {"nc_epochs", [](auto& c, auto& v, auto& k) { c.neural_cleanse.epochs = get_as<int>(v, k); }},
      {"nc_samples", [](auto& c, auto& v, auto& k) { c.neural_cleanse.samples = get_as<std::int64_t>(v, k); }},
      {"nc_lambda", [](auto& c, auto& v, auto& k) { c.neural_cleanse.initial_lambda = get_as<double>(v, k); }},
      {"nc_lr", [](auto& c, auto& v, auto& k) { c.neural_cleanse.lr = get_as<double>(v, k); }},
      {"nc_patience", [](auto& c, auto& v, auto& k) { c.neural_cleanse.patience = get_as<int>(v, k); }},
      {"gradcam_images", [](auto& c, auto& v, auto& k) { c.gradcam_images = get_as<int>(v, k); }},
      {"amplify", [](auto& c, auto& v, auto& k) { c.amplify = get_as<double>(v, k); }},
      {"parallel", [](auto& c, auto& v, auto& k) { c.parallel = get_as<int>(v, k); }},
  };
  for (const auto& [key, value] : j.items()) {
    auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("unknown configuration key '" + key + "'");
    it->second(c, value, key);
  }
  fan_out_seed(c);
  return c;
}

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

ExperimentConfig parse_config(const nlohmann::json& overrides, const std::optional<fs::path>& file) {
  ExperimentConfig c;
  fan_out_seed(c);
  if (file) c = apply_config(c, read_json_file(*file));
  c = apply_config(c, overrides);
  c.validate();
  return c;
}

fs::path resolve_data_root(const ExperimentConfig& cfg) {
  if (!cfg.data_root.empty()) return cfg.data_root;
  if (const char* env = std::getenv("RIBAC_DATA_ROOT"); env && *env) return env;
  return {};
}

namespace {

LabeledImageSet limit_split(LabeledImageSet set, std::int64_t limit, std::uint64_t seed, const std::string& tag) {
  if (limit <= 0 || limit >= set.size()) return set;
  auto order = Rng(substream_seed(seed, tag)).permutation(set.size());
  order.resize(static_cast<std::size_t>(limit));
  std::sort(order.begin(), order.end());
  return set.subset(order);
}

LabeledImageSet load_split(DatasetId id, Split split, const fs::path& root) {
  if (id != DatasetId::kDeskSynth && root.empty()) {
    throw ConfigError("dataset " + to_string(id) + " needs data_root or RIBAC_DATA_ROOT");
  }
  return load_dataset(id, split, root);
}

}  // namespace

DataSplits load_splits(const ExperimentConfig& cfg) {
  const auto root = resolve_data_root(cfg);
  DataSplits d;
  // Subsets depend on the dataset only, so every seed sees the same data.
  d.train = limit_split(load_split(cfg.dataset, Split::kTrain, root), cfg.train_limit, 0, "subset/train");
  d.test = limit_split(load_split(cfg.dataset, Split::kTest, root), cfg.test_limit, 0, "subset/test");
  return d;
}

// ---------------------------------------------------------------------------

namespace {

ModelSpec spec_for(const ExperimentConfig& cfg, const LabeledImageSet& train) {
  auto spec = default_spec(cfg.arch, cfg.dataset);
  spec.num_classes = train.num_classes;
  spec.input_shape = train.shape;
  return spec;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Checkpoint obtain_pretrained(const ExperimentConfig& cfg, const DataSplits& data) {
  if (!cfg.pretrained.empty()) {
    auto ckpt = load_checkpoint(cfg.pretrained);
    const auto want = spec_for(cfg, data.train);
    if (!(ckpt.spec == want)) {
      throw ConfigError("pretrained checkpoint " + cfg.pretrained.string() + " does not match arch/dataset");
    }
    if (ckpt.weights.provenance != Provenance::kPretrainedClean) {
      throw ConfigError("checkpoint " + cfg.pretrained.string() + " is not a clean pretrained model");
    }
    return ckpt;
  }
  return run_pretrain(cfg, &data);
}

}  // namespace

Checkpoint run_pretrain(const ExperimentConfig& cfg, const DataSplits* data) {
  DataSplits local;
  if (!data) {
    local = load_splits(cfg);
    data = &local;
  }
  fs::create_directories(cfg.out);
  Checkpoint ckpt;
  ckpt.spec = spec_for(cfg, data->train);
  const auto result = pretrain_clean(ckpt.spec, data->train, data->test, cfg.pretrain);
  ckpt.weights = result.weights;
  ckpt.seed = cfg.seed;
  ckpt.metrics = {{"test_accuracy", result.test_accuracy}, {"epoch_loss", result.epoch_loss}};
  ckpt.config = to_json(cfg);
  save_checkpoint(cfg.out / "pretrained.ckpt", ckpt);
  write_text(cfg.out / "pretrain.json",
             nlohmann::json({{"test_accuracy", result.test_accuracy},
                             {"epoch_loss", result.epoch_loss},
                             {"config", ckpt.config}})
                     .dump(2) +
                 "\n");
  return ckpt;
}

TrainOutcome run_train(const ExperimentConfig& cfg, const DataSplits* data) {
  const auto t0 = std::chrono::steady_clock::now();
  DataSplits local;
  if (!data) {
    local = load_splits(cfg);
    data = &local;
  }
  fs::create_directories(cfg.out);
  const auto pretrained = obtain_pretrained(cfg, *data);
  const Network<float> net(build_architecture(pretrained.spec));
  const Method method = cfg.command == "train" ? Method::kRibac : cfg.method;
  const TrainSets sets{&data->train, &data->test};

  std::optional<BackdooredSparseModel> ribac_model;
  MethodOutcome outcome;
  if (method == Method::kRibac) {
    ribac_model = run_ribac(net, pretrained.weights, sets, cfg.ribac);
    outcome.method = method;
    outcome.weights = ribac_model->weights;
    outcome.mask = ribac_model->mask;
    outcome.bank = ribac_model->bank;
    outcome.history = ribac_model->history;
    outcome.compression_ratio = compression_ratio(outcome.mask);
    outcome.clean_accuracy = clean_accuracy(net, outcome.weights, &outcome.mask, data->test);
    outcome.attack_success_rate =
        attack_success_rate(net, outcome.weights, &outcome.mask, data->test, outcome.bank, cfg.ribac.asr_exclude_target);
  } else {
    outcome = run_method(method, net, pretrained.weights, sets, cfg.ribac);
  }

  TrainOutcome out;
  auto& r = out.record;
  r.method = to_string(method);
  r.clean_accuracy = outcome.clean_accuracy;
  r.attack_success_rate = outcome.attack_success_rate;
  r.compression_ratio = outcome.compression_ratio;
  r.mode = to_string(cfg.ribac.mode);
  r.arch = to_string(cfg.arch);
  r.dataset = to_string(cfg.dataset);
  r.seed = cfg.seed;
  r.beta = cfg.ribac.beta;
  r.epsilon = cfg.ribac.epsilon;
  r.git_rev = git_revision();
  r.config = to_json(cfg);
  out.history = outcome.history;

  Checkpoint ckpt;
  ckpt.spec = pretrained.spec;
  ckpt.weights = outcome.weights;
  ckpt.mask = outcome.mask;
  ckpt.bank = outcome.bank;
  if (ribac_model) ckpt.scores = ribac_model->scores;
  ckpt.seed = cfg.seed;
  ckpt.metrics = {{"clean_acc", r.clean_accuracy}, {"asr", r.attack_success_rate}, {"cr", r.compression_ratio}};
  if (ribac_model) {
    ckpt.metrics["step1_clean_acc"] = ribac_model->step1_clean_accuracy;
    ckpt.metrics["step1_asr"] = ribac_model->step1_attack_success_rate;
  }
  ckpt.config = r.config;
  out.checkpoint = cfg.out / "model.ckpt";
  save_checkpoint(out.checkpoint, ckpt);
  write_text(cfg.out / "history.csv", history_to_csv(out.history));
  r.wall_time = seconds_since(t0);
  write_result_json(cfg.out / "result.json", r);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

struct LoadedModel {
  Checkpoint ckpt;
  Network<float> net;
  InspectedModel view() const { return {&net, &ckpt.weights, ckpt.mask ? &*ckpt.mask : nullptr}; }
};

LoadedModel load_model(const fs::path& path) {
  auto ckpt = load_checkpoint(path);
  Network<float> net(build_architecture(ckpt.spec));
  return {std::move(ckpt), std::move(net)};
}

ExperimentConfig config_of(const Checkpoint& ckpt) {
  ExperimentConfig c;
  nlohmann::json j = ckpt.config;
  return apply_config(c, j);
}

}  // namespace

nlohmann::json run_defend(const ExperimentConfig& cfg, const DataSplits* data) {
  if (cfg.ckpt.empty()) throw ConfigError("defend needs --ckpt");
  const auto model = load_model(cfg.ckpt);
  // The dataset comes from the checkpoint, the data location from the caller.
  ExperimentConfig dcfg = config_of(model.ckpt);
  dcfg.data_root = cfg.data_root;
  DataSplits local;
  if (!data) {
    local = load_splits(dcfg);
    data = &local;
  }
  if (!model.ckpt.bank) throw ConfigError("checkpoint carries no trigger bank");
  const auto& bank = *model.ckpt.bank;
  const auto& test = data->test;
  fs::create_directories(cfg.out);
  nlohmann::json report;

  if (cfg.defense == "finepruning") {
    const auto curve = fine_pruning_curve(model.view(), test, test, bank, cfg.fp_step);
    report = to_json(curve);
    write_fine_pruning_plot(cfg.out / "finepruning.png", curve);
  } else if (cfg.defense == "strip") {
    const auto n = std::min(cfg.strip_probes, test.size() - 1);
    std::vector<std::int64_t> probe_idx(static_cast<std::size_t>(n)), overlay_idx;
    std::iota(probe_idx.begin(), probe_idx.end(), 0);
    for (auto i = n; i < test.size(); ++i) overlay_idx.push_back(i);
    const auto probes = test.subset(probe_idx);
    const auto overlays = test.subset(overlay_idx);
    const auto clean = strip_entropy(model.view(), probes, overlays, cfg.strip);
    const auto poisoned = strip_entropy(model.view(), probes, overlays, cfg.strip, &bank);
    report = strip_json(clean, poisoned);
    write_strip_histogram(cfg.out / "strip.png", clean, poisoned, model.ckpt.spec.num_classes);
  } else if (cfg.defense == "neuralcleanse") {
    const auto nc = neural_cleanse(model.view(), test, cfg.neural_cleanse);
    report = to_json(nc);
    write_neural_cleanse_plot(cfg.out / "neuralcleanse.png", nc);
    for (const auto& c : nc.classes) {
      if (c.diverged) continue;
      Tensor m = c.mask;
      m.reshape({1, m.dim(0), m.dim(1)});
      write_image_png(cfg.out / ("nc_mask_" + std::to_string(c.target) + ".png"), m, 4);
    }
  } else {
    std::vector<Tensor> images, heatmaps;
    nlohmann::json rows = nlohmann::json::array();
    const auto n = std::min<std::int64_t>(cfg.gradcam_images, test.size());
    for (std::int64_t i = 0; i < n; ++i) {
      auto batch = gather_batch(test, std::vector<std::int64_t>{i});
      const int label = batch.labels[0];
      const int target = target_for(label, bank.mode, bank.num_classes);
      const auto poisoned = apply_trigger(batch.images, bank, std::vector<int>{target});
      const Tensor* inputs[] = {&batch.images, &poisoned};
      for (const Tensor* x : inputs) {
        Tensor img = *x;
        const int pred = argmax_rows(model.net.forward(model.ckpt.weights, model.view().mask, img))[0];
        img.reshape({test.shape.channels, test.shape.height, test.shape.width});
        heatmaps.push_back(gradcam_heatmap(model.view(), img, pred));
        images.push_back(std::move(img));
        const bool is_poisoned = x == &poisoned;
        rows.push_back({{"index", i}, {"label", label}, {"poisoned", is_poisoned}, {"predicted", pred}});
      }
    }
    write_gradcam_panel(cfg.out / "gradcam.png", images, heatmaps);
    report = {{"defense", "gradcam"}, {"images", rows}, {"figure", "gradcam.png"}};
  }
  report["ckpt"] = cfg.ckpt.string();
  report["config"] = to_json(cfg);
  write_text(cfg.out / (cfg.defense + ".json"), report.dump(2) + "\n");
  return report;
}

VerifyOutcome run_verify(const fs::path& ckpt_path, const fs::path& result_path,
                         const std::optional<fs::path>& data_root) {
  VerifyOutcome v;
  const auto model = load_model(ckpt_path);
  const bool clean = model.ckpt.weights.provenance == Provenance::kPretrainedClean && !model.ckpt.bank;
  fs::path companion = result_path;
  if (companion.empty()) companion = ckpt_path.parent_path() / (clean ? "pretrain.json" : "result.json");
  ExperimentConfig cfg = config_of(model.ckpt);
  if (data_root) cfg.data_root = *data_root;
  const auto data = load_splits(cfg);
  auto check = [&](const char* name, double a, double b) {
    if (a != b) v.mismatches.push_back(std::string(name) + ": stored " + std::to_string(a) + ", recomputed " + std::to_string(b));
  };

  if (clean) {
    const auto stored = read_json_file(companion);
    const double acc = clean_accuracy(model.net, model.ckpt.weights, nullptr, data.test);
    v.stored.method = v.recomputed.method = "pretrain";
    v.stored.clean_accuracy = stored.at("test_accuracy").get<double>();
    v.recomputed.clean_accuracy = acc;
    check("test_accuracy", v.stored.clean_accuracy, acc);
    check("checkpoint test_accuracy", model.ckpt.metrics.at("test_accuracy").get<double>(), acc);
    if (stored.at("config") != model.ckpt.config) v.mismatches.push_back("config differs between pretrain.json and checkpoint");
    v.ok = v.mismatches.empty();
    return v;
  }

  v.stored = read_result_json(companion);
  if (!model.ckpt.bank || !model.ckpt.mask) throw ConfigError("checkpoint lacks mask or trigger bank");
  v.recomputed = v.stored;
  v.recomputed.clean_accuracy = clean_accuracy(model.net, model.ckpt.weights, &*model.ckpt.mask, data.test);
  v.recomputed.attack_success_rate = attack_success_rate(model.net, model.ckpt.weights, &*model.ckpt.mask, data.test,
                                                         *model.ckpt.bank, cfg.ribac.asr_exclude_target);
  v.recomputed.compression_ratio = compression_ratio(*model.ckpt.mask);
  check("clean_acc", v.stored.clean_accuracy, v.recomputed.clean_accuracy);
  check("asr", v.stored.attack_success_rate, v.recomputed.attack_success_rate);
  check("cr", v.stored.compression_ratio, v.recomputed.compression_ratio);
  if (v.stored.seed != model.ckpt.seed) v.mismatches.push_back("seed differs between result and checkpoint");
  if (v.stored.config != model.ckpt.config) v.mismatches.push_back("config differs between result and checkpoint");
  v.ok = v.mismatches.empty();
  return v;
}

std::vector<fs::path> export_triggers(const fs::path& ckpt_path, const fs::path& out_dir, double amplify, int scale) {
  const auto ckpt = load_checkpoint(ckpt_path);
  if (!ckpt.bank) throw ConfigError("checkpoint carries no trigger bank");
  fs::create_directories(out_dir);
  std::vector<fs::path> written;
  for (int t : ckpt.bank->targets()) {
    Tensor img = ckpt.bank->pattern(t);
    for (auto& v : img.values()) v = std::clamp(static_cast<float>(0.5 + amplify * v), 0.0f, 1.0f);
    const auto path = out_dir / ("trigger_target" + std::to_string(t) + ".png");
    write_image_png(path, img, scale);
    written.push_back(path);
  }
  return written;
}

// ---------------------------------------------------------------------------

SuiteSpec suite_from_json(const nlohmann::json& j, const ExperimentConfig& base) {
  static const std::set<std::string> known{"base", "ratios", "methods", "seeds", "modes"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown suite key '" + key + "'");
  }
  SuiteSpec s;
  s.base = j.contains("base") ? apply_config(base, j.at("base")) : base;
  if (j.contains("ratios")) s.ratios = j.at("ratios").get<std::vector<double>>();
  if (j.contains("methods")) {
    s.methods.clear();
    for (const auto& m : j.at("methods")) s.methods.push_back(parse_method(m.get<std::string>()));
  }
  if (j.contains("seeds")) s.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  if (j.contains("modes")) {
    s.modes.clear();
    for (const auto& m : j.at("modes")) s.modes.push_back(parse_target_mode(m.get<std::string>()));
  }
  if (s.ratios.empty() || s.methods.empty() || s.seeds.empty() || s.modes.empty()) {
    throw ConfigError("suite axes must be non-empty");
  }
  return s;
}

std::vector<ExperimentConfig> expand_suite(const SuiteSpec& suite) {
  std::vector<ExperimentConfig> cells;
  for (auto seed : suite.seeds) {
    for (auto mode : suite.modes) {
      for (double cr : suite.ratios) {
        for (auto method : suite.methods) {
          nlohmann::json j = {{"seed", seed}, {"mode", to_string(mode)}, {"cr", cr}, {"method", to_string(method)},
                              {"command", method == Method::kRibac ? "train" : "baseline"}};
          auto c = apply_config(suite.base, j);
          char name[128];
          std::snprintf(name, sizeof(name), "%s_%s_cr%g_seed%llu", to_string(method).c_str(), to_string(mode).c_str(),
                        cr, static_cast<unsigned long long>(seed));
          c.out = suite.base.out / "cells" / name;
          cells.push_back(std::move(c));
        }
      }
    }
  }
  return cells;
}

std::vector<CellOutcome> run_suite(const SuiteSpec& suite, int parallel,
                                   const std::function<void(const CellOutcome&)>& on_cell) {
  auto cells = expand_suite(suite);
  fs::create_directories(suite.base.out);
  const auto data = load_splits(suite.base);

  // One clean pretrained model per seed, shared by every cell of that seed.
  std::map<std::uint64_t, fs::path> pretrained;
  for (auto seed : suite.seeds) {
    if (!suite.base.pretrained.empty()) {
      pretrained[seed] = suite.base.pretrained;
      continue;
    }
    ExperimentConfig pc = apply_config(suite.base, {{"seed", seed}, {"command", "pretrain"}});
    pc.out = suite.base.out / ("pretrained_seed" + std::to_string(seed));
    if (!fs::exists(pc.out / "pretrained.ckpt")) run_pretrain(pc, &data);
    pretrained[seed] = pc.out / "pretrained.ckpt";
  }
  for (auto& c : cells) c.pretrained = pretrained.at(c.seed);

  std::vector<CellOutcome> outcomes(cells.size());
  std::atomic<std::size_t> next{0};
  std::mutex report_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      CellOutcome o;
      o.config = cells[i];
      try {
        o.record = run_train(cells[i], &data).record;
      } catch (const std::exception& e) {
        o.error = e.what();
      }
      std::lock_guard lock(report_mutex);
      outcomes[i] = o;
      if (on_cell) on_cell(o);
    }
  };
  std::vector<std::thread> threads;
  for (int t = 1; t < std::max(1, parallel); ++t) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();

  std::vector<ResultRecord> records;
  for (const auto& o : outcomes) {
    if (o.record) records.push_back(*o.record);
  }
  // Wall time is excluded from the aggregate so reruns compare equal.
  for (auto& r : records) r.wall_time = 0.0;
  write_text(suite.base.out / "results.csv", records_to_csv(records));
  write_text(suite.base.out / "table.txt", records.empty() ? std::string() : render_table(records));
  nlohmann::json failures = nlohmann::json::array();
  for (const auto& o : outcomes) {
    if (!o.error.empty()) failures.push_back({{"cell", o.config.out.string()}, {"error", o.error}});
  }
  write_text(suite.base.out / "failures.json", failures.dump(2) + "\n");
  return outcomes;
}

std::vector<ResultRecord> collect_results(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().filename() == "result.json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<ResultRecord> out;
  for (const auto& f : files) out.push_back(read_result_json(f));
  return out;
}

}  // namespace ribac
