#include <cstdio>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ribac/experiment.hpp"

namespace fs = std::filesystem;
using ribac::ConfigError;
using ribac::ExperimentConfig;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitVerify = 3;

struct Overrides {
  std::map<std::string, std::string> values;
  std::map<std::string, bool> flags;
  std::string config_file;
};

std::string flag_name(const std::string& key) {
  std::string out = "--" + key;
  for (auto& c : out) {
    if (c == '_') c = '-';
  }
  return out;
}

void add_keys(CLI::App* app, Overrides& o, const std::vector<std::string>& keys) {
  static const nlohmann::json defaults = ribac::to_json(ExperimentConfig{});
  for (const auto& key : keys) {
    const auto& d = defaults.at(key);
    if (d.is_boolean()) {
      app->add_flag(flag_name(key), o.flags[key], key);
    } else {
      app->add_option(flag_name(key), o.values[key], key + " (default " + d.dump() + ")");
    }
  }
  app->add_option("--config", o.config_file, "JSON configuration file; flags override its values");
}

nlohmann::json to_overrides(const CLI::App* app, const Overrides& o, const std::string& command) {
  static const nlohmann::json defaults = ribac::to_json(ExperimentConfig{});
  nlohmann::json j = {{"command", command}};
  for (const auto& [key, text] : o.values) {
    if (app->count(flag_name(key)) == 0) continue;
    const auto& d = defaults.at(key);
    try {
      std::size_t used = 0;
      if (d.is_number_unsigned()) {
        j[key] = std::stoull(text, &used);
      } else if (d.is_number_integer()) {
        j[key] = std::stoll(text, &used);
      } else if (d.is_number()) {
        j[key] = std::stod(text, &used);
      } else {
        j[key] = text;
        used = text.size();
      }
      if (used != text.size()) throw std::invalid_argument(text);
    } catch (const std::logic_error&) {
      throw ConfigError("invalid value for key '" + key + "': " + text);
    }
  }
  for (const auto& [key, on] : o.flags) {
    if (app->count(flag_name(key)) > 0) j[key] = on;
  }
  return j;
}

ExperimentConfig resolve(const CLI::App* app, const Overrides& o, const std::string& command) {
  std::optional<fs::path> file;
  if (!o.config_file.empty()) file = o.config_file;
  return ribac::parse_config(to_overrides(app, o, command), file);
}

const std::vector<std::string> kDataKeys{"arch", "dataset", "data_root", "out", "seed", "train_limit", "test_limit"};
const std::vector<std::string> kPretrainKeys{"pretrain_epochs",       "pretrain_lr",         "pretrain_momentum",
                                             "pretrain_weight_decay", "pretrain_batch_size", "augment"};
const std::vector<std::string> kTrainKeys{"pretrained",  "cr",          "keep_fraction", "mode",
                                          "beta",        "epsilon",     "epochs_step1",  "epochs_step2",
                                          "lr_scores",   "lr_triggers", "lr_weights",    "batch_size",
                                          "score_init",  "asr_exclude_target", "evaluate_epochs"};
const std::vector<std::string> kDefendKeys{"ckpt",      "defense",    "data_root",   "out",         "fp_step",
                                           "strip_probes", "strip_overlays", "nc_epochs", "nc_samples", "nc_lambda",
                                           "nc_lr",     "nc_patience", "gradcam_images", "seed"};

std::vector<std::string> concat(std::initializer_list<std::vector<std::string>> parts) {
  std::vector<std::string> out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

void print_record(const ribac::ResultRecord& r) {
  std::printf("%s %s/%s cr=%.4g mode=%s: clean %.2f%%, asr %.2f%%\n", r.method.c_str(), r.arch.c_str(),
              r.dataset.c_str(), r.compression_ratio, r.mode.c_str(), 100 * r.clean_accuracy,
              100 * r.attack_success_rate);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Backdoor injection into pruned classifiers: training, baselines, defenses, reports"};
  app.require_subcommand(1);

  Overrides pre_o, train_o, base_o, def_o, rep_o;
  auto* pre = app.add_subcommand("pretrain", "Train a clean model and write pretrained.ckpt");
  add_keys(pre, pre_o, concat({kDataKeys, kPretrainKeys}));

  auto* train = app.add_subcommand("train", "Jointly learn mask, trigger and weights; writes result.json, model.ckpt, history.csv");
  add_keys(train, train_o, concat({kDataKeys, kPretrainKeys, kTrainKeys}));

  auto* base = app.add_subcommand("baseline", "Run a sequential or pruning-only reference method");
  add_keys(base, base_o, concat({kDataKeys, kPretrainKeys, kTrainKeys, {"method"}}));

  auto* def = app.add_subcommand("defend", "Evaluate a checkpoint against a backdoor defense");
  add_keys(def, def_o, kDefendKeys);

  auto* rep = app.add_subcommand("report", "Run a suite matrix or aggregate existing result.json files");
  std::string matrix, results_dir;
  rep->add_option("--matrix", matrix, "Suite matrix JSON (base, ratios, methods, seeds, modes)");
  rep->add_option("--results", results_dir, "Directory searched for result.json files");
  add_keys(rep, rep_o, concat({kDataKeys, kPretrainKeys, kTrainKeys, {"parallel"}}));

  auto* ver = app.add_subcommand("verify", "Recompute metrics from a checkpoint and compare with result.json");
  std::string ver_ckpt, ver_result, ver_root;
  ver->add_option("--ckpt", ver_ckpt, "Checkpoint")->required();
  ver->add_option("--result", ver_result, "result.json or pretrain.json (default: next to the checkpoint)");
  ver->add_option("--data-root", ver_root, "Dataset root");

  auto* exp = app.add_subcommand("export-triggers", "Write trigger patterns as PNG images");
  std::string exp_ckpt, exp_out = ".";
  double amplify = 10.0;
  int scale = 1;
  exp->add_option("--ckpt", exp_ckpt, "Checkpoint")->required();
  exp->add_option("--out", exp_out, "Output directory");
  exp->add_option("--amplify", amplify, "Pixel value is clip(0.5 + amplify * trigger)");
  exp->add_option("--scale", scale, "Integer upscaling factor");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (pre->parsed()) {
      const auto cfg = resolve(pre, pre_o, "pretrain");
      const auto ckpt = ribac::run_pretrain(cfg);
      std::printf("clean test accuracy %.2f%% -> %s\n", 100 * ckpt.metrics.at("test_accuracy").get<double>(),
                  (cfg.out / "pretrained.ckpt").c_str());
    } else if (train->parsed() || base->parsed()) {
      const bool is_train = train->parsed();
      const auto cfg = is_train ? resolve(train, train_o, "train") : resolve(base, base_o, "baseline");
      const auto out = ribac::run_train(cfg);
      print_record(out.record);
    } else if (def->parsed()) {
      const auto cfg = resolve(def, def_o, "defend");
      const auto report = ribac::run_defend(cfg);
      std::printf("%s report -> %s\n", cfg.defense.c_str(), (cfg.out / (cfg.defense + ".json")).c_str());
      if (report.contains("anomaly_index")) std::printf("anomaly index %s\n", report.at("anomaly_index").dump().c_str());
    } else if (rep->parsed()) {
      auto cfg = resolve(rep, rep_o, "report");
      if (matrix.empty() == results_dir.empty()) throw ConfigError("report needs exactly one of --matrix or --results");
      if (!matrix.empty()) {
        auto suite = ribac::suite_from_json(ribac::read_json_file(matrix), cfg);
        suite.base = ribac::apply_config(suite.base, to_overrides(rep, rep_o, "report"));
        const auto outcomes = ribac::run_suite(suite, suite.base.parallel, [](const ribac::CellOutcome& o) {
          if (o.record) {
            print_record(*o.record);
          } else {
            std::fprintf(stderr, "cell %s failed: %s\n", o.config.out.c_str(), o.error.c_str());
          }
        });
        std::printf("%zu cells -> %s\n", outcomes.size(), (suite.base.out / "results.csv").c_str());
      } else {
        const auto records = ribac::collect_results(results_dir);
        if (records.empty()) throw ConfigError("no result.json found below " + results_dir);
        fs::create_directories(cfg.out);
        std::ofstream(cfg.out / "results.csv") << ribac::records_to_csv(records);
        const auto table = ribac::render_table(records);
        std::ofstream(cfg.out / "table.txt") << table;
        std::fputs(table.c_str(), stdout);
      }
    } else if (ver->parsed()) {
      const fs::path ckpt = ver_ckpt;
      const fs::path result = ver_result;
      std::optional<fs::path> root;
      if (!ver_root.empty()) root = ver_root;
      const auto v = ribac::run_verify(ckpt, result, root);
      if (!v.ok) {
        for (const auto& m : v.mismatches) std::fprintf(stderr, "mismatch: %s\n", m.c_str());
        return kExitVerify;
      }
      std::printf("verified %s\n", ckpt.c_str());
    } else if (exp->parsed()) {
      for (const auto& p : ribac::export_triggers(exp_ckpt, exp_out, amplify, scale)) std::printf("%s\n", p.c_str());
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitError;
  }
  return kExitOk;
}
