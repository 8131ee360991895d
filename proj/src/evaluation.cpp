#include "ribac/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#ifndef RIBAC_GIT_REV
#define RIBAC_GIT_REV "unknown"
#endif

namespace ribac {

std::string git_revision() { return RIBAC_GIT_REV; }

std::vector<int> predict(const Network<float>& net, const ModelWeights& weights, const PruneMask* mask,
                         const LabeledImageSet& set, const TriggerBank* bank,
                         const std::vector<std::uint8_t>* feature_channel_keep) {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(set.size()));
  ForwardOptions<float> options;
  options.feature_channel_keep = feature_channel_keep;
  std::vector<std::int64_t> idx;
  for (std::int64_t start = 0; start < set.size(); start += kEvalBatch) {
    const auto stop = std::min(set.size(), start + kEvalBatch);
    idx.resize(static_cast<std::size_t>(stop - start));
    for (std::int64_t i = start; i < stop; ++i) idx[static_cast<std::size_t>(i - start)] = i;
    Batch batch = gather_batch(set, idx);
    if (bank) {
      std::vector<int> targets(batch.labels.size());
      for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = target_for(batch.labels[i], bank->mode, bank->num_classes);
      batch.images = apply_trigger(batch.images, *bank, targets);
    }
    const auto pred = argmax_rows(net.forward(weights, mask, batch.images, options));
    out.insert(out.end(), pred.begin(), pred.end());
  }
  return out;
}

double clean_accuracy(const Network<float>& net, const ModelWeights& weights, const PruneMask* mask,
                      const LabeledImageSet& test) {
  if (test.size() == 0) throw std::invalid_argument("clean accuracy of an empty set");
  const auto pred = predict(net, weights, mask, test);
  std::int64_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == test.labels[i];
  return static_cast<double>(hit) / static_cast<double>(test.size());
}

double attack_success_rate(const Network<float>& net, const ModelWeights& weights, const PruneMask* mask,
                           const LabeledImageSet& test, const TriggerBank& bank, bool exclude_target) {
  if (test.size() == 0) throw std::invalid_argument("attack success rate of an empty set");
  for (int y : test.labels) {
    const int t = target_for(y, bank.mode, bank.num_classes);
    if (!bank.has(t)) throw MissingTrigger("no trigger pattern for target class " + std::to_string(t));
  }
  const auto pred = predict(net, weights, mask, test, &bank);
  std::int64_t hit = 0, counted = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int t = target_for(test.labels[i], bank.mode, bank.num_classes);
    if (exclude_target && test.labels[i] == t) continue;
    ++counted;
    hit += pred[i] == t;
  }
  if (counted == 0) throw std::invalid_argument("no samples left after excluding the target class");
  return static_cast<double>(hit) / static_cast<double>(counted);
}

void ResultRecord::validate() const {
  auto rate = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!rate(clean_accuracy) || !rate(attack_success_rate)) throw std::invalid_argument("result rates must lie in [0,1]");
  if (!(compression_ratio >= 1.0)) throw std::invalid_argument("compression ratio must be >= 1");
}

nlohmann::json to_json(const ResultRecord& r) {
  return {{"method", r.method},   {"clean_acc", r.clean_accuracy},
          {"asr", r.attack_success_rate}, {"cr", r.compression_ratio},
          {"mode", r.mode},       {"arch", r.arch},
          {"dataset", r.dataset}, {"seed", r.seed},
          {"beta", r.beta},       {"epsilon", r.epsilon},
          {"git_rev", r.git_rev}, {"wall_time", r.wall_time},
          {"config", r.config}};
}

ResultRecord record_from_json(const nlohmann::json& j) {
  ResultRecord r;
  r.method = j.value("method", std::string());
  r.clean_accuracy = j.at("clean_acc").get<double>();
  r.attack_success_rate = j.at("asr").get<double>();
  r.compression_ratio = j.at("cr").get<double>();
  r.mode = j.at("mode").get<std::string>();
  r.arch = j.at("arch").get<std::string>();
  r.dataset = j.at("dataset").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.beta = j.at("beta").get<double>();
  r.epsilon = j.at("epsilon").get<double>();
  r.git_rev = j.at("git_rev").get<std::string>();
  r.wall_time = j.value("wall_time", 0.0);
  r.config = j.value("config", nlohmann::json::object());
  return r;
}

void write_result_json(const std::filesystem::path& path, const ResultRecord& r) {
  r.validate();
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_json(r).dump(2) << "\n";
}

ResultRecord read_result_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return record_from_json(nlohmann::json::parse(in));
}

namespace {

std::string exact(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> csv_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

constexpr const char* kCsvHeader = "method,clean_acc,asr,cr,mode,arch,dataset,seed,beta,epsilon,git_rev,wall_time,config";

}  // namespace

std::string records_to_csv(const std::vector<ResultRecord>& records) {
  std::string out = std::string(kCsvHeader) + "\n";
  for (const auto& r : records) {
    out += csv_quote(r.method) + "," + exact(r.clean_accuracy) + "," + exact(r.attack_success_rate) + "," +
           exact(r.compression_ratio) + "," + csv_quote(r.mode) + "," + csv_quote(r.arch) + "," + csv_quote(r.dataset) +
           "," + std::to_string(r.seed) + "," + exact(r.beta) + "," + exact(r.epsilon) + "," + csv_quote(r.git_rev) +
           "," + exact(r.wall_time) + "," + csv_quote(r.config.dump()) + "\n";
  }
  return out;
}

std::vector<ResultRecord> records_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) throw std::invalid_argument("unexpected CSV header");
  std::vector<ResultRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = csv_fields(line);
    if (f.size() != 13) throw std::invalid_argument("CSV row has " + std::to_string(f.size()) + " fields");
    ResultRecord r;
    r.method = f[0];
    r.clean_accuracy = std::stod(f[1]);
    r.attack_success_rate = std::stod(f[2]);
    r.compression_ratio = std::stod(f[3]);
    r.mode = f[4];
    r.arch = f[5];
    r.dataset = f[6];
    r.seed = std::stoull(f[7]);
    r.beta = std::stod(f[8]);
    r.epsilon = std::stod(f[9]);
    r.git_rev = f[10];
    r.wall_time = std::stod(f[11]);
    r.config = nlohmann::json::parse(f[12]);
    out.push_back(std::move(r));
  }
  return out;
}

std::string format_cell(double clean, double asr) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.2f / %.2f", 100.0 * clean, 100.0 * asr);
  return buf;
}

namespace {

std::string ratio_label(double cr) {
  const double rounded = std::round(cr);
  char buf[32];
  if (std::fabs(cr - rounded) <= 0.01 * cr) {
    std::snprintf(buf, sizeof(buf), "%.0f×", rounded);
  } else {
    std::snprintf(buf, sizeof(buf), "%.2f×", cr);
  }
  return buf;
}

// Display width, counting each UTF-8 code point once.
std::size_t display_width(const std::string& s) {
  return static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [](char c) { return (c & 0xC0) != 0x80; }));
}

std::string pad(const std::string& s, std::size_t width) {
  const auto w = display_width(s);
  return w >= width ? s : s + std::string(width - w, ' ');
}

}  // namespace

std::string render_table(const std::vector<ResultRecord>& records) {
  std::vector<std::pair<std::string, std::string>> blocks;
  for (const auto& r : records) {
    std::pair<std::string, std::string> key{r.arch, r.dataset};
    if (std::find(blocks.begin(), blocks.end(), key) == blocks.end()) blocks.push_back(key);
  }
  std::string out;
  for (const auto& [arch, dataset] : blocks) {
    std::vector<std::string> methods;
    std::map<std::string, std::map<std::string, std::string>> cells;  // ratio label -> method -> cell
    std::vector<std::pair<double, std::string>> ratios;
    for (const auto& r : records) {
      if (r.arch != arch || r.dataset != dataset) continue;
      if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
      const auto label = ratio_label(r.compression_ratio);
      if (std::none_of(ratios.begin(), ratios.end(), [&](const auto& p) { return p.second == label; })) {
        ratios.emplace_back(r.compression_ratio, label);
      }
      cells[label][r.method] = format_cell(r.clean_accuracy, r.attack_success_rate);
    }
    std::sort(ratios.begin(), ratios.end());

    std::vector<std::size_t> width(methods.size() + 1, 4);
    for (const auto& [_, label] : ratios) width[0] = std::max(width[0], display_width(label));
    for (std::size_t m = 0; m < methods.size(); ++m) {
      width[m + 1] = std::max<std::size_t>(display_width(methods[m]), 15);
    }
    out += arch + " on " + dataset + " (clean accuracy / attack success rate)\n";
    std::string header = pad("C.R.", width[0]);
    for (std::size_t m = 0; m < methods.size(); ++m) header += "  " + pad(methods[m], width[m + 1]);
    out += header + "\n";
    for (const auto& [_, label] : ratios) {
      std::string row = pad(label, width[0]);
      for (std::size_t m = 0; m < methods.size(); ++m) {
        const auto& row_cells = cells[label];
        auto it = row_cells.find(methods[m]);
        row += "  " + pad(it == row_cells.end() ? "-" : it->second, width[m + 1]);
      }
      while (!row.empty() && row.back() == ' ') row.pop_back();
      out += row + "\n";
    }
    out += "\n";
  }
  return out;
}

}  // namespace ribac
