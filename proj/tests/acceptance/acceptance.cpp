#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ribac/defenses.hpp"
#include "ribac/engine.hpp"
#include "ribac/evaluation.hpp"
#include "ribac/experiment.hpp"

namespace fs = std::filesystem;
using namespace ribac;

namespace {

// Pinned tolerances and budgets.
constexpr double kPropertySeconds = 60.0;
constexpr double kGradientSeconds = 300.0;
constexpr double kEndToEndSeconds = 1800.0;
constexpr double kMinAsr = 0.95;
constexpr double kCleanDropLimit = 0.05;
constexpr double kStep1MinAsr = 0.90;
constexpr double kBThenPAsrGap = 0.20;
constexpr double kParityLimit = 0.02;
constexpr double kStripRelativeGap = 0.25;

constexpr int kEpochsStep1 = 10;
constexpr int kEpochsStep2 = 20;
constexpr std::int64_t kBatch = 64;
constexpr int kPretrainEpochs = 5;
const std::vector<std::uint64_t> kSeeds{0, 1, 2};

using Clock = std::chrono::steady_clock;
const auto kStart = Clock::now();

double since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

void log(const char* fmt, auto... args) {
  std::printf("[%6.0fs] ", since(kStart));
  std::printf(fmt, args...);
  std::printf("\n");
  std::fflush(stdout);
}

int failures = 0;

void verdict(int id, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::printf("%s criterion %d: %s\n", pass ? "PASS" : "FAIL", id, detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

struct Metrics {
  double clean = 0.0;
  double asr = 0.0;
};

class Desk {
 public:
  Desk()
      : train_(make_desk_synth(Split::kTrain)),
        test_(make_desk_synth(Split::kTest)),
        spec_(default_spec(Arch::kDeskCnn, DatasetId::kDeskSynth)),
        net_(build_architecture(spec_)) {}

  const Network<float>& net() const { return net_; }
  const LabeledImageSet& train() const { return train_; }
  const LabeledImageSet& test() const { return test_; }
  TrainSets data() const { return {&train_, &test_}; }

  const PretrainResult& pretrained(std::uint64_t seed) {
    auto it = pretrained_.find(seed);
    if (it == pretrained_.end()) {
      PretrainConfig pc;
      pc.epochs = kPretrainEpochs;
      pc.seed = seed;
      it = pretrained_.emplace(seed, pretrain_clean(spec_, train_, test_, pc)).first;
      log("pretrained seed %llu: clean %.4f", static_cast<unsigned long long>(seed), it->second.test_accuracy);
    }
    return it->second;
  }

  RibacConfig config(std::uint64_t seed, double ratio, TargetMode mode) const {
    RibacConfig cfg;
    cfg.epochs_step1 = kEpochsStep1;
    cfg.epochs_step2 = kEpochsStep2;
    cfg.batch_size = kBatch;
    cfg.keep_fraction = 1.0 / ratio;
    cfg.mode = mode;
    cfg.seed = seed;
    cfg.evaluate_epochs = false;
    return cfg;
  }

  Metrics measure(const ModelWeights& w, const PruneMask& m, const TriggerBank& bank) const {
    return {clean_accuracy(net_, w, &m, test_), attack_success_rate(net_, w, &m, test_, bank)};
  }

  // RIBAC runs are shared between criteria.
  const BackdooredSparseModel& ribac(std::uint64_t seed, double ratio, TargetMode mode) {
    const auto key = std::make_tuple(seed, ratio, mode);
    auto it = ribac_.find(key);
    if (it == ribac_.end()) {
      it = ribac_.emplace(key, run_ribac(net_, pretrained(seed).weights, data(), config(seed, ratio, mode))).first;
      const auto m = measure(it->second.weights, it->second.mask, it->second.bank);
      log("ribac seed %llu %gx %s: clean %.4f asr %.4f (step 1: clean %.4f asr %.4f)",
          static_cast<unsigned long long>(seed), ratio, to_string(mode).c_str(), m.clean, m.asr,
          it->second.step1_clean_accuracy, it->second.step1_attack_success_rate);
    }
    return it->second;
  }

  Metrics ribac_metrics(std::uint64_t seed, double ratio, TargetMode mode) {
    const auto& r = ribac(seed, ratio, mode);
    return measure(r.weights, r.mask, r.bank);
  }

  Metrics method(Method m, std::uint64_t seed, double ratio, TargetMode mode) {
    const auto o = run_method(m, net_, pretrained(seed).weights, data(), config(seed, ratio, mode));
    log("%s seed %llu %gx %s: clean %.4f asr %.4f", to_string(m).c_str(), static_cast<unsigned long long>(seed), ratio,
        to_string(mode).c_str(), o.clean_accuracy, o.attack_success_rate);
    return {o.clean_accuracy, o.attack_success_rate};
  }

 private:
  LabeledImageSet train_, test_;
  ModelSpec spec_;
  Network<float> net_;
  std::map<std::uint64_t, PretrainResult> pretrained_;
  std::map<std::tuple<std::uint64_t, double, TargetMode>, BackdooredSparseModel> ribac_;
};

int run(const std::string& cmd) {
  log("$ %s", cmd.c_str());
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void criterion_unit(int id, const std::string& filter, double limit) {
  const auto t = Clock::now();
  const int rc = run(std::string(RIBAC_UNIT_TESTS) + " --no-version --minimal " + filter);
  const double secs = since(t);
  verdict(id, rc == 0 && secs <= limit, fmt("unit suite exit %d in %.1fs (limit %.0fs)", rc, secs, limit));
}

void criterion3(Desk& desk) {
  const auto t = Clock::now();
  const double dense = desk.pretrained(0).test_accuracy;
  const auto m = desk.ribac_metrics(0, 4, TargetMode::kAllToOne);
  const double secs = since(t);
  verdict(3, m.asr >= kMinAsr && m.clean >= dense - kCleanDropLimit && secs <= kEndToEndSeconds,
          fmt("4x all2one: asr %.4f (>= %.2f), clean %.4f vs dense %.4f (drop <= %.2f), %.0fs", m.asr, kMinAsr, m.clean,
              dense, kCleanDropLimit, secs));
}

void criterion4(Desk& desk) {
  bool step1_ok = true, step2_ok = true, single_ok = true;
  std::string detail;
  for (double ratio : {8.0, 16.0, 32.0}) {
    std::vector<double> s1_asr, s1_clean, full_clean, single_clean;
    for (auto seed : kSeeds) {
      const auto& r = desk.ribac(seed, ratio, TargetMode::kAllToOne);
      s1_asr.push_back(r.step1_attack_success_rate);
      s1_clean.push_back(r.step1_clean_accuracy);
      full_clean.push_back(desk.ribac_metrics(seed, ratio, TargetMode::kAllToOne).clean);
      single_clean.push_back(desk.method(Method::kSingleStep, seed, ratio, TargetMode::kAllToOne).clean);
    }
    step1_ok = step1_ok && mean(s1_asr) >= kStep1MinAsr;
    step2_ok = step2_ok && mean(full_clean) > mean(s1_clean);
    single_ok = single_ok && mean(single_clean) < mean(full_clean);
    detail += fmt(" %gx[step1 asr %.3f clean %.3f | step1+2 clean %.3f | single-step clean %.3f]", ratio, mean(s1_asr),
                  mean(s1_clean), mean(full_clean), mean(single_clean));
  }
  verdict(4, step1_ok && step2_ok && single_ok,
          fmt("step1 asr>=%.2f %s, step1+2 > step1 clean %s, single-step < step1+2 clean %s;", kStep1MinAsr,
              step1_ok ? "ok" : "no", step2_ok ? "ok" : "no", single_ok ? "ok" : "no") +
              detail);
}

void criterion5(Desk& desk) {
  const auto mode = TargetMode::kAllToAll;
  const std::vector<double> ratios{2, 4, 8, 16, 32};
  std::map<double, std::vector<double>> ribac_clean, ribac_asr, b2p_asr, p2b_pre, p2b_rand;
  for (auto seed : kSeeds) {
    const auto base = desk.config(seed, 1, mode);
    const auto bank = init_triggers(desk.train().shape, mode, desk.train().num_classes, base.epsilon, seed);
    const auto dense = baseline_backdoor_train(desk.net(), desk.pretrained(seed).weights, nullptr, bank, desk.data(),
                                               base, base.total_epochs(), "backdoor_dense");
    log("dense backdoor seed %llu done", static_cast<unsigned long long>(seed));
    for (double ratio : ratios) {
      const auto cfg = desk.config(seed, ratio, mode);
      const auto m = desk.ribac_metrics(seed, ratio, mode);
      ribac_clean[ratio].push_back(m.clean);
      ribac_asr[ratio].push_back(m.asr);
      const auto b2p = pipeline_b_then_p(desk.net(), desk.pretrained(seed).weights, desk.data(), cfg, &dense);
      log("b2p seed %llu %gx: clean %.4f asr %.4f", static_cast<unsigned long long>(seed), ratio, b2p.clean_accuracy,
          b2p.attack_success_rate);
      b2p_asr[ratio].push_back(b2p.attack_success_rate);
      p2b_pre[ratio].push_back(desk.method(Method::kPThenBPretrained, seed, ratio, mode).clean);
      p2b_rand[ratio].push_back(desk.method(Method::kPThenBRandom, seed, ratio, mode).clean);
    }
  }
  bool gap_ok = true, p2b_ok = true;
  std::string detail;
  for (double ratio : ratios) {
    const double rc = mean(ribac_clean[ratio]), ra = mean(ribac_asr[ratio]), ba = mean(b2p_asr[ratio]);
    const double pp = mean(p2b_pre[ratio]), pr = mean(p2b_rand[ratio]);
    if (ratio >= 16) gap_ok = gap_ok && ba <= ra - kBThenPAsrGap;
    p2b_ok = p2b_ok && pp <= rc && pr <= rc;
    detail += fmt(" %gx[ribac %.3f/%.3f | b2p asr %.3f | p2b clean pre %.3f rand %.3f]", ratio, rc, ra, ba, pp, pr);
  }
  verdict(5, gap_ok && p2b_ok,
          fmt("all2all; b2p asr gap >= %.0f pts at 16x,32x %s, p2b clean <= ribac everywhere %s;",
              100 * kBThenPAsrGap, gap_ok ? "ok" : "no", p2b_ok ? "ok" : "no") +
              detail);
}

void criterion6(Desk& desk) {
  bool ok = true;
  std::string detail;
  for (double ratio : {2.0, 4.0, 8.0}) {
    std::vector<double> rc, sc;
    for (auto seed : kSeeds) {
      rc.push_back(desk.ribac_metrics(seed, ratio, TargetMode::kAllToOne).clean);
      sc.push_back(desk.method(Method::kScorePrune, seed, ratio, TargetMode::kAllToOne).clean);
    }
    const double gap = std::abs(mean(rc) - mean(sc));
    ok = ok && gap <= kParityLimit;
    detail += fmt(" %gx[ribac %.4f score-prune %.4f gap %.4f]", ratio, mean(rc), mean(sc), gap);
  }
  verdict(6, ok, fmt("|gap| <= %.2f at 2x-8x;", kParityLimit) + detail);
}

void criterion7(Desk& desk) {
  const auto& r = desk.ribac(0, 4, TargetMode::kAllToOne);
  const InspectedModel model{&desk.net(), &r.weights, &r.mask};
  const auto& test = desk.test();

  const auto curve = fine_pruning_curve(model, test, test, r.bank, 0.05);
  bool fp_ok = true;
  double worst = 1.0;
  for (const auto& p : curve) {
    fp_ok = fp_ok && p.attack_success_rate >= p.clean_accuracy;
    worst = std::min(worst, p.attack_success_rate - p.clean_accuracy);
  }
  log("fine-pruning: %zu points, min(asr - clean) %.4f, last clean %.4f asr %.4f", curve.size(), worst,
      curve.back().clean_accuracy, curve.back().attack_success_rate);

  std::vector<std::int64_t> probe_idx(200), overlay_idx;
  std::iota(probe_idx.begin(), probe_idx.end(), 0);
  for (auto i = static_cast<std::int64_t>(probe_idx.size()); i < test.size(); ++i) overlay_idx.push_back(i);
  const auto probes = test.subset(probe_idx), overlays = test.subset(overlay_idx);
  const StripConfig sc;
  const double clean_h = mean(strip_entropy(model, probes, overlays, sc));
  const double poison_h = mean(strip_entropy(model, probes, overlays, sc, &r.bank));
  const bool strip_ok = std::abs(poison_h - clean_h) <= kStripRelativeGap * clean_h;
  log("strip: clean entropy %.4f poisoned %.4f", clean_h, poison_h);

  NeuralCleanseConfig nc;
  const auto report = neural_cleanse(model, test, nc);
  log("neural cleanse (ribac): anomaly %.4f suspect %d", report.anomaly_index, report.suspect_class);

  PatchBackdoorConfig pc;
  const auto& pre = desk.pretrained(0).weights;
  const auto patched = train_patch_backdoor(desk.net(), pre, desk.train(), pc);
  const InspectedModel patch_model{&desk.net(), &patched, nullptr};
  const double patch_asr = patch_attack_success_rate(patch_model, test, pc);
  const double patch_clean = clean_accuracy(desk.net(), patched, nullptr, test);
  const auto control = neural_cleanse(patch_model, test, nc);
  log("neural cleanse (patch control, clean %.4f asr %.4f): anomaly %.4f suspect %d", patch_clean, patch_asr,
      control.anomaly_index, control.suspect_class);
  const bool nc_ok = report.anomaly_index < kAnomalyThreshold && control.anomaly_index > kAnomalyThreshold;

  verdict(7, fp_ok && strip_ok && nc_ok,
          fmt("fine-pruning asr >= clean at all %zu points %s (min gap %.4f); strip entropies %.4f vs %.4f within "
              "%.0f%% %s; NC anomaly ribac %.3f < %.1f, patch control %.3f > %.1f %s",
              curve.size(), fp_ok ? "ok" : "no", worst, poison_h, clean_h, 100 * kStripRelativeGap,
              strip_ok ? "ok" : "no", report.anomaly_index, kAnomalyThreshold, control.anomaly_index,
              kAnomalyThreshold, nc_ok ? "ok" : "no"));
}

void criterion9(const fs::path& work) {
  fs::remove_all(work);
  const std::string cli = RIBAC_CLI;
  const std::string common =
      " --dataset desk_synth --arch desk_cnn --train-limit 256 --test-limit 128 --pretrain-epochs 1"
      " --epochs-step1 1 --epochs-step2 1 --batch-size 64 --seed 3 --cr 4";
  bool ok = true;
  std::vector<fs::path> ckpts;
  for (const char* run_name : {"a", "b"}) {
    const auto out = work / run_name;
    ok = ok && run(cli + " train" + common + " --out " + out.string() + " > /dev/null") == 0;
    ckpts.push_back(out / "model.ckpt");
    ckpts.push_back(out / "pretrained.ckpt");
  }
  const auto ha = read_file(work / "a" / "history.csv"), hb = read_file(work / "b" / "history.csv");
  const bool same = !ha.empty() && ha == hb;
  const auto base_out = work / "baseline";
  ok = ok && run(cli + " baseline" + common + " --method p2b_pretrained --out " + base_out.string() + " > /dev/null") == 0;
  ckpts.push_back(base_out / "model.ckpt");
  ckpts.push_back(base_out / "pretrained.ckpt");
  int verified = 0;
  for (const auto& c : ckpts) verified += run(cli + " verify --ckpt " + c.string() + " > /dev/null") == 0;
  const bool verify_ok = verified == static_cast<int>(ckpts.size());
  verdict(9, ok && same && verify_ok,
          fmt("history.csv bit-identical across repeated train runs: %s (%zu bytes); verify passed %d/%zu", same ? "yes" : "no",
              ha.size(), verified, ckpts.size()));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria; one PASS/FAIL/SKIP line per criterion"};
  std::vector<int> only;
  std::string work = "acceptance_work";
  app.add_option("--only", only, "Run only these criteria");
  app.add_option("--work", work, "Scratch directory for CLI runs");
  CLI11_PARSE(app, argc, argv);
  const std::set<int> selected(only.begin(), only.end());
  const auto want = [&](int id) { return selected.empty() || selected.count(id) > 0; };

  if (want(1)) {
    criterion_unit(1, "-tc='property: generate_mask exact*,property: projection*'", kPropertySeconds);
  }
  if (want(2)) criterion_unit(2, "-sf='*test_gradients.cpp'", kGradientSeconds);
  Desk desk;
  if (want(3)) criterion3(desk);
  if (want(4)) criterion4(desk);
  if (want(5)) criterion5(desk);
  if (want(6)) criterion6(desk);
  if (want(7)) criterion7(desk);
  if (want(8)) std::printf("SKIP criterion 8: full-scale GPU reproduction is optional and not run on CPU\n");
  if (want(9)) criterion9(work);
  log("done, %d failing", failures);
  return failures == 0 ? 0 : 1;
}
