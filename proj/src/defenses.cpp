#include "ribac/defenses.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "ribac/engine.hpp"
#include "ribac/evaluation.hpp"
#include "ribac/optim.hpp"
#include "ribac/rng.hpp"

namespace ribac {

namespace {

constexpr std::int64_t kTapeBatch = 64;

void check_model(const InspectedModel& m) {
  if (!m.net || !m.weights) throw DefenseError("no model to inspect");
}

std::vector<std::int64_t> iota_range(std::int64_t start, std::int64_t stop) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(stop - start));
  std::iota(idx.begin(), idx.end(), start);
  return idx;
}

std::vector<double> softmax_row(const float* logits, std::int64_t c) {
  std::vector<double> p(static_cast<std::size_t>(c));
  const double mx = *std::max_element(logits, logits + c);
  double z = 0.0;
  for (std::int64_t k = 0; k < c; ++k) z += p[static_cast<std::size_t>(k)] = std::exp(logits[k] - mx);
  for (auto& v : p) v /= z;
  return p;
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

// ---------------------------------------------------------------------------
// Fine-Pruning

std::vector<double> mean_feature_activation(const InspectedModel& model, const LabeledImageSet& set) {
  check_model(model);
  const auto& arch = model.net->arch();
  if (arch.feature_node < 0) throw DefenseError("model has no convolution feature layer");
  if (set.size() == 0) throw DefenseError("empty activation set");
  const auto channels = arch.nodes[static_cast<std::size_t>(arch.feature_node)].out_shape.at(0);
  std::vector<double> sum(static_cast<std::size_t>(channels), 0.0);
  std::int64_t count = 0;
  for (std::int64_t start = 0; start < set.size(); start += kTapeBatch) {
    const auto batch = gather_batch(set, iota_range(start, std::min(set.size(), start + kTapeBatch)));
    Tape<float> tape;
    model.net->forward(*model.weights, model.mask, batch.images, {}, &tape);
    const auto& a = tape.slots[static_cast<std::size_t>(arch.feature_node)].value;
    const auto n = a.dim(0), plane = a.numel() / (n * channels);
    for (std::int64_t s = 0; s < n; ++s) {
      for (std::int64_t ch = 0; ch < channels; ++ch) {
        const float* p = a.data() + (s * channels + ch) * plane;
        sum[static_cast<std::size_t>(ch)] += std::accumulate(p, p + plane, 0.0);
      }
    }
    count += n * plane;
  }
  for (auto& v : sum) v /= static_cast<double>(count);
  return sum;
}

std::vector<FinePruningPoint> fine_pruning_curve(const InspectedModel& model, const LabeledImageSet& ranking_set,
                                                 const LabeledImageSet& eval_set, const TriggerBank& bank,
                                                 double step) {
  if (!(step > 0.0 && step <= 1.0)) throw DefenseError("fine-pruning step must lie in (0,1]");
  if (eval_set.size() == 0) throw DefenseError("empty evaluation set");
  const auto mean = mean_feature_activation(model, ranking_set);
  const auto channels = static_cast<std::int64_t>(mean.size());
  std::vector<std::int64_t> order(mean.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) {
    return mean[static_cast<std::size_t>(a)] < mean[static_cast<std::size_t>(b)];
  });

  std::vector<int> targets(eval_set.labels.size());
  for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = target_for(eval_set.labels[i], bank.mode, bank.num_classes);

  const auto points = static_cast<int>(std::ceil(1.0 / step - 1e-9));
  std::vector<FinePruningPoint> curve;
  std::vector<std::uint8_t> keep(static_cast<std::size_t>(channels), 1);
  for (int s = 0; s <= points; ++s) {
    FinePruningPoint pt;
    pt.pruned_fraction = std::min(1.0, s * step);
    pt.channels_pruned = static_cast<std::int64_t>(std::nearbyint(pt.pruned_fraction * static_cast<double>(channels)));
    std::fill(keep.begin(), keep.end(), 1);
    for (std::int64_t i = 0; i < pt.channels_pruned; ++i) keep[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 0;
    const auto* k = pt.channels_pruned > 0 ? &keep : nullptr;
    const auto clean = predict(*model.net, *model.weights, model.mask, eval_set, nullptr, k);
    const auto poisoned = predict(*model.net, *model.weights, model.mask, eval_set, &bank, k);
    std::int64_t hit = 0, attack = 0;
    for (std::size_t i = 0; i < clean.size(); ++i) {
      hit += clean[i] == eval_set.labels[i];
      attack += poisoned[i] == targets[i];
    }
    pt.clean_accuracy = static_cast<double>(hit) / static_cast<double>(eval_set.size());
    pt.attack_success_rate = static_cast<double>(attack) / static_cast<double>(eval_set.size());
    curve.push_back(pt);
  }
  return curve;
}

// ---------------------------------------------------------------------------
// STRIP

double shannon_entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

std::vector<double> strip_entropy(const InspectedModel& model, const LabeledImageSet& probes,
                                  const LabeledImageSet& overlays, const StripConfig& cfg, const TriggerBank* bank) {
  check_model(model);
  if (overlays.size() == 0) throw DefenseError("empty overlay set");
  if (cfg.overlays < 1) throw DefenseError("STRIP needs at least one overlay");
  if (!(overlays.shape == probes.shape)) throw DefenseError("probe and overlay shapes differ");
  const auto per = probes.shape.numel();
  const auto& s = probes.shape;
  const auto c = model.net->arch().num_classes;
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(probes.size()));
  for (std::int64_t i = 0; i < probes.size(); ++i) {
    auto probe = gather_batch(probes, std::vector<std::int64_t>{i});
    if (bank) {
      const int t = target_for(probe.labels[0], bank->mode, bank->num_classes);
      probe.images = apply_trigger(probe.images, *bank, std::vector<int>{t});
    }
    Rng rng(substream_seed(cfg.seed, "strip/" + std::to_string(i)));
    Tensor blended({cfg.overlays, s.channels, s.height, s.width});
    for (int o = 0; o < cfg.overlays; ++o) {
      const auto b = overlays.image(static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(overlays.size()))));
      float* dst = blended.data() + o * per;
      for (std::int64_t j = 0; j < per; ++j) {
        const double v = cfg.blend * probe.images[j] + (1.0 - cfg.blend) * b[static_cast<std::size_t>(j)];
        dst[j] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
    const auto logits = model.net->forward(*model.weights, model.mask, blended);
    double total = 0.0;
    for (int o = 0; o < cfg.overlays; ++o) total += shannon_entropy(softmax_row(logits.data() + o * c, c));
    out.push_back(total / cfg.overlays);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Neural Cleanse

double anomaly_index(std::span<const double> l1_norms) {
  if (l1_norms.empty()) throw DefenseError("anomaly index of no classes");
  std::vector<double> v(l1_norms.begin(), l1_norms.end());
  const double med = median_of(v);
  std::vector<double> dev(v.size());
  std::transform(v.begin(), v.end(), dev.begin(), [&](double x) { return std::fabs(x - med); });
  const double mad = median_of(dev);
  const double num = std::fabs(*std::min_element(v.begin(), v.end()) - med);
  const double den = kMadConsistency * mad;
  if (den == 0.0) return num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return num / den;
}

ReversedTrigger reverse_engineer_trigger(const InspectedModel& model, const LabeledImageSet& clean, int target,
                                         const NeuralCleanseConfig& cfg) {
  check_model(model);
  if (clean.size() == 0) throw DefenseError("Neural Cleanse needs clean samples");
  const auto& shape = clean.shape;
  const auto hw = shape.height * shape.width;
  const auto per = shape.numel();
  const std::string tag = "neural_cleanse/" + std::to_string(target);

  Rng init(substream_seed(cfg.seed, tag + "/init"));
  auto to_param = [](double v) { return std::atanh((v - 0.5) * 2.0 * 0.999); };
  NamedTensors<float> params;
  params.add("mask", Tensor({shape.height, shape.width}));
  params.add("pattern", Tensor({shape.channels, shape.height, shape.width}));
  for (auto& v : params.at("mask").values()) v = static_cast<float>(to_param(init.uniform()));
  for (auto& v : params.at("pattern").values()) v = static_cast<float>(to_param(init.uniform()));

  auto squash = [](const Tensor& raw) {
    Tensor out(raw.shape());
    for (std::int64_t i = 0; i < raw.numel(); ++i) out[i] = static_cast<float>(0.5 * (std::tanh(raw[i]) + 1.0));
    return out;
  };

  Adam<float> opt(cfg.lr, 0.5, 0.9);
  ReversedTrigger best;
  best.target = target;
  best.mask_l1 = std::numeric_limits<double>::infinity();
  double lambda = cfg.initial_lambda;
  int above = 0, below = 0;
  ReversedTrigger last;
  last.target = target;

  const auto subset_order = Rng(substream_seed(cfg.seed, "neural_cleanse/subset")).permutation(clean.size());
  const auto n_used = std::min<std::int64_t>(cfg.samples, clean.size());
  const std::vector<std::int64_t> subset(subset_order.begin(), subset_order.begin() + n_used);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::int64_t hit = 0, seen = 0;
    for (const auto& local : epoch_batches(n_used, cfg.batch_size, substream_seed(cfg.seed, tag + "/order"), epoch)) {
      std::vector<std::int64_t> idx(local.size());
      for (std::size_t j = 0; j < local.size(); ++j) idx[j] = subset[static_cast<std::size_t>(local[j])];
      const auto batch = gather_batch(clean, idx);
      const auto n = batch.images.dim(0);
      const Tensor m = squash(params.at("mask"));
      const Tensor p = squash(params.at("pattern"));
      Tensor x(batch.images.shape());
      for (std::int64_t s = 0; s < n; ++s) {
        for (std::int64_t ch = 0; ch < shape.channels; ++ch) {
          for (std::int64_t q = 0; q < hw; ++q) {
            const auto j = s * per + ch * hw + q;
            x[j] = (1.0f - m[q]) * batch.images[j] + m[q] * p[ch * hw + q];
          }
        }
      }
      Tape<float> tape;
      const auto logits = model.net->forward(*model.weights, model.mask, x, {}, &tape);
      const std::vector<int> targets(static_cast<std::size_t>(n), target);
      Tensor g_logits;
      const double ce = cross_entropy(logits, targets, &g_logits);
      const double l1 = std::accumulate(m.values().begin(), m.values().end(), 0.0);
      if (!std::isfinite(ce + lambda * l1)) {
        last.diverged = true;
        std::fprintf(stderr, "warning: Neural Cleanse diverged for class %d at epoch %d; class skipped\n", target, epoch);
        return last;
      }
      for (auto pred : argmax_rows(logits)) hit += pred == target;
      seen += n;

      BackwardOptions bopts;
      bopts.params = false;
      bopts.input = true;
      const auto grads = model.net->backward(*model.weights, tape, g_logits, bopts);
      NamedTensors<float> g;
      g.add("mask", Tensor(m.shape()));
      g.add("pattern", Tensor(p.shape()));
      auto& gm = g.at("mask");
      auto& gp = g.at("pattern");
      for (std::int64_t s = 0; s < n; ++s) {
        for (std::int64_t ch = 0; ch < shape.channels; ++ch) {
          for (std::int64_t q = 0; q < hw; ++q) {
            const auto j = s * per + ch * hw + q;
            const float gx = grads.input[j];
            gm[q] += gx * (p[ch * hw + q] - batch.images[j]);
            gp[ch * hw + q] += gx * m[q];
          }
        }
      }
      const auto& raw_m = params.at("mask");
      const auto& raw_p = params.at("pattern");
      for (std::int64_t q = 0; q < gm.numel(); ++q) {
        const double t = std::tanh(raw_m[q]);
        gm[q] = static_cast<float>((gm[q] + lambda) * 0.5 * (1.0 - t * t));
      }
      for (std::int64_t q = 0; q < gp.numel(); ++q) {
        const double t = std::tanh(raw_p[q]);
        gp[q] = static_cast<float>(gp[q] * 0.5 * (1.0 - t * t));
      }
      opt.step(params, g);
    }

    const double acc = static_cast<double>(hit) / static_cast<double>(std::max<std::int64_t>(1, seen));
    last.mask = squash(params.at("mask"));
    last.pattern = squash(params.at("pattern"));
    last.mask_l1 = std::accumulate(last.mask.values().begin(), last.mask.values().end(), 0.0);
    last.attack_accuracy = acc;
    last.lambda = lambda;
    if (acc >= cfg.target_accuracy && last.mask_l1 < best.mask_l1) {
      best = last;
      best.reached_target = true;
    }
    if (acc >= cfg.target_accuracy) {
      below = 0;
      if (++above >= cfg.patience) {
        lambda *= 2.0;
        above = 0;
      }
    } else {
      above = 0;
      if (++below >= cfg.patience) {
        lambda /= 2.0;
        below = 0;
      }
    }
  }
  return best.reached_target ? best : last;
}

NeuralCleanseReport neural_cleanse(const InspectedModel& model, const LabeledImageSet& clean,
                                   const NeuralCleanseConfig& cfg) {
  check_model(model);
  NeuralCleanseReport report;
  std::vector<double> norms;
  std::vector<int> classes;
  for (int t = 0; t < model.net->arch().num_classes; ++t) {
    report.classes.push_back(reverse_engineer_trigger(model, clean, t, cfg));
    if (!report.classes.back().diverged) {
      norms.push_back(report.classes.back().mask_l1);
      classes.push_back(t);
    }
  }
  if (norms.empty()) throw DefenseError("Neural Cleanse diverged for every class");
  report.anomaly_index = anomaly_index(norms);
  report.suspect_class = classes[static_cast<std::size_t>(std::min_element(norms.begin(), norms.end()) - norms.begin())];
  report.flagged = report.anomaly_index > kAnomalyThreshold;
  return report;
}

// ---------------------------------------------------------------------------
// GradCAM

Tensor gradcam_heatmap(const InspectedModel& model, const Tensor& image, int class_id) {
  check_model(model);
  const auto& arch = model.net->arch();
  if (arch.feature_node < 0) throw DefenseError("model has no convolution feature layer to attribute");
  if (class_id < 0 || class_id >= arch.num_classes) throw DefenseError("class id out of range");
  const auto& in = arch.input;
  Tensor x = image;
  x.reshape({1, in.channels, in.height, in.width});
  Tape<float> tape;
  const auto logits = model.net->forward(*model.weights, model.mask, x, {}, &tape);
  Tensor g(logits.shape());
  g[class_id] = 1.0f;
  BackwardOptions bopts;
  bopts.params = false;
  bopts.feature = true;
  const auto grads = model.net->backward(*model.weights, tape, g, bopts);
  const auto& a = tape.slots[static_cast<std::size_t>(arch.feature_node)].value;
  if (grads.feature.empty()) throw DefenseError("class logit does not depend on the feature layer");
  const auto k = a.dim(1), h = a.dim(2), w = a.dim(3);
  cv::Mat cam(static_cast<int>(h), static_cast<int>(w), CV_32F, cv::Scalar(0));
  for (std::int64_t ch = 0; ch < k; ++ch) {
    const float* gp = grads.feature.data() + ch * h * w;
    const double alpha = std::accumulate(gp, gp + h * w, 0.0) / static_cast<double>(h * w);
    const float* ap = a.data() + ch * h * w;
    for (std::int64_t q = 0; q < h * w; ++q) cam.at<float>(static_cast<int>(q / w), static_cast<int>(q % w)) += static_cast<float>(alpha * ap[q]);
  }
  cam = cv::max(cam, 0.0f);
  cv::Mat up;
  cv::resize(cam, up, cv::Size(static_cast<int>(in.width), static_cast<int>(in.height)), 0, 0, cv::INTER_LINEAR);
  double lo = 0, hi = 0;
  cv::minMaxLoc(up, &lo, &hi);
  Tensor out({in.height, in.width});
  if (!(hi - lo > 1e-12)) return out;
  for (std::int64_t r = 0; r < in.height; ++r) {
    for (std::int64_t c = 0; c < in.width; ++c) {
      out[r * in.width + c] = static_cast<float>((up.at<float>(static_cast<int>(r), static_cast<int>(c)) - lo) / (hi - lo));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Planted patch backdoor

void stamp_patch(Tensor& images, int patch_size) {
  const auto n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  if (patch_size < 1 || patch_size > h || patch_size > w) throw DefenseError("patch does not fit the image");
  for (std::int64_t s = 0; s < n; ++s) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      for (int r = 0; r < patch_size; ++r) {
        for (int q = 0; q < patch_size; ++q) {
          images[((s * c + ch) * h + (h - patch_size + r)) * w + (w - patch_size + q)] = (r + q) % 2 ? 0.0f : 1.0f;
        }
      }
    }
  }
}

ModelWeights train_patch_backdoor(const Network<float>& net, const ModelWeights& initial,
                                  const LabeledImageSet& train, const PatchBackdoorConfig& cfg) {
  ModelWeights w = initial;
  Adam<float> opt(cfg.lr);
  Rng rng(substream_seed(cfg.seed, "patch_backdoor"));
  const auto per = train.shape.numel();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& idx : epoch_batches(train.size(), cfg.batch_size, substream_seed(cfg.seed, "patch_order"), epoch)) {
      auto batch = gather_batch(train, idx);
      for (std::int64_t s = 0; s < batch.images.dim(0); ++s) {
        if (rng.uniform() >= cfg.poison_rate) continue;
        Tensor one({1, train.shape.channels, train.shape.height, train.shape.width},
                   std::vector<float>(batch.images.data() + s * per, batch.images.data() + (s + 1) * per));
        stamp_patch(one, cfg.patch_size);
        std::copy(one.values().begin(), one.values().end(), batch.images.data() + s * per);
        batch.labels[static_cast<std::size_t>(s)] = cfg.target;
      }
      ForwardOptions<float> fwd;
      fwd.norm = NormMode::kTrain;
      fwd.running_stats = &w.buffers;
      Tape<float> tape;
      const auto logits = net.forward(w, nullptr, batch.images, fwd, &tape);
      Tensor g;
      const double loss = cross_entropy(logits, batch.labels, &g);
      if (!std::isfinite(loss)) throw TrainingDivergence("patch backdoor training diverged");
      opt.step(w.params, net.backward(w, tape, g).params);
    }
  }
  w.provenance = Provenance::kFinetunedBackdoor;
  return w;
}

double patch_attack_success_rate(const InspectedModel& model, const LabeledImageSet& test,
                                 const PatchBackdoorConfig& cfg) {
  check_model(model);
  std::int64_t hit = 0;
  for (std::int64_t start = 0; start < test.size(); start += kEvalBatch) {
    auto batch = gather_batch(test, iota_range(start, std::min(test.size(), start + kEvalBatch)));
    stamp_patch(batch.images, cfg.patch_size);
    for (int p : argmax_rows(model.net->forward(*model.weights, model.mask, batch.images))) hit += p == cfg.target;
  }
  return static_cast<double>(hit) / static_cast<double>(test.size());
}

// ---------------------------------------------------------------------------
// Reports

nlohmann::json to_json(const std::vector<FinePruningPoint>& curve) {
  nlohmann::json points = nlohmann::json::array();
  for (const auto& p : curve) {
    points.push_back({{"pruned_fraction", p.pruned_fraction},
                      {"channels_pruned", p.channels_pruned},
                      {"clean_acc", p.clean_accuracy},
                      {"asr", p.attack_success_rate}});
  }
  return {{"defense", "finepruning"}, {"curve", points}};
}

nlohmann::json strip_json(const std::vector<double>& clean, const std::vector<double>& poisoned) {
  auto mean = [](const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  return {{"defense", "strip"},
          {"clean_entropy", clean},
          {"poisoned_entropy", poisoned},
          {"clean_mean", mean(clean)},
          {"poisoned_mean", mean(poisoned)}};
}

nlohmann::json to_json(const NeuralCleanseReport& report) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : report.classes) {
    classes.push_back({{"target", c.target},
                       {"mask_l1", c.mask_l1},
                       {"attack_acc", c.attack_accuracy},
                       {"lambda", c.lambda},
                       {"reached_target", c.reached_target},
                       {"diverged", c.diverged}});
  }
  return {{"defense", "neuralcleanse"},
          {"classes", classes},
          {"anomaly_index", std::isfinite(report.anomaly_index) ? nlohmann::json(report.anomaly_index)
                                                                : nlohmann::json("inf")},
          {"threshold", kAnomalyThreshold},
          {"suspect_class", report.suspect_class},
          {"flagged", report.flagged}};
}

// ---------------------------------------------------------------------------
// Figures

namespace {

constexpr int kPlotW = 640, kPlotH = 400, kMargin = 50;

cv::Mat blank_plot() { return cv::Mat(kPlotH, kPlotW, CV_8UC3, cv::Scalar(255, 255, 255)); }

cv::Point plot_point(double x, double y, double x_max, double y_max) {
  const double px = kMargin + (kPlotW - 2 * kMargin) * (x / x_max);
  const double py = kPlotH - kMargin - (kPlotH - 2 * kMargin) * (y / y_max);
  return {static_cast<int>(std::lround(px)), static_cast<int>(std::lround(py))};
}

void draw_axes(cv::Mat& img, const std::string& x_label, const std::string& y_label) {
  const cv::Scalar black(0, 0, 0);
  cv::line(img, {kMargin, kPlotH - kMargin}, {kPlotW - kMargin, kPlotH - kMargin}, black, 1);
  cv::line(img, {kMargin, kMargin}, {kMargin, kPlotH - kMargin}, black, 1);
  cv::putText(img, x_label, {kPlotW / 2 - 60, kPlotH - 15}, cv::FONT_HERSHEY_SIMPLEX, 0.45, black, 1);
  cv::putText(img, y_label, {5, kMargin - 15}, cv::FONT_HERSHEY_SIMPLEX, 0.45, black, 1);
}

void save_png(const std::filesystem::path& path, const cv::Mat& img) {
  if (!cv::imwrite(path.string(), img)) throw std::runtime_error("cannot write " + path.string());
}

cv::Mat to_bgr(const Tensor& image) {
  const auto c = image.dim(0), h = image.dim(1), w = image.dim(2);
  cv::Mat out(static_cast<int>(h), static_cast<int>(w), CV_8UC3);
  for (std::int64_t r = 0; r < h; ++r) {
    for (std::int64_t q = 0; q < w; ++q) {
      auto& px = out.at<cv::Vec3b>(static_cast<int>(r), static_cast<int>(q));
      for (int ch = 0; ch < 3; ++ch) {
        const auto src = c == 1 ? 0 : ch;
        px[2 - ch] = denormalize_pixel(image[(src * h + r) * w + q]);
      }
    }
  }
  return out;
}

}  // namespace

void write_fine_pruning_plot(const std::filesystem::path& path, const std::vector<FinePruningPoint>& curve) {
  auto img = blank_plot();
  draw_axes(img, "fraction of channels pruned", "rate");
  const cv::Scalar blue(200, 80, 0), red(0, 0, 220);
  for (std::size_t i = 1; i < curve.size(); ++i) {
    cv::line(img, plot_point(curve[i - 1].pruned_fraction, curve[i - 1].clean_accuracy, 1, 1),
             plot_point(curve[i].pruned_fraction, curve[i].clean_accuracy, 1, 1), blue, 2);
    cv::line(img, plot_point(curve[i - 1].pruned_fraction, curve[i - 1].attack_success_rate, 1, 1),
             plot_point(curve[i].pruned_fraction, curve[i].attack_success_rate, 1, 1), red, 2);
  }
  cv::putText(img, "clean accuracy", {kPlotW - 200, 30}, cv::FONT_HERSHEY_SIMPLEX, 0.45, blue, 1);
  cv::putText(img, "attack success rate", {kPlotW - 200, 45}, cv::FONT_HERSHEY_SIMPLEX, 0.45, red, 1);
  save_png(path, img);
}

void write_strip_histogram(const std::filesystem::path& path, const std::vector<double>& clean,
                           const std::vector<double>& poisoned, int num_classes) {
  constexpr int kBins = 30;
  const double top = std::log(static_cast<double>(std::max(2, num_classes)));
  auto histogram = [&](const std::vector<double>& v) {
    std::vector<double> h(kBins, 0.0);
    for (double e : v) h[static_cast<std::size_t>(std::clamp(static_cast<int>(e / top * kBins), 0, kBins - 1))] += 1.0;
    for (auto& x : h) x /= std::max<std::size_t>(1, v.size());
    return h;
  };
  const auto hc = histogram(clean), hp = histogram(poisoned);
  const double y_max = std::max(*std::max_element(hc.begin(), hc.end()), *std::max_element(hp.begin(), hp.end())) * 1.1 + 1e-9;
  auto img = blank_plot();
  draw_axes(img, "normalized entropy", "fraction of probes");
  const cv::Scalar blue(200, 80, 0), red(0, 0, 220);
  for (int b = 0; b < kBins; ++b) {
    const double x0 = static_cast<double>(b) / kBins, x1 = static_cast<double>(b + 1) / kBins;
    cv::rectangle(img, plot_point(x0, hc[b], 1, y_max), plot_point(x1, 0, 1, y_max), blue, 2);
    cv::rectangle(img, plot_point(x0, hp[b], 1, y_max), plot_point(x1, 0, 1, y_max), red, 1);
  }
  cv::putText(img, "clean probes", {kPlotW - 200, 30}, cv::FONT_HERSHEY_SIMPLEX, 0.45, blue, 1);
  cv::putText(img, "trojaned probes", {kPlotW - 200, 45}, cv::FONT_HERSHEY_SIMPLEX, 0.45, red, 1);
  save_png(path, img);
}

void write_neural_cleanse_plot(const std::filesystem::path& path, const NeuralCleanseReport& report) {
  auto img = blank_plot();
  draw_axes(img, "target class", "mask L1 norm");
  double y_max = 1e-9;
  for (const auto& c : report.classes) {
    if (!c.diverged) y_max = std::max(y_max, c.mask_l1 * 1.1);
  }
  const auto n = static_cast<double>(report.classes.size());
  for (std::size_t i = 0; i < report.classes.size(); ++i) {
    const auto& c = report.classes[i];
    if (c.diverged) continue;
    const cv::Scalar color = c.target == report.suspect_class ? cv::Scalar(0, 0, 220) : cv::Scalar(200, 80, 0);
    cv::rectangle(img, plot_point((i + 0.15) / n, c.mask_l1, 1, y_max), plot_point((i + 0.85) / n, 0, 1, y_max), color,
                  cv::FILLED);
  }
  char buf[64];
  std::snprintf(buf, sizeof(buf), "anomaly index %.3f (threshold %.1f)", report.anomaly_index, kAnomalyThreshold);
  cv::putText(img, buf, {kMargin + 10, 30}, cv::FONT_HERSHEY_SIMPLEX, 0.5, cv::Scalar(0, 0, 0), 1);
  save_png(path, img);
}

void write_gradcam_panel(const std::filesystem::path& path, const std::vector<Tensor>& images,
                         const std::vector<Tensor>& heatmaps) {
  if (images.size() != heatmaps.size() || images.empty()) throw DefenseError("gradcam panel needs image/heatmap pairs");
  constexpr int kScale = 6;
  std::vector<cv::Mat> tiles;
  for (std::size_t i = 0; i < images.size(); ++i) {
    cv::Mat rgb = to_bgr(images[i]);
    const auto& hm = heatmaps[i];
    cv::Mat gray(static_cast<int>(hm.dim(0)), static_cast<int>(hm.dim(1)), CV_8U);
    for (int r = 0; r < gray.rows; ++r) {
      for (int q = 0; q < gray.cols; ++q) gray.at<std::uint8_t>(r, q) = denormalize_pixel(hm[r * gray.cols + q]);
    }
    cv::Mat color, overlay;
    cv::applyColorMap(gray, color, cv::COLORMAP_JET);
    cv::addWeighted(rgb, 0.5, color, 0.5, 0.0, overlay);
    cv::Mat pair;
    cv::hconcat(rgb, overlay, pair);
    cv::resize(pair, pair, {}, kScale, kScale, cv::INTER_NEAREST);
    tiles.push_back(pair);
  }
  cv::Mat panel;
  cv::vconcat(tiles, panel);
  save_png(path, panel);
}

void write_image_png(const std::filesystem::path& path, const Tensor& image, int scale) {
  cv::Mat img = to_bgr(image);
  if (scale > 1) cv::resize(img, img, {}, scale, scale, cv::INTER_NEAREST);
  save_png(path, img);
}

}  // namespace ribac
