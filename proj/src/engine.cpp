#include "ribac/engine.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

#include "ribac/optim.hpp"
#include "ribac/rng.hpp"

namespace ribac {

void RibacConfig::validate() const {
  if (epochs_step1 < 0 || epochs_step2 < 0) throw ConfigError("epochs must be non-negative");
  if (!(lr_scores > 0 && lr_triggers > 0 && lr_weights > 0)) throw ConfigError("learning rates must be positive");
  if (!(beta >= 0)) throw ConfigError("beta must be >= 0");
  if (!(epsilon > 0)) throw ConfigError("epsilon must be positive");
  if (!(keep_fraction > 0 && keep_fraction <= 1)) throw ConfigError("keep_fraction must lie in (0,1]");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
}

template <typename T>
double cross_entropy(const TensorT<T>& logits, std::span<const int> labels, TensorT<T>* grad, double scale) {
  const auto n = logits.dim(0), c = logits.dim(1);
  if (static_cast<std::size_t>(n) != labels.size()) throw ShapeError("cross entropy: logits/labels size mismatch");
  if (grad) *grad = TensorT<T>(logits.shape());
  double total = 0.0;
  std::vector<double> p(static_cast<std::size_t>(c));
  for (std::int64_t i = 0; i < n; ++i) {
    const T* row = logits.data() + i * c;
    const double mx = static_cast<double>(*std::max_element(row, row + c));
    double z = 0.0;
    for (std::int64_t k = 0; k < c; ++k) {
      p[static_cast<std::size_t>(k)] = std::exp(static_cast<double>(row[k]) - mx);
      z += p[static_cast<std::size_t>(k)];
    }
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c) throw ShapeError("cross entropy: label out of range");
    total += std::log(z) + mx - static_cast<double>(row[y]);
    if (grad) {
      T* g = grad->data() + i * c;
      for (std::int64_t k = 0; k < c; ++k) {
        const double pk = p[static_cast<std::size_t>(k)] / z - (k == y ? 1.0 : 0.0);
        g[k] = static_cast<T>(scale * pk / static_cast<double>(n));
      }
    }
  }
  return total / static_cast<double>(n);
}

template <typename T>
LossResult<T> unified_loss(const Network<T>& net, const ModelWeightsT<T>& weights, const PruneMask* mask,
                           const TensorT<T>& x, std::span<const int> labels, const TriggerBankT<T>& bank,
                           std::span<const int> targets, double beta, const LossOptions<T>& options) {
  if (labels.size() != targets.size()) throw ShapeError("labels and targets differ in length");
  // Clean and poisoned copies go through one forward pass so that batch
  // statistics in training mode see both halves.
  const auto poisoned = apply_trigger(x, bank, targets);
  const std::int64_t n = x.dim(0);
  const std::int64_t per = n ? x.numel() / n : 0;
  Shape joint_shape = x.shape();
  joint_shape[0] = 2 * n;
  TensorT<T> joint(joint_shape);
  std::copy(x.values().begin(), x.values().end(), joint.data());
  std::copy(poisoned.values().begin(), poisoned.values().end(), joint.data() + n * per);

  ForwardOptions<T> fwd;
  fwd.norm = options.norm;
  fwd.running_stats = options.running_stats;
  Tape<T> tape;
  const auto logits = net.forward(weights, mask, joint, fwd, options.gradients ? &tape : nullptr);
  const std::int64_t c = logits.dim(1);
  TensorT<T> clean_logits({n, c}), trojan_logits({n, c});
  std::copy(logits.data(), logits.data() + n * c, clean_logits.data());
  std::copy(logits.data() + n * c, logits.data() + 2 * n * c, trojan_logits.data());

  LossResult<T> out;
  TensorT<T> g_clean, g_trojan;
  out.clean = cross_entropy(clean_logits, labels, options.gradients ? &g_clean : nullptr, 1.0);
  out.trojan = cross_entropy(trojan_logits, targets, options.gradients ? &g_trojan : nullptr, beta);
  out.total = out.clean + beta * out.trojan;
  if (!std::isfinite(out.total)) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "non-finite loss (clean=%g, trojan=%g, beta=%g)", out.clean, out.trojan, beta);
    throw TrainingDivergence(buf);
  }
  if (!options.gradients) return out;

  TensorT<T> grad_logits(logits.shape());
  std::copy(g_clean.values().begin(), g_clean.values().end(), grad_logits.data());
  std::copy(g_trojan.values().begin(), g_trojan.values().end(), grad_logits.data() + n * c);
  BackwardOptions bopts;
  bopts.input = options.input_gradients;
  auto grads = net.backward(weights, tape, grad_logits, bopts);
  out.param_grad = std::move(grads.params);
  if (options.input_gradients) {
    TensorT<T> g_poisoned(x.shape());
    std::copy(grads.input.data() + n * per, grads.input.data() + 2 * n * per, g_poisoned.data());
    out.trigger_grad = trigger_gradient(x, bank, targets, g_poisoned);
  } else {
    out.trigger_grad = zeros_like<T>(bank.patterns);
  }
  return out;
}

template double cross_entropy(const TensorT<float>&, std::span<const int>, TensorT<float>*, double);
template double cross_entropy(const TensorT<double>&, std::span<const int>, TensorT<double>*, double);
template LossResult<float> unified_loss(const Network<float>&, const ModelWeightsT<float>&, const PruneMask*,
                                        const TensorT<float>&, std::span<const int>, const TriggerBankT<float>&,
                                        std::span<const int>, double, const LossOptions<float>&);
template LossResult<double> unified_loss(const Network<double>&, const ModelWeightsT<double>&, const PruneMask*,
                                         const TensorT<double>&, std::span<const int>, const TriggerBankT<double>&,
                                         std::span<const int>, double, const LossOptions<double>&);

std::string history_to_csv(const std::vector<EpochRecord>& history) {
  std::string out = "stage,epoch,loss,clean_loss,trojan_loss,clean_acc,asr\n";
  char buf[256];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof(buf), "%s,%d,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.stage.c_str(), r.epoch, r.loss,
                  r.clean_loss, r.trojan_loss, r.clean_accuracy, r.attack_success_rate);
    out += buf;
  }
  return out;
}

namespace {

std::vector<int> batch_targets(const std::vector<int>& labels, const RibacConfig& cfg, int num_classes) {
  return make_targets(labels, cfg.mode, num_classes).targets;
}

void check_trigger_budget(const TriggerBank& bank) {
  if (bank.max_abs() > bank.epsilon) throw std::logic_error("trigger left its L-infinity budget");
}

void check_mask_budget(const PruneMask& mask, double keep_fraction) {
  if (mask.kept() != expected_kept(mask, keep_fraction)) throw std::logic_error("mask violates its L0 budget");
}

struct EpochAccumulator {
  double loss = 0, clean = 0, trojan = 0;
  std::int64_t count = 0;
  template <typename T>
  void add(const LossResult<T>& r, std::int64_t n) {
    loss += r.total * static_cast<double>(n);
    clean += r.clean * static_cast<double>(n);
    trojan += r.trojan * static_cast<double>(n);
    count += n;
  }
  EpochRecord finish(const std::string& stage, int epoch) const {
    EpochRecord rec;
    rec.stage = stage;
    rec.epoch = epoch;
    if (count > 0) {
      rec.loss = loss / static_cast<double>(count);
      rec.clean_loss = clean / static_cast<double>(count);
      rec.trojan_loss = trojan / static_cast<double>(count);
    }
    return rec;
  }
};

void evaluate_epoch(EpochRecord& rec, const Network<float>& net, const ModelWeights& w, const PruneMask* mask,
                    const TriggerBank& bank, const TrainSets& data, const RibacConfig& cfg) {
  if (!cfg.evaluate_epochs || !data.test) return;
  rec.clean_accuracy = clean_accuracy(net, w, mask, *data.test);
  rec.attack_success_rate = attack_success_rate(net, w, mask, *data.test, bank, cfg.asr_exclude_target);
}

std::uint64_t order_seed(const RibacConfig& cfg, const std::string& stage) {
  return substream_seed(cfg.seed, "data_order/" + stage);
}

// Gradient for the raw parameter: masked entries receive dJ/dŵ ⊙ M.
void mask_gradients(NamedTensors<float>& grads, const PruneMask* mask) {
  if (!mask) return;
  for (const auto& [name, m] : mask->layers) {
    auto& g = grads.at(name);
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      if (!m[i]) g[i] = 0.0f;
    }
  }
}

}  // namespace

Step1Result step1_train(const Network<float>& net, const ModelWeights& pretrained, ImportanceScores scores,
                        TriggerBank bank, const TrainSets& data, const RibacConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  if (!data.train) throw std::invalid_argument("step1_train needs training data");
  const auto frozen = checksum(pretrained.params) ^ checksum(pretrained.buffers);
  Adam<float> score_opt(cfg.lr_scores), trigger_opt(cfg.lr_triggers);
  Step1Result out;
  const int classes = net.arch().num_classes;
  for (int epoch = 0; epoch < cfg.epochs_step1; ++epoch) {
    EpochAccumulator acc;
    for (const auto& idx : epoch_batches(data.train->size(), cfg.batch_size, order_seed(cfg, "step1"), epoch)) {
      const Batch batch = gather_batch(*data.train, idx);
      const auto targets = batch_targets(batch.labels, cfg, classes);
      const PruneMask mask = generate_mask(scores, cfg.keep_fraction);
      check_mask_budget(mask, cfg.keep_fraction);
      LossOptions<float> opts;
      opts.norm = NormMode::kInference;
      const auto res = unified_loss(net, pretrained, &mask, batch.images, batch.labels, bank, targets, cfg.beta, opts);
      const auto score_grad = ste_score_grad(pretrained.params, mask, res.param_grad);
      score_opt.step(scores.tensors, score_grad);
      trigger_opt.step(bank.patterns, res.trigger_grad);
      project_triggers(bank);
      check_trigger_budget(bank);
      acc.add(res, static_cast<std::int64_t>(idx.size()));
    }
    auto rec = acc.finish("step1", epoch);
    const PruneMask mask = generate_mask(scores, cfg.keep_fraction);
    evaluate_epoch(rec, net, pretrained, &mask, bank, data, cfg);
    out.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  if ((checksum(pretrained.params) ^ checksum(pretrained.buffers)) != frozen) {
    throw std::logic_error("pretrained weights changed during step 1");
  }
  out.mask = generate_mask(scores, cfg.keep_fraction);
  out.scores = std::move(scores);
  out.bank = std::move(bank);
  return out;
}

Step2Result baseline_backdoor_train(const Network<float>& net, const ModelWeights& initial, const PruneMask* mask,
                                    TriggerBank bank, const TrainSets& data, const RibacConfig& cfg, int epochs,
                                    const std::string& stage, const EpochCallback& on_epoch) {
  cfg.validate();
  if (!data.train) throw std::invalid_argument("backdoor training needs training data");
  if (mask) net.check_mask(*mask);
  ModelWeights w = initial;
  Adam<float> weight_opt(cfg.lr_weights), trigger_opt(cfg.lr_triggers);
  Step2Result out;
  const int classes = net.arch().num_classes;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    EpochAccumulator acc;
    for (const auto& idx : epoch_batches(data.train->size(), cfg.batch_size, order_seed(cfg, stage), epoch)) {
      const Batch batch = gather_batch(*data.train, idx);
      const auto targets = batch_targets(batch.labels, cfg, classes);
      LossOptions<float> opts;
      opts.norm = NormMode::kTrain;
      opts.running_stats = &w.buffers;
      auto res = unified_loss(net, w, mask, batch.images, batch.labels, bank, targets, cfg.beta, opts);
      mask_gradients(res.param_grad, mask);
      weight_opt.step(w.params, res.param_grad);
      trigger_opt.step(bank.patterns, res.trigger_grad);
      project_triggers(bank);
      check_trigger_budget(bank);
      acc.add(res, static_cast<std::int64_t>(idx.size()));
    }
    auto rec = acc.finish(stage, epoch);
    evaluate_epoch(rec, net, w, mask, bank, data, cfg);
    out.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  if (mask) apply_mask(w, *mask);
  w.provenance = Provenance::kFinetunedBackdoor;
  out.weights = std::move(w);
  out.bank = std::move(bank);
  return out;
}

Step2Result step2_train(const Network<float>& net, const ModelWeights& pretrained, const PruneMask& mask,
                        TriggerBank bank, const TrainSets& data, const RibacConfig& cfg, const EpochCallback& on_epoch) {
  check_mask_budget(mask, cfg.keep_fraction);
  return baseline_backdoor_train(net, pretrained, &mask, std::move(bank), data, cfg, cfg.epochs_step2, "step2",
                                 on_epoch);
}

BackdooredSparseModel run_ribac(const Network<float>& net, const ModelWeights& pretrained, const TrainSets& data,
                                const RibacConfig& cfg, const EpochCallback& on_epoch) {
  BackdooredSparseModel out;
  out.config = cfg;
  const auto& shape = data.train->shape;
  Step1Result s1;
  try {
    cfg.validate();
    net.check_weights(pretrained);
    auto scores = score_init(pretrained, net.prunable(), cfg.score_init);
    auto bank = init_triggers(shape, cfg.mode, net.arch().num_classes, cfg.epsilon, cfg.seed);
    s1 = step1_train(net, pretrained, std::move(scores), std::move(bank), data, cfg, on_epoch);
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError("step1", e.what());
  }
  if (data.test) {
    out.step1_clean_accuracy = clean_accuracy(net, pretrained, &s1.mask, *data.test);
    out.step1_attack_success_rate = attack_success_rate(net, pretrained, &s1.mask, *data.test, s1.bank,
                                                        cfg.asr_exclude_target);
  }
  Step2Result s2;
  try {
    s2 = step2_train(net, pretrained, s1.mask, std::move(s1.bank), data, cfg, on_epoch);
  } catch (const std::exception& e) {
    throw StageError("step2", e.what());
  }
  out.history = std::move(s1.history);
  out.history.insert(out.history.end(), s2.history.begin(), s2.history.end());
  out.weights = std::move(s2.weights);
  out.bank = std::move(s2.bank);
  out.mask = std::move(s1.mask);
  out.scores = std::move(s1.scores);
  return out;
}

BackdooredSparseModel single_step_train(const Network<float>& net, const ModelWeights& pretrained,
                                        const TrainSets& data, const RibacConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  BackdooredSparseModel out;
  out.config = cfg;
  ModelWeights w = pretrained;
  auto scores = score_init(pretrained, net.prunable(), cfg.score_init);
  auto bank = init_triggers(data.train->shape, cfg.mode, net.arch().num_classes, cfg.epsilon, cfg.seed);
  Adam<float> score_opt(cfg.lr_scores), trigger_opt(cfg.lr_triggers), weight_opt(cfg.lr_weights);
  const int classes = net.arch().num_classes;
  const int epochs = cfg.total_epochs();
  for (int epoch = 0; epoch < epochs; ++epoch) {
    EpochAccumulator acc;
    for (const auto& idx : epoch_batches(data.train->size(), cfg.batch_size, order_seed(cfg, "single"), epoch)) {
      const Batch batch = gather_batch(*data.train, idx);
      const auto targets = batch_targets(batch.labels, cfg, classes);
      const PruneMask mask = generate_mask(scores, cfg.keep_fraction);
      check_mask_budget(mask, cfg.keep_fraction);
      LossOptions<float> opts;
      opts.norm = NormMode::kTrain;
      opts.running_stats = &w.buffers;
      auto res = unified_loss(net, w, &mask, batch.images, batch.labels, bank, targets, cfg.beta, opts);
      const auto score_grad = ste_score_grad(w.params, mask, res.param_grad);
      mask_gradients(res.param_grad, &mask);
      score_opt.step(scores.tensors, score_grad);
      weight_opt.step(w.params, res.param_grad);
      trigger_opt.step(bank.patterns, res.trigger_grad);
      project_triggers(bank);
      check_trigger_budget(bank);
      acc.add(res, static_cast<std::int64_t>(idx.size()));
    }
    auto rec = acc.finish("single", epoch);
    const PruneMask mask = generate_mask(scores, cfg.keep_fraction);
    evaluate_epoch(rec, net, w, &mask, bank, data, cfg);
    out.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  out.mask = generate_mask(scores, cfg.keep_fraction);
  apply_mask(w, out.mask);
  w.provenance = Provenance::kFinetunedBackdoor;
  out.weights = std::move(w);
  out.bank = std::move(bank);
  out.scores = std::move(scores);
  return out;
}

std::string to_string(Method m) {
  switch (m) {
    case Method::kRibac: return "ribac";
    case Method::kStep1Only: return "step1_only";
    case Method::kSingleStep: return "single_step";
    case Method::kPThenBRandom: return "p2b_random";
    case Method::kPThenBPretrained: return "p2b_pretrained";
    case Method::kBThenP: return "b2p";
    case Method::kL1Prune: return "l1_prune";
    case Method::kScorePrune: return "score_prune";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  for (auto m : {Method::kRibac, Method::kStep1Only, Method::kSingleStep, Method::kPThenBRandom,
                 Method::kPThenBPretrained, Method::kBThenP, Method::kL1Prune, Method::kScorePrune}) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("unknown method: " + name);
}

namespace {

MethodOutcome finish_outcome(Method method, const Network<float>& net, ModelWeights weights, PruneMask mask,
                             TriggerBank bank, std::vector<EpochRecord> history, const TrainSets& data,
                             const RibacConfig& cfg) {
  MethodOutcome out;
  out.method = method;
  out.compression_ratio = compression_ratio(mask);
  if (data.test) {
    out.clean_accuracy = clean_accuracy(net, weights, &mask, *data.test);
    out.attack_success_rate = attack_success_rate(net, weights, &mask, *data.test, bank, cfg.asr_exclude_target);
  }
  out.weights = std::move(weights);
  out.mask = std::move(mask);
  out.bank = std::move(bank);
  out.history = std::move(history);
  return out;
}

}  // namespace

MethodOutcome pipeline_p_then_b(const Network<float>& net, const ModelWeights& pretrained, const TrainSets& data,
                                const RibacConfig& cfg, bool from_pretrained) {
  const ModelWeights start = from_pretrained ? pretrained : net.init_weights(substream_seed(cfg.seed, "p2b_init"));
  PruneMask mask = l1_global_mask(start, net.prunable(), cfg.keep_fraction);
  auto bank = init_triggers(data.train->shape, cfg.mode, net.arch().num_classes, cfg.epsilon, cfg.seed);
  auto res = baseline_backdoor_train(net, start, &mask, std::move(bank), data, cfg, cfg.total_epochs(),
                                     from_pretrained ? "p2b_pretrained" : "p2b_random");
  return finish_outcome(from_pretrained ? Method::kPThenBPretrained : Method::kPThenBRandom, net,
                        std::move(res.weights), std::move(mask), std::move(res.bank), std::move(res.history), data,
                        cfg);
}

MethodOutcome pipeline_b_then_p(const Network<float>& net, const ModelWeights& pretrained, const TrainSets& data,
                                const RibacConfig& cfg, const Step2Result* dense_backdoored) {
  Step2Result local;
  if (!dense_backdoored) {
    auto bank = init_triggers(data.train->shape, cfg.mode, net.arch().num_classes, cfg.epsilon, cfg.seed);
    local = baseline_backdoor_train(net, pretrained, nullptr, std::move(bank), data, cfg, cfg.total_epochs(),
                                    "backdoor_dense");
    dense_backdoored = &local;
  }
  ModelWeights w = dense_backdoored->weights;
  PruneMask mask = l1_global_mask(w, net.prunable(), cfg.keep_fraction);
  apply_mask(w, mask);
  return finish_outcome(Method::kBThenP, net, std::move(w), std::move(mask), dense_backdoored->bank,
                        dense_backdoored->history, data, cfg);
}

MethodOutcome pruning_only(const Network<float>& net, const ModelWeights& pretrained, const TrainSets& data,
                           const RibacConfig& cfg, Method which) {
  RibacConfig clean_cfg = cfg;
  clean_cfg.beta = 0.0;
  if (which == Method::kL1Prune) {
    PruneMask mask = l1_global_mask(pretrained, net.prunable(), cfg.keep_fraction);
    auto bank = init_triggers(data.train->shape, cfg.mode, net.arch().num_classes, cfg.epsilon, cfg.seed);
    auto res = baseline_backdoor_train(net, pretrained, &mask, std::move(bank), data, clean_cfg, cfg.total_epochs(),
                                       "l1_finetune");
    return finish_outcome(which, net, std::move(res.weights), std::move(mask), std::move(res.bank),
                          std::move(res.history), data, cfg);
  }
  if (which == Method::kScorePrune) {
    auto model = run_ribac(net, pretrained, data, clean_cfg);
    return finish_outcome(which, net, std::move(model.weights), std::move(model.mask), std::move(model.bank),
                          std::move(model.history), data, cfg);
  }
  throw std::invalid_argument("not a pruning-only method: " + to_string(which));
}

MethodOutcome run_method(Method method, const Network<float>& net, const ModelWeights& pretrained,
                         const TrainSets& data, const RibacConfig& cfg) {
  switch (method) {
    case Method::kRibac: {
      auto model = run_ribac(net, pretrained, data, cfg);
      return finish_outcome(method, net, std::move(model.weights), std::move(model.mask), std::move(model.bank),
                            std::move(model.history), data, cfg);
    }
    case Method::kStep1Only: {
      auto scores = score_init(pretrained, net.prunable(), cfg.score_init);
      auto bank = init_triggers(data.train->shape, cfg.mode, net.arch().num_classes, cfg.epsilon, cfg.seed);
      auto s1 = step1_train(net, pretrained, std::move(scores), std::move(bank), data, cfg);
      ModelWeights w = pretrained;
      apply_mask(w, s1.mask);
      w.provenance = Provenance::kFinetunedBackdoor;
      return finish_outcome(method, net, std::move(w), std::move(s1.mask), std::move(s1.bank), std::move(s1.history),
                            data, cfg);
    }
    case Method::kSingleStep: {
      auto model = single_step_train(net, pretrained, data, cfg);
      return finish_outcome(method, net, std::move(model.weights), std::move(model.mask), std::move(model.bank),
                            std::move(model.history), data, cfg);
    }
    case Method::kPThenBRandom: return pipeline_p_then_b(net, pretrained, data, cfg, false);
    case Method::kPThenBPretrained: return pipeline_p_then_b(net, pretrained, data, cfg, true);
    case Method::kBThenP: return pipeline_b_then_p(net, pretrained, data, cfg);
    case Method::kL1Prune:
    case Method::kScorePrune: return pruning_only(net, pretrained, data, cfg, method);
  }
  throw std::invalid_argument("unknown method");
}

}  // namespace ribac
