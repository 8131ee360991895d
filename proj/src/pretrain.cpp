#include <cmath>

#include "ribac/engine.hpp"
#include "ribac/evaluation.hpp"
#include "ribac/model.hpp"
#include "ribac/optim.hpp"
#include "ribac/rng.hpp"

namespace ribac {

PretrainResult pretrain_clean(const ModelSpec& spec, const LabeledImageSet& train, const LabeledImageSet& test,
                              const PretrainConfig& config) {
  if (config.epochs < 0 || config.batch_size < 1 || !(config.lr > 0)) {
    throw ConfigError("invalid pretraining configuration");
  }
  const Network<float> net(build_architecture(spec));
  PretrainResult out;
  out.weights = net.init_weights(config.seed);
  Sgd<float> opt(config.lr, config.momentum, config.weight_decay);
  const auto order_seed = substream_seed(config.seed, "data_order/pretrain");
  const auto per_epoch = (train.size() + config.batch_size - 1) / config.batch_size;
  const auto total_steps = per_epoch * config.epochs;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double loss_sum = 0.0;
    std::int64_t seen = 0;
    for (const auto& idx : epoch_batches(train.size(), config.batch_size, order_seed, epoch)) {
      Batch batch = gather_batch(train, idx);
      if (config.augment) augment_flip_crop(batch, 4, substream_seed(config.seed, "augment") ^ static_cast<std::uint64_t>(step));
      ForwardOptions<float> fwd;
      fwd.norm = NormMode::kTrain;
      fwd.running_stats = &out.weights.buffers;
      Tape<float> tape;
      const auto logits = net.forward(out.weights, nullptr, batch.images, fwd, &tape);
      Tensor grad;
      const double loss = cross_entropy(logits, batch.labels, &grad);
      if (!std::isfinite(loss)) {
        throw TrainingDivergence("pretraining loss became non-finite at epoch " + std::to_string(epoch));
      }
      const auto grads = net.backward(out.weights, tape, grad);
      opt.set_lr(cosine_lr(config.lr, step, total_steps));
      opt.step(out.weights.params, grads.params);
      loss_sum += loss * static_cast<double>(idx.size());
      seen += static_cast<std::int64_t>(idx.size());
      ++step;
    }
    out.epoch_loss.push_back(seen ? loss_sum / static_cast<double>(seen) : 0.0);
  }
  out.weights.provenance = Provenance::kPretrainedClean;
  if (test.size() > 0) out.test_accuracy = clean_accuracy(net, out.weights, nullptr, test);
  return out;
}

}  // namespace ribac
