#include "fud/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fud {

std::vector<std::vector<int>> epoch_batches(std::int64_t n, int batch_size,
                                            std::uint64_t seed) {
  if (batch_size < 1) {
    throw std::invalid_argument("epoch_batches: batch size must be >= 1");
  }
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  auto rng = rng::engine(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<int>> batches;
  for (std::int64_t at = 0; at < n; at += batch_size) {
    const auto end = std::min<std::int64_t>(at + batch_size, n);
    batches.emplace_back(order.begin() + at, order.begin() + end);
  }
  return batches;
}

std::vector<double> train_classifier(Classifier& model, const Dataset& train,
                                     const TrainConfig& config) {
  if (train.n() == 0) return {};
  Sgd opt{config.lr, config.momentum};
  const auto params = model.parameters();
  std::vector<double> epoch_loss;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto batches = epoch_batches(train.n(), config.batch_size,
                                       rng::derive(config.seed, epoch));
    double acc = 0.0;
    for (const auto& batch : batches) {
      Tensor x = stack_batch(train, batch);
      const std::vector<int> labels = batch_labels(train, batch);
      Tape tape;
      Tensor loss = tape.cross_entropy_loss(model.forward(tape, x), labels);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw DivergenceError("train_classifier: non-finite loss at epoch " +
                                  std::to_string(epoch),
                              epoch);
      }
      zero_grads(params);
      tape.backward(loss);
      opt.step(params);
      acc += value * static_cast<double>(batch.size());
    }
    epoch_loss.push_back(acc / static_cast<double>(train.n()));
  }
  return epoch_loss;
}

}  // namespace fud
