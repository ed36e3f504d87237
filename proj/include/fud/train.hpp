#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "fud/data.hpp"
#include "fud/model.hpp"

namespace fud {

// thrown when a training loop produces a non-finite loss
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::string what, int iteration)
      : std::runtime_error(std::move(what)), iteration_(iteration) {}
  int iteration() const { return iteration_; }

 private:
  int iteration_;
};

struct TrainConfig {
  int epochs = 5;
  double lr = 0.05;
  int batch_size = 32;
  double momentum = 0.0;
  std::uint64_t seed = 0;
};

// seeded shuffle chunked into batches; the trailing partial batch is kept
std::vector<std::vector<int>> epoch_batches(std::int64_t n, int batch_size,
                                            std::uint64_t seed);

// plain task training with cross-entropy on (x, y); per-epoch mean loss
std::vector<double> train_classifier(Classifier& model, const Dataset& train,
                                     const TrainConfig& config);

}  // namespace fud
