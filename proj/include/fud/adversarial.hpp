#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fud/data.hpp"
#include "fud/model.hpp"
#include "fud/train.hpp"

// Feature unlearning with known annotations: a frozen pre-trained adversary
// measures residual target-feature information in masked instances while
// remover training and model fine-tuning alternate.

namespace fud {

struct AdvUnlearnConfig {
  double beta = 5.0;
  double lambda = 5.0;
  int iterations = 50;  // alternation count; even -> remover, odd -> finetune
  double lr_remover = 0.05;
  double lr_finetune = 0.002;
  double lr_adversary = 0.05;
  int batch_size = 36;
  int adversary_epochs = 4;
  std::vector<int> target_features;  // m >= 1 annotation indices
  std::uint64_t seed = 0;

  void validate(int annotation_width) const;
};

struct TraceRow {
  int iteration = 0;
  std::string phase;
  double adv_acc = 0.0;
  double task_acc = 0.0;
  double l1_term = 0.0;
  double l_m = 0.0;
  double l_c = 0.0;
};

struct UnlearnTrace {
  std::vector<TraceRow> rows;

  void write_csv(const std::filesystem::path& path) const;
  static UnlearnTrace read_csv(const std::filesystem::path& path);
};

// Alg. 1 line 1: give the adversary its detection ability on raw instances.
void train_adversary(Classifier& adversary, const Dataset& train,
                     const std::vector<int>& targets,
                     const TrainConfig& config);

// per-head hit rate at threshold 0.5, optionally through a remover
std::vector<double> adversary_head_accuracy(const Classifier& adversary,
                                            const Dataset& data,
                                            const std::vector<int>& targets,
                                            const Remover* remover = nullptr);
double adversary_accuracy(const Classifier& adversary, const Dataset& data,
                          const std::vector<int>& targets,
                          const Remover* remover = nullptr);

struct RemoverLossParts {
  double total = 0.0, l1 = 0.0, lm = 0.0, lc = 0.0;
};

// L_E = beta*|x - x_hat|_1 + L(M(x_hat), y) - lambda*L_C, built on the tape.
// M and C are used frozen; gradient reaches only remover parameters.
Tensor remover_loss(Tape& tape, const Remover& remover, const Classifier& m,
                    const Classifier& adversary, const Tensor& x,
                    const std::vector<int>& labels, const Tensor& target_bits,
                    double beta, double lambda,
                    RemoverLossParts* parts = nullptr);

// one SGD step of M on remover-masked instances; returns the loss value
double finetune_step(Classifier& m, const Remover& remover, const Tensor& x,
                     const std::vector<int>& labels, double lr);

struct AdvUnlearnResult {
  UnlearnTrace trace;
};

// Alternating unlearning loop. The adversary must be pre-trained; the
// caller's eval split feeds the per-iteration accuracy probes. Resuming
// from iteration t reproduces the uninterrupted run (per-iteration seeds
// derive from config.seed).
AdvUnlearnResult unlearn_annotated(Classifier& m, Remover& remover,
                                   Classifier& adversary, const Dataset& train,
                                   const Dataset& eval,
                                   const AdvUnlearnConfig& config,
                                   int start_iteration = 0);

struct BaselineResult {
  int epochs_run = 0;
  bool empty_remainder = false;
  std::int64_t remaining = 0;
};

// instance-level fine-tuning baseline: drop annotated instances, fine-tune
// on the rest with the plain task loss
BaselineResult baseline_instance_finetune(Classifier& m, const Dataset& data,
                                          const AnnotationPredicate& predicate,
                                          const TrainConfig& config);

}  // namespace fud
