#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "fud/data.hpp"
#include "fud/model.hpp"
#include "fud/train.hpp"

namespace fud {

// argmax-match fraction on (x, y)
double accuracy(const Classifier& model, const Dataset& data);

inline double accuracy_variation(double acc_before, double acc_after) {
  return acc_after - acc_before;
}

// softmax probability of class 1, per instance (binary heads)
std::vector<double> positive_scores(const Classifier& model,
                                    const Dataset& data);

struct SaliencyMap {
  int height = 0;
  int width = 0;
  std::vector<double> mag;
};

// |d logit_class / d x| under guided backprop, summed over channels;
// x is a single [C,H,W] image
SaliencyMap guided_saliency(const Classifier& model, const Tensor& x,
                            int class_id);
SaliencyMap standard_saliency(const Classifier& model, const Tensor& x,
                              int class_id);

// share of saliency magnitude inside the region mask; 0 when the map is flat
double region_energy(const SaliencyMap& map,
                     const std::vector<std::uint8_t>& region);

struct MiaConfig {
  int shadow_models = 10;
  int shadow_epochs = 10;
  int batch_size = 64;
  double shadow_lr = 0.05;
  int attack_epochs = 40;
  double attack_lr = 0.2;
  int attack_batch = 64;
  std::uint64_t seed = 0;
  ClassifierSpec shadow_spec;
};

// shadow-model attack: shadows train on in/out halves of the pool, the
// 256/128 relu MLP learns member-vs-nonmember from sorted output vectors
struct MiaAttack {
  Mlp model;
  int classes = 2;
};

MiaAttack train_mia_attack(const Dataset& shadow_pool, const MiaConfig& config);
// balanced attack accuracy over member/nonmember instances of the target
double mia_attack_accuracy(const MiaAttack& attack, const Classifier& target,
                           const Dataset& members, const Dataset& nonmembers);
double mia_attack(const Classifier& target, const Dataset& members,
                  const Dataset& nonmembers, const Dataset& shadow_pool,
                  const MiaConfig& config);

// gradient ascent on a zero image toward the class logit, clamped to [0,1]
Tensor model_inversion(const Classifier& model, int class_id, int steps,
                       double lr);

struct FairnessReport {
  double eod = 0.0;
  double dpd = 0.0;
  double aps = 0.0;
};

// scores in [0,1], labels in {0,1}, groups in {0,1}; prediction threshold 0.5
FairnessReport fairness_metrics(const std::vector<double>& scores,
                                const std::vector<int>& labels,
                                const std::vector<std::uint8_t>& groups,
                                double threshold = 0.5);

// grayscale P6; autoscale maps [0, max] onto [0,255], otherwise values are
// treated as [0,1]
void write_ppm(const std::vector<double>& values, int height, int width,
               const std::filesystem::path& path, bool autoscale = false);

}  // namespace fud
