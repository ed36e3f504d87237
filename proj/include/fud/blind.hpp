#pragma once

#include <cstdint>
#include <vector>

#include "fud/adversarial.hpp"
#include "fud/data.hpp"
#include "fud/model.hpp"

// Feature unlearning without annotations: erase the pixels indicated by a
// chosen filter group's upsampled activation map, then fine-tune the
// original model on the encoded instances.

namespace fud {

struct EncodeConfig {
  int group_id = 0;
  double threshold = 0.2;  // on the max-normalized map
  double fill = 0.0;
  double lr = 0.001;
  int epochs = 5;
  int batch_size = 128;
  std::uint64_t seed = 0;

  void validate(const Identifier& identifier) const;
};

// mean over the group's filter activation maps, per spatial cell; x is a
// single [C,H,W] instance
Tensor group_map(const Identifier& identifier, const Tensor& x, int group_id);

std::vector<double> resize_nearest(const std::vector<double>& map, int h,
                                   int w, int out_h, int out_w);

// pixels whose max-normalized, nearest-resized map value exceeds the
// threshold are set to the fill value across all channels
Tensor encode_instance(const Identifier& identifier, const Tensor& x,
                       const EncodeConfig& config);
Dataset encode_dataset(const Identifier& identifier, const Dataset& data,
                       const EncodeConfig& config);

struct BlindResult {
  UnlearnTrace trace;  // adv_acc column holds encoded-eval accuracy
};

BlindResult unlearn_blind(Classifier& m, const Identifier& identifier,
                          const Dataset& train, const Dataset& eval,
                          const EncodeConfig& config);

// energy share of the group's thresholded map inside the feature's glyph
// region, accumulated over probe instances that carry the feature
double group_region_overlap(const Identifier& identifier, const Dataset& probe,
                            int group_id, int feature_index, double threshold);
// group with the highest overlap for the feature
int aligned_group(const Identifier& identifier, const Dataset& probe,
                  int feature_index, double threshold);

}  // namespace fud
