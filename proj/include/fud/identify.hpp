#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "fud/data.hpp"
#include "fud/model.hpp"
#include "fud/train.hpp"

// Feature identification without annotations: Pearson similarity over
// target-layer filters, eigengap selection of the group count, spectral
// partitioning and the two-phase identifier training.

namespace fud {

struct SimilarityMatrix {
  int d = 0;
  std::vector<double> values;  // row-major d*d, s_ij = pearson_ij + 1

  double at(int i, int j) const {
    return values[static_cast<std::size_t>(i) * d + j];
  }
  void validate() const;  // symmetric, diagonal 2, entries in [0,2]
};

struct Spectrum {
  std::vector<double> eigenvalues;   // ascending
  std::vector<double> eigenvectors;  // column-major d*d, column k <-> lambda_k
};

// flattened activation of each target-layer filter across the probe batch
std::vector<std::vector<double>> filter_vectors(const Classifier& model,
                                                int layer_id,
                                                const Tensor& probe);
SimilarityMatrix similarity_from_vectors(
    const std::vector<std::vector<double>>& vectors);
SimilarityMatrix similarity_matrix(const Classifier& model, int layer_id,
                                   const Tensor& probe);

// unnormalized graph Laplacian L = D - S
Spectrum laplacian_spectrum(const SimilarityMatrix& s);

// cluster counts k whose gap lambda_{k+1} - lambda_k is among the `top`
// largest, k in [1, d-1]
std::vector<int> eigengap_candidates(const std::vector<double>& eigenvalues,
                                     int top = 5);
// max of the top-5 gap candidates, clamped to [2, d]
int eigengap_select_k(const SimilarityMatrix& s);

// k-means over rows of the first-k-eigenvector matrix, 20 seeded restarts,
// empty clusters repaired by splitting the largest
FilterPartition spectral_partition(const SimilarityMatrix& s, int k,
                                   std::uint64_t seed);

// L_cls = -sum_k within_k / all_k, differentiable through the activations
Tensor cls_loss(Tape& tape, const Tensor& activation,
                const FilterPartition& partition);
// scalar recomputation straight from a similarity matrix
double cls_loss_value(const SimilarityMatrix& s,
                      const FilterPartition& partition);

struct IdentifierTrainConfig {
  double gamma = 1.0;
  int epochs_phase1 = 5;  // task loss alone
  int epochs_phase2 = 5;  // task loss + gamma * grouping loss
  double lr_phase1 = 0.05;
  double lr_phase2 = 0.01;
  int batch_size = 32;
  int probe_size = 256;
  std::uint64_t seed = 0;
};

struct IdentifyResult {
  int k = 0;
  FilterPartition partition;
  SimilarityMatrix similarity;  // measured after phase 1, on the probe
  std::vector<double> phase1_loss;
  std::vector<double> phase2_loss;
};

// phase 1 trains on the task loss, then the partition is fixed from the
// probe similarity and phase 2 adds the grouping loss; the partition is
// never re-clustered
IdentifyResult train_identifier(Identifier& identifier, const Dataset& train,
                                const Dataset& probe_pool,
                                const IdentifierTrainConfig& config);

void write_similarity_csv(const SimilarityMatrix& s,
                          const std::filesystem::path& path);

}  // namespace fud
