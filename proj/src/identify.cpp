#include "fud/identify.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

namespace fud {

void SimilarityMatrix::validate() const {
  if (d < 1 || values.size() != static_cast<std::size_t>(d) * d) {
    throw std::invalid_argument("similarity: bad storage");
  }
  for (int i = 0; i < d; ++i) {
    if (at(i, i) != 2.0) {
      throw std::invalid_argument("similarity: diagonal must be exactly 2");
    }
    for (int j = 0; j < d; ++j) {
      const double v = at(i, j);
      if (v < 0.0 || v > 2.0) {
        throw std::invalid_argument("similarity: entry outside [0,2]");
      }
      if (v != at(j, i)) {
        throw std::invalid_argument("similarity: not symmetric");
      }
    }
  }
}

std::vector<std::vector<double>> filter_vectors(const Classifier& model,
                                                int layer_id,
                                                const Tensor& probe) {
  if (probe.shape().size() != 4 || probe.dim(0) < 2) {
    throw std::invalid_argument(
        "filter_vectors: probe must be [N,C,H,W] with N >= 2");
  }
  FreezeGuard freeze(model.parameters());
  Tape tape;
  auto [logits, act] = model.forward_hooked(tape, probe, layer_id);
  (void)logits;
  const int n = act.dim(0), d = act.dim(1);
  const std::int64_t hw = static_cast<std::int64_t>(act.dim(2)) * act.dim(3);
  std::vector<std::vector<double>> out(d, std::vector<double>(n * hw));
  for (int f = 0; f < d; ++f) {
    for (int i = 0; i < n; ++i) {
      const double* plane =
          act.data().data() + (static_cast<std::int64_t>(i) * d + f) * hw;
      std::copy(plane, plane + hw,
                out[f].begin() + static_cast<std::int64_t>(i) * hw);
    }
  }
  return out;
}

SimilarityMatrix similarity_from_vectors(
    const std::vector<std::vector<double>>& vectors) {
  const int d = static_cast<int>(vectors.size());
  if (d < 1) throw std::invalid_argument("similarity: no filter vectors");
  const std::size_t len = vectors[0].size();
  if (len < 2) {
    throw std::invalid_argument("similarity: vectors need >= 2 entries");
  }
  std::vector<std::vector<double>> centered(d, std::vector<double>(len));
  std::vector<double> norm(d);
  for (int i = 0; i < d; ++i) {
    if (vectors[i].size() != len) {
      throw std::invalid_argument("similarity: ragged filter vectors");
    }
    double mu = 0.0;
    for (double v : vectors[i]) mu += v;
    mu /= static_cast<double>(len);
    double ss = 0.0;
    for (std::size_t p = 0; p < len; ++p) {
      centered[i][p] = vectors[i][p] - mu;
      ss += centered[i][p] * centered[i][p];
    }
    norm[i] = std::sqrt(ss);
  }
  SimilarityMatrix s;
  s.d = d;
  s.values.assign(static_cast<std::size_t>(d) * d, 0.0);
  for (int i = 0; i < d; ++i) {
    s.values[static_cast<std::size_t>(i) * d + i] = 2.0;
    for (int j = i + 1; j < d; ++j) {
      double rho = 0.0;
      if (norm[i] > 0.0 && norm[j] > 0.0) {
        double dot = 0.0;
        for (std::size_t p = 0; p < len; ++p) {
          dot += centered[i][p] * centered[j][p];
        }
        rho = std::clamp(dot / (norm[i] * norm[j]), -1.0, 1.0);
      }
      s.values[static_cast<std::size_t>(i) * d + j] = rho + 1.0;
      s.values[static_cast<std::size_t>(j) * d + i] = rho + 1.0;
    }
  }
  return s;
}

SimilarityMatrix similarity_matrix(const Classifier& model, int layer_id,
                                   const Tensor& probe) {
  return similarity_from_vectors(filter_vectors(model, layer_id, probe));
}

Spectrum laplacian_spectrum(const SimilarityMatrix& s) {
  s.validate();
  const int d = s.d;
  Eigen::MatrixXd lap(d, d);
  for (int i = 0; i < d; ++i) {
    double degree = 0.0;
    for (int j = 0; j < d; ++j) degree += s.at(i, j);
    for (int j = 0; j < d; ++j) lap(i, j) = (i == j ? degree : 0.0) - s.at(i, j);
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(lap);
  if (solver.info() != Eigen::Success) {
    throw std::runtime_error("laplacian_spectrum: eigendecomposition failed");
  }
  Spectrum out;
  out.eigenvalues.assign(solver.eigenvalues().data(),
                         solver.eigenvalues().data() + d);
  out.eigenvectors.resize(static_cast<std::size_t>(d) * d);
  Eigen::Map<Eigen::MatrixXd>(out.eigenvectors.data(), d, d) =
      solver.eigenvectors();
  return out;
}

std::vector<int> eigengap_candidates(const std::vector<double>& eigenvalues,
                                     int top) {
  const int d = static_cast<int>(eigenvalues.size());
  if (d < 2) throw std::invalid_argument("eigengap: need >= 2 eigenvalues");
  std::vector<std::pair<double, int>> gaps;  // (gap, cluster count k)
  for (int k = 1; k <= d - 1; ++k) {
    gaps.emplace_back(eigenvalues[k] - eigenvalues[k - 1], k);
  }
  std::stable_sort(gaps.begin(), gaps.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<int> out;
  for (int i = 0; i < std::min<int>(top, static_cast<int>(gaps.size())); ++i) {
    out.push_back(gaps[i].second);
  }
  return out;
}

int eigengap_select_k(const SimilarityMatrix& s) {
  if (s.d < 3) {
    throw std::invalid_argument("eigengap_select_k: need at least 3 filters");
  }
  const Spectrum spectrum = laplacian_spectrum(s);
  const auto candidates = eigengap_candidates(spectrum.eigenvalues);
  int k = *std::max_element(candidates.begin(), candidates.end());
  return std::clamp(k, 2, s.d);
}

// ---------------------------------------------------------------------------
// spectral partition

namespace {

double sq_dist(const double* a, const double* b, int dim) {
  double acc = 0.0;
  for (int i = 0; i < dim; ++i) {
    const double diff = a[i] - b[i];
    acc += diff * diff;
  }
  return acc;
}

struct KmeansRun {
  std::vector<int> assignment;
  double inertia = std::numeric_limits<double>::infinity();
};

KmeansRun kmeans_once(const std::vector<double>& points, int n, int dim, int k,
                      std::mt19937_64& rng) {
  auto point = [&](int i) { return points.data() + static_cast<std::size_t>(i) * dim; };
  // k-means++ seeding
  std::vector<int> centers_idx;
  std::uniform_int_distribution<int> first(0, n - 1);
  centers_idx.push_back(first(rng));
  std::vector<double> dist(n, 0.0);
  while (static_cast<int>(centers_idx.size()) < k) {
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (int c : centers_idx) best = std::min(best, sq_dist(point(i), point(c), dim));
      dist[i] = best;
      total += best;
    }
    int chosen = -1;
    if (total <= 0.0) {
      // all remaining points coincide with centers; spread deterministically
      for (int i = 0; i < n && chosen < 0; ++i) {
        if (std::find(centers_idx.begin(), centers_idx.end(), i) ==
            centers_idx.end()) {
          chosen = i;
        }
      }
      if (chosen < 0) chosen = first(rng);
    } else {
      std::uniform_real_distribution<double> u(0.0, total);
      double pick = u(rng);
      for (int i = 0; i < n; ++i) {
        pick -= dist[i];
        if (pick <= 0.0) {
          chosen = i;
          break;
        }
      }
      if (chosen < 0) chosen = n - 1;
    }
    centers_idx.push_back(chosen);
  }
  std::vector<double> centers(static_cast<std::size_t>(k) * dim);
  for (int c = 0; c < k; ++c) {
    std::copy(point(centers_idx[c]), point(centers_idx[c]) + dim,
              centers.begin() + static_cast<std::size_t>(c) * dim);
  }

  KmeansRun run;
  run.assignment.assign(n, 0);
  for (int iter = 0; iter < 100; ++iter) {
    bool moved = false;
    // assign
    for (int i = 0; i < n; ++i) {
      int best = 0;
      double best_d = sq_dist(point(i), centers.data(), dim);
      for (int c = 1; c < k; ++c) {
        const double dd =
            sq_dist(point(i), centers.data() + static_cast<std::size_t>(c) * dim, dim);
        if (dd < best_d) {
          best_d = dd;
          best = c;
        }
      }
      if (run.assignment[i] != best) {
        run.assignment[i] = best;
        moved = true;
      }
    }
    // repair empty clusters: split the largest by stealing its farthest point
    std::vector<int> count(k, 0);
    for (int a : run.assignment) ++count[a];
    for (int c = 0; c < k; ++c) {
      if (count[c] > 0) continue;
      const int biggest = static_cast<int>(
          std::max_element(count.begin(), count.end()) - count.begin());
      int farthest = -1;
      double far_d = -1.0;
      for (int i = 0; i < n; ++i) {
        if (run.assignment[i] != biggest) continue;
        const double dd = sq_dist(
            point(i), centers.data() + static_cast<std::size_t>(biggest) * dim,
            dim);
        if (dd > far_d) {
          far_d = dd;
          farthest = i;
        }
      }
      run.assignment[farthest] = c;
      --count[biggest];
      ++count[c];
      moved = true;
    }
    // update
    std::fill(centers.begin(), centers.end(), 0.0);
    for (int i = 0; i < n; ++i) {
      double* c = centers.data() +
                  static_cast<std::size_t>(run.assignment[i]) * dim;
      const double* p = point(i);
      for (int q = 0; q < dim; ++q) c[q] += p[q];
    }
    for (int c = 0; c < k; ++c) {
      for (int q = 0; q < dim; ++q) {
        centers[static_cast<std::size_t>(c) * dim + q] /= count[c];
      }
    }
    if (!moved) break;
  }
  run.inertia = 0.0;
  for (int i = 0; i < n; ++i) {
    run.inertia += sq_dist(
        point(i),
        centers.data() + static_cast<std::size_t>(run.assignment[i]) * dim,
        dim);
  }
  return run;
}

}  // namespace

FilterPartition spectral_partition(const SimilarityMatrix& s, int k,
                                   std::uint64_t seed) {
  if (k < 2 || k > s.d) {
    throw std::invalid_argument("spectral_partition: k outside [2, d]");
  }
  const Spectrum spectrum = laplacian_spectrum(s);
  const int d = s.d;
  // rows of the first-k-eigenvector matrix embed the filters
  std::vector<double> points(static_cast<std::size_t>(d) * k);
  for (int i = 0; i < d; ++i) {
    for (int c = 0; c < k; ++c) {
      points[static_cast<std::size_t>(i) * k + c] =
          spectrum.eigenvectors[static_cast<std::size_t>(c) * d + i];
    }
  }
  KmeansRun best;
  for (int restart = 0; restart < 20; ++restart) {
    auto rng = rng::engine(rng::derive(seed, 0xC1A5 + restart));
    KmeansRun run = kmeans_once(points, d, k, k, rng);
    if (run.inertia < best.inertia) best = std::move(run);
  }
  FilterPartition partition;
  partition.k = k;
  partition.assignment = best.assignment;
  partition.validate(d);
  return partition;
}

// ---------------------------------------------------------------------------
// grouping loss

Tensor cls_loss(Tape& tape, const Tensor& activation,
                const FilterPartition& partition) {
  return tape.grouping_loss(tape.pearson_similarity(activation), partition);
}

double cls_loss_value(const SimilarityMatrix& s,
                      const FilterPartition& partition) {
  partition.validate(s.d);
  const auto groups = partition.groups();
  double value = 0.0;
  for (const auto& group : groups) {
    double within = 0.0, all = 0.0;
    for (int i : group) {
      for (int j : group) within += s.at(i, j);
      for (int j = 0; j < s.d; ++j) all += s.at(i, j);
    }
    if (all > 0.0) value -= within / all;
  }
  return value;
}

// ---------------------------------------------------------------------------
// identifier training

IdentifyResult train_identifier(Identifier& identifier, const Dataset& train,
                                const Dataset& probe_pool,
                                const IdentifierTrainConfig& config) {
  if (config.epochs_phase1 < 0 || config.epochs_phase2 < 0) {
    throw std::invalid_argument("train_identifier: negative epoch count");
  }
  if (probe_pool.n() < 2) {
    throw std::invalid_argument("train_identifier: probe pool too small");
  }
  IdentifyResult result;

  TrainConfig phase1;
  phase1.epochs = config.epochs_phase1;
  phase1.lr = config.lr_phase1;
  phase1.batch_size = config.batch_size;
  phase1.seed = rng::derive(config.seed, 0x1D1);
  result.phase1_loss = train_classifier(identifier.net(), train, phase1);

  // probe similarity -> K -> fixed partition
  std::vector<std::int64_t> order(probe_pool.n());
  std::iota(order.begin(), order.end(), 0);
  {
    auto rng = rng::engine(rng::derive(config.seed, 0x9B0));
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<int> probe_idx;
  for (std::int64_t i = 0;
       i < std::min<std::int64_t>(config.probe_size, probe_pool.n()); ++i) {
    probe_idx.push_back(static_cast<int>(order[i]));
  }
  Tensor probe = stack_batch(probe_pool, probe_idx);
  result.similarity =
      similarity_matrix(identifier.net(), identifier.target_layer(), probe);
  result.k = eigengap_select_k(result.similarity);
  result.partition = spectral_partition(result.similarity, result.k,
                                        rng::derive(config.seed, 0x9B1));
  identifier.set_partition(result.partition);

  // phase 2: task loss + gamma * grouping loss, partition frozen
  const auto params = identifier.net().parameters();
  Sgd opt{config.lr_phase2, 0.0};
  const std::uint64_t phase2_seed = rng::derive(config.seed, 0x1D2);
  for (int epoch = 0; epoch < config.epochs_phase2; ++epoch) {
    const auto batches = epoch_batches(train.n(), config.batch_size,
                                       rng::derive(phase2_seed, epoch));
    double acc = 0.0;
    for (const auto& batch : batches) {
      Tensor x = stack_batch(train, batch);
      const auto labels = batch_labels(train, batch);
      Tape tape;
      auto [logits, act] =
          identifier.net().forward_hooked(tape, x, identifier.target_layer());
      Tensor loss = tape.cross_entropy_loss(logits, labels);
      if (config.gamma != 0.0) {
        loss = tape.add(
            loss, tape.scale(cls_loss(tape, act, result.partition),
                             config.gamma));
      }
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw DivergenceError("train_identifier: non-finite loss", epoch);
      }
      zero_grads(params);
      tape.backward(loss);
      opt.step(params);
      acc += value * static_cast<double>(batch.size());
    }
    result.phase2_loss.push_back(acc / static_cast<double>(train.n()));
  }
  return result;
}

void write_similarity_csv(const SimilarityMatrix& s,
                          const std::filesystem::path& path) {
  std::string out;
  char buf[64];
  for (int i = 0; i < s.d; ++i) {
    for (int j = 0; j < s.d; ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", s.at(i, j));
      out += buf;
      out += (j + 1 == s.d) ? '\n' : ',';
    }
  }
  write_file_atomic(path, out);
}

}  // namespace fud
