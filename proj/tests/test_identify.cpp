#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "fud/identify.hpp"

using namespace fud;

namespace {

Tensor random_activation(Shape shape, std::uint64_t seed) {
  auto rng = rng::engine(seed);
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data()) v = dist(rng);
  return t;
}

// test-local textbook Pearson, accumulation order unrelated to the library's
double pearson_oracle(const std::vector<double>& a,
                      const std::vector<double>& b) {
  const std::size_t n = a.size();
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double num = 0, da = 0, db = 0;
  for (std::size_t i = 0; i < n; ++i) {
    num += (a[i] - ma) * (b[i] - mb);
    da += (a[i] - ma) * (a[i] - ma);
    db += (b[i] - mb) * (b[i] - mb);
  }
  if (da == 0.0 || db == 0.0) return 0.0;
  return num / std::sqrt(da * db);
}

// test-local cyclic Jacobi eigenvalue solver for symmetric matrices
std::vector<double> jacobi_eigenvalues(std::vector<double> a, int n) {
  auto at = [&](int i, int j) -> double& { return a[i * n + j]; };
  for (int sweep = 0; sweep < 200; ++sweep) {
    double off = 0.0;
    for (int i = 0; i < n; ++i) {
      for (int j = i + 1; j < n; ++j) off += at(i, j) * at(i, j);
    }
    if (off < 1e-22) break;
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        if (std::abs(at(p, q)) < 1e-300) continue;
        const double theta = (at(q, q) - at(p, p)) / (2.0 * at(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int i = 0; i < n; ++i) {
          const double aip = at(i, p), aiq = at(i, q);
          at(i, p) = c * aip - s * aiq;
          at(i, q) = s * aip + c * aiq;
        }
        for (int i = 0; i < n; ++i) {
          const double api = at(p, i), aqi = at(q, i);
          at(p, i) = c * api - s * aqi;
          at(q, i) = s * api + c * aqi;
        }
      }
    }
  }
  std::vector<double> ev(n);
  for (int i = 0; i < n; ++i) ev[i] = at(i, i);
  std::sort(ev.begin(), ev.end());
  return ev;
}

// independent gap-scan: laplacian via plain loops, eigenvalues via jacobi
int eigengap_oracle(const SimilarityMatrix& s) {
  const int d = s.d;
  std::vector<double> lap(static_cast<std::size_t>(d) * d, 0.0);
  for (int i = 0; i < d; ++i) {
    double deg = 0.0;
    for (int j = 0; j < d; ++j) deg += s.at(i, j);
    for (int j = 0; j < d; ++j) {
      lap[i * d + j] = (i == j ? deg : 0.0) - s.at(i, j);
    }
  }
  const auto ev = jacobi_eigenvalues(lap, d);
  std::vector<std::pair<double, int>> gaps;
  for (int k = 1; k <= d - 1; ++k) gaps.emplace_back(ev[k] - ev[k - 1], k);
  std::stable_sort(gaps.begin(), gaps.end(),
                   [](const auto& x, const auto& y) { return x.first > y.first; });
  int best = 0;
  for (int i = 0; i < std::min<int>(5, static_cast<int>(gaps.size())); ++i) {
    best = std::max(best, gaps[i].second);
  }
  return std::clamp(best, 2, d);
}

SimilarityMatrix random_similarity(int d, std::uint64_t seed) {
  auto rng = rng::engine(seed);
  std::uniform_real_distribution<double> rho(-1.0, 1.0);
  SimilarityMatrix s;
  s.d = d;
  s.values.assign(static_cast<std::size_t>(d) * d, 0.0);
  for (int i = 0; i < d; ++i) {
    s.values[i * d + i] = 2.0;
    for (int j = i + 1; j < d; ++j) {
      const double v = rho(rng) + 1.0;
      s.values[i * d + j] = v;
      s.values[j * d + i] = v;
    }
  }
  return s;
}

// perfect 3-block similarity at d=6
SimilarityMatrix block_similarity() {
  SimilarityMatrix s;
  s.d = 6;
  s.values.assign(36, 0.0);
  for (int i = 0; i < 6; ++i) {
    for (int j = 0; j < 6; ++j) {
      if (i / 2 == j / 2) s.values[i * 6 + j] = 2.0;
    }
  }
  return s;
}

std::vector<std::vector<int>> partition_groups_sorted(
    const FilterPartition& p) {
  auto groups = p.groups();
  for (auto& g : groups) std::sort(g.begin(), g.end());
  std::sort(groups.begin(), groups.end());
  return groups;
}

}  // namespace

TEST_CASE("similarity matches a textbook pearson oracle") {
  Tensor act = random_activation({3, 4, 2, 2}, 17);
  const auto vectors = [&] {
    // re-gather by hand: filter i over instances and positions
    std::vector<std::vector<double>> out(4);
    for (int f = 0; f < 4; ++f) {
      for (int n = 0; n < 3; ++n) {
        for (int p = 0; p < 4; ++p) {
          out[f].push_back(act.data()[(n * 4 + f) * 4 + p]);
        }
      }
    }
    return out;
  }();
  const SimilarityMatrix s = similarity_from_vectors(vectors);
  s.validate();
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) {
      const double expect =
          i == j ? 2.0 : pearson_oracle(vectors[i], vectors[j]) + 1.0;
      CHECK(s.at(i, j) == doctest::Approx(expect).epsilon(1e-12));
    }
  }

  // the differentiable tape op agrees
  Tape tape;
  Tensor sim = tape.pearson_similarity(act);
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) {
      CHECK(sim.data()[i * 4 + j] ==
            doctest::Approx(s.at(i, j)).epsilon(1e-12));
    }
  }
}

TEST_CASE("similarity special cases") {
  // identical filters -> s=2; negated -> s=0; constant -> s=1
  std::vector<std::vector<double>> vectors = {
      {1.0, 2.0, 3.0, 4.0},
      {1.0, 2.0, 3.0, 4.0},
      {-1.0, -2.0, -3.0, -4.0},
      {5.0, 5.0, 5.0, 5.0},
  };
  const SimilarityMatrix s = similarity_from_vectors(vectors);
  CHECK(s.at(0, 1) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(s.at(0, 2) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(s.at(0, 3) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(s.at(3, 3) == 2.0);
}

TEST_CASE("similarity invariants on random probes") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Tensor act = random_activation({2, 5, 3, 3}, 1000 + seed);
    Tape tape;
    Tensor sim = tape.pearson_similarity(act);
    SimilarityMatrix s;
    s.d = 5;
    s.values = sim.data();
    s.validate();  // symmetric, diag exactly 2, range [0,2]
  }
}

TEST_CASE("laplacian spectrum is ascending and nonnegative") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const SimilarityMatrix s = random_similarity(8, 99 + seed);
    const Spectrum spec = laplacian_spectrum(s);
    REQUIRE(spec.eigenvalues.size() == 8);
    CHECK(spec.eigenvalues.front() >= -1e-8);
    for (std::size_t i = 1; i < spec.eigenvalues.size(); ++i) {
      CHECK(spec.eigenvalues[i] >= spec.eigenvalues[i - 1]);
    }
  }
}

TEST_CASE("eigengap candidates on a hand spectrum") {
  const std::vector<double> ev = {0.0, 0.01, 0.02, 0.9, 1.1};
  const auto candidates = eigengap_candidates(ev);
  CHECK(std::find(candidates.begin(), candidates.end(), 3) !=
        candidates.end());
}

TEST_CASE("3-block similarity: zero eigenvalue multiplicity and recovery") {
  const SimilarityMatrix s = block_similarity();
  const Spectrum spec = laplacian_spectrum(s);
  for (int i = 0; i < 3; ++i) CHECK(std::abs(spec.eigenvalues[i]) < 1e-8);
  CHECK(spec.eigenvalues[3] > 1.0);
  const auto candidates = eigengap_candidates(spec.eigenvalues);
  CHECK(std::find(candidates.begin(), candidates.end(), 3) !=
        candidates.end());

  // exact block recovery, checked against exhaustive 3-partition search
  const FilterPartition partition = spectral_partition(s, 3, 5);
  const auto got = partition_groups_sorted(partition);

  double best_score = -1.0;
  std::vector<std::vector<int>> best_groups;
  std::vector<int> assign(6, 0);
  for (int code = 0; code < 729; ++code) {
    int c = code;
    std::vector<int> count(3, 0);
    for (int i = 0; i < 6; ++i) {
      assign[i] = c % 3;
      ++count[assign[i]];
      c /= 3;
    }
    if (count[0] == 0 || count[1] == 0 || count[2] == 0) continue;
    double score = 0.0;
    for (int i = 0; i < 6; ++i) {
      for (int j = 0; j < 6; ++j) {
        if (assign[i] == assign[j]) score += s.at(i, j);
      }
    }
    if (score > best_score) {
      best_score = score;
      FilterPartition p;
      p.k = 3;
      p.assignment = assign;
      best_groups = partition_groups_sorted(p);
    }
  }
  CHECK(got == best_groups);
  CHECK(got == std::vector<std::vector<int>>{{0, 1}, {2, 3}, {4, 5}});
}

TEST_CASE("eigengap select matches the brute-force oracle on random matrices") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto rng = rng::engine(rng::derive(7777, seed));
    std::uniform_int_distribution<int> dims(3, 32);
    const SimilarityMatrix s = random_similarity(dims(rng), 3000 + seed);
    const int got = eigengap_select_k(s);
    CHECK(got == eigengap_oracle(s));
    CHECK(got >= 2);
    CHECK(got <= s.d);
  }
  SimilarityMatrix tiny = random_similarity(2, 1);
  CHECK_THROWS_AS(eigengap_select_k(tiny), std::invalid_argument);
}

TEST_CASE("spectral partition determinism and K=d singletons") {
  const SimilarityMatrix s = random_similarity(8, 404);
  const FilterPartition a = spectral_partition(s, 3, 11);
  const FilterPartition b = spectral_partition(s, 3, 11);
  CHECK(a == b);
  const FilterPartition singles = spectral_partition(s, 8, 2);
  std::vector<int> sorted = singles.assignment;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 8; ++i) CHECK(sorted[i] == i);
  CHECK_THROWS_AS(spectral_partition(s, 1, 0), std::invalid_argument);
  CHECK_THROWS_AS(spectral_partition(s, 9, 0), std::invalid_argument);
}

TEST_CASE("grouping loss identities") {
  // K=1: within == all, so the loss is exactly -1 on arbitrary activations
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Tensor act = random_activation({2, 6, 3, 3}, 500 + seed);
    FilterPartition whole;
    whole.k = 1;
    whole.assignment.assign(6, 0);
    Tape tape;
    CHECK(cls_loss(tape, act, whole).item() == -1.0);
  }

  // perfect block structure approaches -K
  Tensor act = Tensor::zeros({1, 4, 2, 2});
  auto rng = rng::engine(8);
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  for (int p = 0; p < 4; ++p) {
    const double a = dist(rng), b = dist(rng);
    act.data()[0 * 4 + p] = a;
    act.data()[1 * 4 + p] = a;  // filter 1 copies filter 0
    act.data()[2 * 4 + p] = b;
    act.data()[3 * 4 + p] = b;
  }
  FilterPartition pairs;
  pairs.k = 2;
  pairs.assignment = {0, 0, 1, 1};
  Tape tape;
  Tensor sim = tape.pearson_similarity(act);
  // cross-block pearson is data-dependent; force the ideal block case
  SimilarityMatrix ideal;
  ideal.d = 4;
  ideal.values = {2, 2, 0, 0, 2, 2, 0, 0, 0, 0, 2, 2, 0, 0, 2, 2};
  CHECK(cls_loss_value(ideal, pairs) == doctest::Approx(-2.0).epsilon(1e-12));
}

TEST_CASE("grouping loss: hand case value and gradient") {
  Tensor act = random_activation({2, 4, 2, 2}, 1234);
  FilterPartition part;
  part.k = 2;
  part.assignment = {0, 1, 0, 1};

  Tape tape;
  Tensor value = cls_loss(tape, act, part);
  // scalar recomputation from the matrix
  SimilarityMatrix s;
  s.d = 4;
  {
    Tape t2;
    s.values = t2.pearson_similarity(act).data();
  }
  CHECK(value.item() ==
        doctest::Approx(cls_loss_value(s, part)).epsilon(1e-10));
  CHECK(value.item() >= -2.0);
  CHECK(value.item() <= 0.0);

  const double err = grad_check(
      [&](Tape& t, const Tensor& probe) { return cls_loss(t, probe, part); },
      act);
  CHECK(err < 1e-4);
}

TEST_CASE("pearson similarity gradient passes finite differences") {
  Tensor act = random_activation({2, 3, 2, 2}, 77);
  FilterPartition part;
  part.k = 3;
  part.assignment = {0, 1, 2};
  // weighted sum of entries exercises the pearson backward alone
  Tensor weights = random_activation({3, 3}, 78);
  const double err = grad_check(
      [&](Tape& t, const Tensor& probe) {
        return t.sum(t.mul(t.pearson_similarity(probe), weights));
      },
      act);
  CHECK(err < 1e-4);
}
