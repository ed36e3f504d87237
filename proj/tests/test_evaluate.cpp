#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "fud/evaluate.hpp"

using namespace fud;
namespace fs = std::filesystem;

namespace {

DatasetConfig tiny_config(std::int64_t n, std::uint64_t seed) {
  DatasetConfig c;
  c.n = n;
  c.seed = seed;
  c.height = 16;
  c.width = 16;
  c.task_feature = "task";
  FeatureSpec task;
  task.name = "task";
  task.cell_row = 1;
  task.cell_col = 1;
  task.size_px = 4;
  c.features = {task};
  return c;
}

ClassifierSpec tiny_net() {
  ClassifierSpec s;
  s.in_height = 16;
  s.in_width = 16;
  s.conv = {{4, 3, 1, -1}, {8, 3, 1, -1}};
  s.hidden = 16;
  return s;
}

}  // namespace

TEST_CASE("accuracy matches a hand count and flags empty input") {
  Dataset data = generate_dataset(tiny_config(10, 1));
  Classifier m(tiny_net(), 2);
  const double got = accuracy(m, data);
  // hand recount
  int hits = 0;
  for (const auto& inst : data.instances) {
    Tape t;
    Tensor logits =
        m.forward(t, Tensor::from_data({1, 1, 16, 16}, inst.x.data()));
    const int arg = logits.data()[1] > logits.data()[0] ? 1 : 0;
    if (arg == inst.y) ++hits;
  }
  CHECK(got == doctest::Approx(hits / 10.0).epsilon(1e-12));

  Dataset empty;
  empty.config = data.config;
  CHECK_THROWS_AS(accuracy(m, empty), std::invalid_argument);
}

TEST_CASE("constant predictor scores one half on a balanced set") {
  Dataset data = generate_dataset(tiny_config(40, 2));
  Classifier m(tiny_net(), 3);
  // zero the head, bias class 0: every prediction is class 0
  auto params = m.parameters();
  Tensor w2 = params[params.size() - 2];
  Tensor b2 = params[params.size() - 1];
  std::fill(w2.data().begin(), w2.data().end(), 0.0);
  b2.data()[0] = 1.0;
  b2.data()[1] = 0.0;
  CHECK(accuracy(m, data) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("accuracy variation is a plain difference") {
  CHECK(accuracy_variation(0.9, 0.9) == 0.0);
  CHECK(accuracy_variation(0.9, 0.6) == doctest::Approx(-0.3));
}

TEST_CASE("saliency of a relu-free path equals |weights|") {
  // y = w.x via raw tape ops; guided and standard agree with |w|
  Tensor w = Tensor::from_data({1, 4}, {0.5, -1.5, 2.0, -0.25});
  Tensor b = Tensor::zeros({1});
  Tensor x = Tensor::from_data({1, 4}, {0.3, 0.7, 0.1, 0.9});
  for (GradMode mode : {GradMode::standard, GradMode::guided}) {
    Tensor probe = x.clone();
    probe.set_requires_grad(true);
    Tape tape(mode);
    Tensor y = tape.pick(tape.linear(probe, w, b), 0);
    tape.backward(y);
    for (int i = 0; i < 4; ++i) {
      CHECK(std::abs(probe.grad()[i]) ==
            doctest::Approx(std::abs(w.data()[i])).epsilon(1e-12));
    }
  }
}

TEST_CASE("dead relu input yields an all-zero map") {
  Classifier m(tiny_net(), 5);
  // large negative conv biases kill every activation
  auto params = m.parameters();
  Tensor bias0 = params[1];
  std::fill(bias0.data().begin(), bias0.data().end(), -100.0);
  Tensor x = Tensor::full({1, 16, 16}, 0.5);
  const SaliencyMap map = guided_saliency(m, x, 1);
  for (double v : map.mag) CHECK(v == 0.0);
}

TEST_CASE("saliency maps are nonnegative and finite") {
  Classifier m(tiny_net(), 6);
  Dataset data = generate_dataset(tiny_config(4, 3));
  for (const auto& inst : data.instances) {
    const SaliencyMap map = guided_saliency(m, inst.x, 1);
    for (double v : map.mag) {
      CHECK(v >= 0.0);
      CHECK(std::isfinite(v));
    }
  }
  // guided relu rule at the op level: magnitudes never grow
  Tensor x = Tensor::from_data({4}, {1.0, 2.0, 3.0, -1.0});
  Tensor upstream = Tensor::from_data({4}, {0.5, -2.0, 1.5, 3.0});
  auto backward_mags = [&](GradMode mode) {
    Tensor probe = x.clone();
    probe.set_requires_grad(true);
    Tape tape(mode);
    tape.backward(tape.sum(tape.mul(tape.relu(probe), upstream)));
    return probe.grad();
  };
  const auto guided = backward_mags(GradMode::guided);
  const auto standard = backward_mags(GradMode::standard);
  for (int i = 0; i < 4; ++i) {
    CHECK(std::abs(guided[i]) <= std::abs(standard[i]));
  }
}

TEST_CASE("region energy") {
  SaliencyMap map;
  map.height = 2;
  map.width = 2;
  map.mag = {0.0, 1.0, 0.0, 0.0};
  std::vector<std::uint8_t> region = {0, 1, 0, 0};
  CHECK(region_energy(map, region) == 1.0);

  map.mag = {1.0, 1.0, 1.0, 1.0};
  region = {1, 0, 0, 0};
  CHECK(region_energy(map, region) == doctest::Approx(0.25));

  map.mag = {0.0, 0.0, 0.0, 0.0};
  CHECK(region_energy(map, region) == 0.0);
  region = {1, 0, 0};
  CHECK_THROWS_AS(region_energy(map, region), std::invalid_argument);
}

TEST_CASE("model inversion basics") {
  Classifier m(tiny_net(), 7);
  Tensor zero = model_inversion(m, 1, 0, 0.5);
  for (double v : zero.data()) CHECK(v == 0.0);
  Tensor img = model_inversion(m, 1, 5, 0.5);
  for (double v : img.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK_THROWS_AS(model_inversion(m, 5, 1, 0.5), std::invalid_argument);
}

TEST_CASE("fairness metrics hand cases") {
  // g=0 predicts positive at 0.8, g=1 at 0.5 -> DPD = 0.3
  std::vector<double> scores;
  std::vector<int> labels;
  std::vector<std::uint8_t> groups;
  for (int i = 0; i < 10; ++i) {
    scores.push_back(i < 8 ? 0.9 : 0.1);  // 8 positive predictions
    labels.push_back(i % 2);
    groups.push_back(0);
  }
  for (int i = 0; i < 10; ++i) {
    scores.push_back(i < 5 ? 0.9 : 0.1);  // 5 positive predictions
    labels.push_back(i % 2);
    groups.push_back(1);
  }
  const FairnessReport r = fairness_metrics(scores, labels, groups);
  CHECK(r.dpd == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(r.eod >= 0.0);
  CHECK(r.eod <= 1.0);
  CHECK(r.aps >= 0.0);
  CHECK(r.aps <= 1.0);

  // perfect classifier, both groups -> EOD = 0, DPD = 0 on balanced labels
  scores.clear();
  labels.clear();
  groups.clear();
  for (int g = 0; g < 2; ++g) {
    for (int i = 0; i < 6; ++i) {
      const int y = i % 2;
      scores.push_back(y ? 0.95 : 0.05);
      labels.push_back(y);
      groups.push_back(static_cast<std::uint8_t>(g));
    }
  }
  const FairnessReport perfect = fairness_metrics(scores, labels, groups);
  CHECK(perfect.eod == 0.0);
  CHECK(perfect.dpd == 0.0);
  CHECK(perfect.aps == doctest::Approx(1.0));

  // average precision hand case
  const FairnessReport ap = fairness_metrics(
      {0.9, 0.8, 0.7, 0.6}, {1, 0, 1, 0}, {0, 1, 1, 0});
  CHECK(ap.aps == doctest::Approx(1.0 / 2.0 + 1.0 / 3.0).epsilon(1e-12));

  // missing strata raise
  CHECK_THROWS_AS(fairness_metrics({0.5, 0.5}, {0, 1}, {0, 0}),
                  std::invalid_argument);
  CHECK_THROWS_AS(fairness_metrics({0.5, 0.5}, {1, 1}, {0, 1}),
                  std::invalid_argument);
}

TEST_CASE("mia rejects unusable inputs") {
  Dataset data = generate_dataset(tiny_config(8, 4));
  MiaConfig config;
  config.shadow_spec = tiny_net();
  Dataset empty;
  empty.config = data.config;
  Classifier target(tiny_net(), 8);
  CHECK_THROWS_AS(mia_attack(target, empty, data, data, config),
                  std::invalid_argument);
  Dataset tiny;
  tiny.config = data.config;
  tiny.instances = {data.instances[0], data.instances[1]};
  tiny.config.n = 2;
  CHECK_THROWS_AS(train_mia_attack(tiny, config), std::invalid_argument);
}

TEST_CASE("ppm writer emits a valid P6 header") {
  const fs::path path = fs::temp_directory_path() / "fud_test.ppm";
  write_ppm({0.0, 0.5, 1.0, 0.25}, 2, 2, path);
  std::ifstream in(path, std::ios::binary);
  std::string header;
  std::getline(in, header);
  CHECK(header == "P6");
  std::getline(in, header);
  CHECK(header == "2 2");
  std::getline(in, header);
  CHECK(header == "255");
  std::string rest((std::istreambuf_iterator<char>(in)), {});
  CHECK(rest.size() == 12);  // 4 pixels * rgb
  fs::remove(path);
}
