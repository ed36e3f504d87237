#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "fud/data.hpp"

using namespace fud;
namespace fs = std::filesystem;

namespace {

DatasetConfig two_glyph_config(std::int64_t n, std::uint64_t seed) {
  DatasetConfig c;
  c.n = n;
  c.seed = seed;
  c.task_feature = "task";
  FeatureSpec task;
  task.name = "task";
  task.shape = GlyphShape::square;
  task.cell_row = 1;
  task.cell_col = 1;
  FeatureSpec target;
  target.name = "target";
  target.shape = GlyphShape::cross;
  target.cell_row = 2;
  target.cell_col = 2;
  c.features = {task, target};
  return c;
}

double joint_corr(const Dataset& d, int feature) {
  double n = static_cast<double>(d.n());
  double sy = 0, sf = 0, syf = 0;
  for (const auto& inst : d.instances) {
    sy += inst.y;
    sf += inst.f[feature];
    syf += inst.y * inst.f[feature];
  }
  const double my = sy / n, mf = sf / n;
  const double cov = syf / n - my * mf;
  const double denom = std::sqrt(my * (1 - my) * mf * (1 - mf));
  return denom == 0.0 ? 0.0 : cov / denom;
}

}  // namespace

TEST_CASE("cell counts are honored exactly") {
  DatasetConfig c = two_glyph_config(36000, 5);
  c.cell_counts_feature = "target";
  c.cell_counts = CellCounts{2000, 16000, 16000, 2000};
  Dataset d = generate_dataset(c);
  std::int64_t cells[4] = {0, 0, 0, 0};
  const int tf = d.feature_index("target");
  for (const auto& inst : d.instances) ++cells[inst.y * 2 + inst.f[tf]];
  CHECK(cells[0] == 2000);
  CHECK(cells[1] == 16000);
  CHECK(cells[2] == 16000);
  CHECK(cells[3] == 2000);
}

TEST_CASE("independent features stay near zero correlation") {
  Dataset d = generate_dataset(two_glyph_config(4000, 9));
  CHECK(std::abs(joint_corr(d, d.feature_index("target"))) < 0.05);
}

TEST_CASE("correlation targets are matched") {
  DatasetConfig c = two_glyph_config(4000, 10);
  c.correlations["target"] = -0.6;
  Dataset d = generate_dataset(c);
  CHECK(joint_corr(d, d.feature_index("target")) ==
        doctest::Approx(-0.6).epsilon(0.02));
}

TEST_CASE("infeasible correlation raises") {
  DatasetConfig c = two_glyph_config(100, 1);
  c.correlations["target"] = 2.0;
  CHECK_THROWS_AS(generate_dataset(c), std::invalid_argument);
}

TEST_CASE("no features and no noise means flat background") {
  DatasetConfig c = two_glyph_config(10, 3);
  c.noise_amplitude = 0.0;
  Dataset d = generate_dataset(c);
  for (const auto& inst : d.instances) {
    if (inst.f[0] || inst.f[1]) continue;
    for (double v : inst.x.data()) CHECK(v == doctest::Approx(0.1));
    CHECK(inst.y == 0);
  }
}

TEST_CASE("annotation faithfulness: glyphs re-detectable from pixels") {
  Dataset d = generate_dataset(two_glyph_config(64, 17));
  for (int j = 0; j < d.k(); ++j) {
    const auto mask = glyph_region_mask(d.config.features[j], d.config.height,
                                        d.config.width);
    for (const auto& inst : d.instances) {
      double acc = 0.0;
      int count = 0;
      for (std::size_t p = 0; p < mask.size(); ++p) {
        if (mask[p]) {
          acc += inst.x.data()[p];
          ++count;
        }
      }
      const bool detected = acc / count > 0.5;
      CHECK(detected == (inst.f[j] != 0));
    }
  }
}

TEST_CASE("determinism per seed") {
  Dataset a = generate_dataset(two_glyph_config(50, 123));
  Dataset b = generate_dataset(two_glyph_config(50, 123));
  Dataset c = generate_dataset(two_glyph_config(50, 124));
  REQUIRE(a.n() == b.n());
  bool same = true, diff = false;
  for (std::int64_t i = 0; i < a.n(); ++i) {
    same = same && a.instances[i].x.data() == b.instances[i].x.data() &&
           a.instances[i].y == b.instances[i].y &&
           a.instances[i].f == b.instances[i].f;
    diff = diff || a.instances[i].x.data() != c.instances[i].x.data();
  }
  CHECK(same);
  CHECK(diff);
}

TEST_CASE("split is disjoint, exhaustive and seeded") {
  Dataset d = generate_dataset(two_glyph_config(100, 2));
  auto [train, test] = split(d, 0.5, 77);
  CHECK(train.n() == 50);
  CHECK(test.n() == 50);
  auto [train2, test2] = split(d, 0.5, 77);
  for (std::int64_t i = 0; i < train.n(); ++i) {
    CHECK(train.instances[i].x.data() == train2.instances[i].x.data());
  }
  // union of halves equals the original multiset (match on pixel blobs)
  std::vector<std::vector<double>> all;
  for (const auto& inst : train.instances) all.push_back(inst.x.data());
  for (const auto& inst : test.instances) all.push_back(inst.x.data());
  std::vector<std::vector<double>> orig;
  for (const auto& inst : d.instances) orig.push_back(inst.x.data());
  std::sort(all.begin(), all.end());
  std::sort(orig.begin(), orig.end());
  CHECK(all == orig);
  CHECK_THROWS_AS(split(d, 0.0, 1), std::invalid_argument);
}

TEST_CASE("remove_instances") {
  Dataset d = generate_dataset(two_glyph_config(4000, 4));
  const int tf = d.feature_index("target");
  Dataset kept = remove_instances(
      d, [&](const std::vector<std::uint8_t>& f) { return f[tf] == 1; });
  for (const auto& inst : kept.instances) CHECK(inst.f[tf] == 0);
  CHECK(kept.n() ==
        std::count_if(d.instances.begin(), d.instances.end(),
                      [&](const Instance& i) { return i.f[tf] == 0; }));

  Dataset empty = remove_instances(
      d, [](const std::vector<std::uint8_t>&) { return true; });
  CHECK(empty.n() == 0);

  Dataset all = remove_instances(
      d, [](const std::vector<std::uint8_t>&) { return false; });
  CHECK(all.n() == d.n());
}

TEST_CASE("table-3 shaped removal leaves 18000") {
  DatasetConfig c = two_glyph_config(36000, 6);
  c.cell_counts_feature = "target";
  c.cell_counts = CellCounts{2000, 16000, 16000, 2000};
  Dataset d = generate_dataset(c);
  const int tf = d.feature_index("target");
  Dataset kept = remove_instances(
      d, [&](const std::vector<std::uint8_t>& f) { return f[tf] == 1; });
  CHECK(kept.n() == 18000);
}

TEST_CASE("dataset serialization round trip") {
  const fs::path dir = fs::temp_directory_path() / "fud_test_dataset";
  fs::remove_all(dir);
  Dataset d = generate_dataset(two_glyph_config(20, 55));
  save_dataset(d, dir);
  Dataset loaded = load_dataset(dir);
  REQUIRE(loaded.n() == d.n());
  for (std::int64_t i = 0; i < d.n(); ++i) {
    CHECK(loaded.instances[i].x.data() == d.instances[i].x.data());
    CHECK(loaded.instances[i].y == d.instances[i].y);
    CHECK(loaded.instances[i].f == d.instances[i].f);
  }

  // byte-identical re-save
  save_dataset(d, dir / "again");
  std::ifstream a(dir / "data.bin", std::ios::binary);
  std::ifstream b(dir / "again" / "data.bin", std::ios::binary);
  std::string ba((std::istreambuf_iterator<char>(a)), {});
  std::string bb((std::istreambuf_iterator<char>(b)), {});
  CHECK(ba == bb);

  // truncated file is rejected
  std::ofstream trunc(dir / "data.bin",
                      std::ios::binary | std::ios::trunc);
  trunc.write(ba.data(), static_cast<std::streamsize>(ba.size() / 2));
  trunc.close();
  CHECK_THROWS_AS(load_dataset(dir), std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("label noise flips the requested fraction") {
  DatasetConfig c = two_glyph_config(200, 8);
  c.label_noise = 0.25;
  Dataset d = generate_dataset(c);
  const int task = d.feature_index("task");
  std::int64_t flipped = 0;
  for (const auto& inst : d.instances) {
    if (inst.y != inst.f[task]) ++flipped;
  }
  CHECK(flipped == 50);
}
