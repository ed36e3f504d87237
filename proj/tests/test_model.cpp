#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "fud/model.hpp"

using namespace fud;
namespace fs = std::filesystem;

namespace {

Tensor probe_batch(int n = 4, std::uint64_t seed = 3) {
  auto rng = rng::engine(seed);
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  Tensor x = Tensor::zeros({n, 1, 32, 32});
  for (double& v : x.data()) v = dist(rng);
  return x;
}

}  // namespace

TEST_CASE("default classifier produces [N,2] logits") {
  Classifier m(ClassifierSpec{}, 1);
  Tape t;
  Tensor logits = m.forward(t, probe_batch());
  CHECK(logits.shape() == Shape{4, 2});
  CHECK(m.block_shape(1) == Shape{16, 8, 8});
}

TEST_CASE("same seed builds bit-identical parameters") {
  Classifier a(ClassifierSpec{}, 42), b(ClassifierSpec{}, 42);
  Classifier c(ClassifierSpec{}, 43);
  CHECK(snapshot_parameters(a.parameters()) ==
        snapshot_parameters(b.parameters()));
  CHECK(snapshot_parameters(a.parameters()) !=
        snapshot_parameters(c.parameters()));
}

TEST_CASE("spec validation names the problem") {
  ClassifierSpec one_layer;
  one_layer.conv = {{8, 3, 1, -1}};
  CHECK_THROWS_AS(one_layer.validate(), std::invalid_argument);

  ClassifierSpec tiny;
  tiny.in_height = 4;
  tiny.in_width = 4;
  tiny.conv = {{8, 3, 1, -1}, {16, 3, 1, -1}, {16, 3, 1, -1}};
  CHECK_THROWS_WITH_AS(tiny.validate(), doctest::Contains("layer"),
                       std::invalid_argument);
}

TEST_CASE("hooked forward matches plain forward and leaves grads alone") {
  Classifier m(ClassifierSpec{}, 7);
  Tensor x = probe_batch();
  Tape t1, t2;
  Tensor plain = m.forward(t1, x);
  auto [logits, act] = m.forward_hooked(t2, x, 1);
  CHECK(plain.data() == logits.data());
  CHECK(act.shape() == Shape{4, 16, 8, 8});
  for (double v : act.data()) CHECK(v >= 0.0);  // post-relu
  for (const Tensor& p : m.parameters()) {
    for (double g : p.grad()) CHECK(g == 0.0);
  }
  CHECK_THROWS_AS(m.forward_hooked(t2, x, 5), std::invalid_argument);
}

TEST_CASE("remover mask is in (0,1) and apply gates the input") {
  Remover e(RemoverSpec{}, 11);
  Tensor x = probe_batch();
  Tape t;
  Tensor mask = e.mask(t, x);
  CHECK(mask.shape() == Shape{4, 1, 32, 32});
  for (double v : mask.data()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  Tensor gated = e.apply(t, x);
  for (std::int64_t i = 0; i < gated.size(); ++i) {
    CHECK(gated.data()[i] >= 0.0);
    CHECK(gated.data()[i] <= 1.0);
    CHECK(gated.data()[i] ==
          doctest::Approx(x.data()[i] * mask.data()[i]).epsilon(1e-15));
  }
}

TEST_CASE("identifier partitions are validated") {
  Identifier id(IdentifierSpec{}, 5);
  CHECK(id.target_layer() == 1);
  CHECK(id.filter_count() == 16);
  FilterPartition bad;
  bad.k = 3;
  bad.assignment.assign(16, 0);  // group 1 and 2 empty
  CHECK_THROWS_AS(id.set_partition(bad), std::invalid_argument);
  FilterPartition good;
  good.k = 2;
  good.assignment.assign(16, 0);
  for (int i = 8; i < 16; ++i) good.assignment[i] = 1;
  id.set_partition(good);
  CHECK(id.partition()->k == 2);
}

TEST_CASE("checkpoint round trip is bit exact") {
  const fs::path dir = fs::temp_directory_path() / "fud_test_ckpt";
  fs::create_directories(dir);
  Classifier m(ClassifierSpec{}, 9);
  save_checkpoint(m, dir / "m.fumc");
  Classifier loaded = load_classifier(dir / "m.fumc");
  CHECK(snapshot_parameters(loaded.parameters()) ==
        snapshot_parameters(m.parameters()));
  CHECK(loaded.spec() == m.spec());

  // save -> load -> save produces identical bytes
  save_checkpoint(loaded, dir / "m2.fumc");
  std::ifstream a(dir / "m.fumc", std::ios::binary);
  std::ifstream b(dir / "m2.fumc", std::ios::binary);
  std::string ba((std::istreambuf_iterator<char>(a)), {});
  std::string bb((std::istreambuf_iterator<char>(b)), {});
  CHECK(ba == bb);

  // identical forward
  Tensor x = probe_batch();
  Tape t1, t2;
  CHECK(m.forward(t1, x).data() == loaded.forward(t2, x).data());

  // truncated checkpoint is rejected
  std::ofstream trunc(dir / "short.fumc", std::ios::binary);
  trunc.write(ba.data(), static_cast<std::streamsize>(ba.size() - 16));
  trunc.close();
  CHECK_THROWS_AS(load_classifier(dir / "short.fumc"), std::runtime_error);

  // wrong kind is rejected
  Remover e(RemoverSpec{}, 2);
  save_checkpoint(e, dir / "e.fumc");
  CHECK(checkpoint_kind(dir / "e.fumc") == ModelKind::remover);
  CHECK_THROWS_AS(load_classifier(dir / "e.fumc"), std::runtime_error);

  // identifier keeps its partition through the round trip
  Identifier id(IdentifierSpec{}, 5);
  FilterPartition part;
  part.k = 4;
  part.assignment.resize(16);
  for (int i = 0; i < 16; ++i) part.assignment[i] = i % 4;
  id.set_partition(part);
  save_checkpoint(id, dir / "id.fumc");
  Identifier id2 = load_identifier(dir / "id.fumc");
  CHECK(id2.partition().has_value());
  CHECK(*id2.partition() == part);
  fs::remove_all(dir);
}

TEST_CASE("freeze guard restores requires_grad") {
  Classifier m(ClassifierSpec{}, 3);
  {
    FreezeGuard guard(m.parameters());
    for (const Tensor& p : m.parameters()) CHECK_FALSE(p.requires_grad());
  }
  for (const Tensor& p : m.parameters()) CHECK(p.requires_grad());
}

TEST_CASE("mlp forward shape and range") {
  Mlp attack(MlpSpec{2, {256, 128}}, 1);
  Tensor x = Tensor::from_data({3, 2}, {0.9, 0.1, 0.5, 0.5, 0.2, 0.8});
  Tape t;
  Tensor p = attack.forward(t, x);
  CHECK(p.shape() == Shape{3, 1});
  for (double v : p.data()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}
