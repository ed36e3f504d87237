#include "fud/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace fud {

namespace {

constexpr double kBackground = 0.1;
constexpr double kGlyphValue = 0.9;
constexpr int kGridCells = 4;

std::vector<std::pair<int, int>> glyph_pixels(const FeatureSpec& f, int height,
                                              int width) {
  const int ch = height / kGridCells;
  const int cw = width / kGridCells;
  const int s = f.size_px;
  const int r0 = f.cell_row * ch + (ch - s) / 2;
  const int c0 = f.cell_col * cw + (cw - s) / 2;
  std::vector<std::pair<int, int>> px;
  switch (f.shape) {
    case GlyphShape::square:
      for (int i = 0; i < s; ++i) {
        for (int j = 0; j < s; ++j) px.emplace_back(r0 + i, c0 + j);
      }
      break;
    case GlyphShape::cross: {
      const int t = std::max(1, s / 3);
      const int lo = (s - t) / 2;
      for (int i = 0; i < s; ++i) {
        for (int j = 0; j < s; ++j) {
          const bool hband = i >= lo && i < lo + t;
          const bool vband = j >= lo && j < lo + t;
          if (hband || vband) px.emplace_back(r0 + i, c0 + j);
        }
      }
      break;
    }
    case GlyphShape::triangle:
      for (int i = 0; i < s; ++i) {
        for (int j = 0; j <= i; ++j) px.emplace_back(r0 + i, c0 + j);
      }
      break;
  }
  return px;
}

// counts of f=1 per label stratum hitting marginal 0.5 and the target phi
std::pair<std::int64_t, std::int64_t> stratum_positive_counts(
    std::int64_t n_neg, std::int64_t n_pos, double corr,
    const std::string& name) {
  const double n = static_cast<double>(n_neg + n_pos);
  const double py = static_cast<double>(n_pos) / n;
  const double p11 = py / 2.0 + corr * std::sqrt(py * (1.0 - py)) / 2.0;
  const double p01 = 0.5 - p11;  // f=1, y=0
  const auto c1 = static_cast<std::int64_t>(std::llround(p11 * n));
  const auto c0 = static_cast<std::int64_t>(std::llround(p01 * n));
  if (c1 < 0 || c1 > n_pos || c0 < 0 || c0 > n_neg) {
    throw std::invalid_argument(
        "generate_dataset: correlation " + std::to_string(corr) +
        " for feature '" + name + "' is infeasible with these marginals");
  }
  return {c0, c1};
}

}  // namespace

void DatasetConfig::validate() const {
  if (n <= 0) throw std::invalid_argument("dataset config: n must be > 0");
  if (channels <= 0 || height <= 0 || width <= 0) {
    throw std::invalid_argument("dataset config: bad image dims");
  }
  if (height % kGridCells != 0 || width % kGridCells != 0) {
    throw std::invalid_argument(
        "dataset config: image dims must be multiples of 4 (cell grid)");
  }
  if (noise_amplitude < 0.0) {
    throw std::invalid_argument("dataset config: noise amplitude < 0");
  }
  if (label_noise < 0.0 || label_noise > 1.0) {
    throw std::invalid_argument("dataset config: label noise outside [0,1]");
  }
  if (features.empty()) {
    throw std::invalid_argument("dataset config: needs at least one feature");
  }
  bool task_found = false;
  const int ch = height / kGridCells, cw = width / kGridCells;
  std::vector<std::pair<int, int>> cells;
  for (const auto& f : features) {
    if (f.name.empty()) {
      throw std::invalid_argument("dataset config: unnamed feature");
    }
    if (f.name == task_feature) task_found = true;
    if (f.kind == FeatureKind::pattern) {
      if (f.cell_row < 0 || f.cell_row >= kGridCells || f.cell_col < 0 ||
          f.cell_col >= kGridCells) {
        throw std::invalid_argument("feature '" + f.name +
                                    "': cell outside the 4x4 grid");
      }
      if (f.size_px < 3 || f.size_px > std::min(ch, cw)) {
        throw std::invalid_argument("feature '" + f.name +
                                    "': glyph size must fit its cell");
      }
      const auto cell = std::make_pair(f.cell_row, f.cell_col);
      if (std::find(cells.begin(), cells.end(), cell) != cells.end()) {
        throw std::invalid_argument("feature '" + f.name +
                                    "': glyph cell already occupied");
      }
      cells.push_back(cell);
    } else {
      if (f.tint.size() != static_cast<std::size_t>(channels)) {
        throw std::invalid_argument("feature '" + f.name +
                                    "': tint must have one entry per channel");
      }
      for (double t : f.tint) {
        if (t < -0.3 || t > 0.3) {
          throw std::invalid_argument("feature '" + f.name +
                                      "': tint outside [-0.3, 0.3]");
        }
      }
    }
  }
  if (!task_found) {
    throw std::invalid_argument("dataset config: task feature '" +
                                task_feature + "' not in feature list");
  }
  for (const auto& [name, corr] : correlations) {
    bool known = false;
    for (const auto& f : features) known = known || f.name == name;
    if (!known) {
      throw std::invalid_argument("dataset config: correlation for unknown '" +
                                  name + "'");
    }
    if (corr < -1.0 || corr > 1.0) {
      throw std::invalid_argument("dataset config: correlation for '" + name +
                                  "' outside [-1,1]");
    }
  }
  if (cell_counts.has_value() != cell_counts_feature.has_value()) {
    throw std::invalid_argument(
        "dataset config: cell counts need a feature name and vice versa");
  }
  if (cell_counts) {
    const auto& c = *cell_counts;
    if (c.ff < 0 || c.ft < 0 || c.tf < 0 || c.tt < 0 || c.total() != n) {
      throw std::invalid_argument(
          "dataset config: cell counts must be nonnegative and sum to n");
    }
    bool known = false;
    for (const auto& f : features) {
      known = known || f.name == *cell_counts_feature;
    }
    if (!known || *cell_counts_feature == task_feature) {
      throw std::invalid_argument(
          "dataset config: cell-count feature must be a non-task feature");
    }
  }
}

int Dataset::feature_index(const std::string& name) const {
  for (std::size_t i = 0; i < config.features.size(); ++i) {
    if (config.features[i].name == name) return static_cast<int>(i);
  }
  throw std::invalid_argument("dataset: unknown feature '" + name + "'");
}

const FeatureSpec& Dataset::feature(const std::string& name) const {
  return config.features[feature_index(name)];
}

Dataset generate_dataset(const DatasetConfig& config) {
  config.validate();
  const std::int64_t n = config.n;
  const int k = static_cast<int>(config.features.size());
  int task_idx = 0;
  for (int j = 0; j < k; ++j) {
    if (config.features[j].name == config.task_feature) task_idx = j;
  }

  // labels first
  std::vector<std::uint8_t> y(n, 0);
  std::vector<std::vector<std::uint8_t>> bits(
      k, std::vector<std::uint8_t>(n, 0));
  std::int64_t n_pos;
  if (config.cell_counts) {
    const auto& c = *config.cell_counts;
    n_pos = c.tf + c.tt;
    const int cf = [&] {
      for (int j = 0; j < k; ++j) {
        if (config.features[j].name == *config.cell_counts_feature) return j;
      }
      return -1;
    }();
    std::int64_t i = 0;
    for (std::int64_t r = 0; r < c.ff; ++r, ++i) {
      y[i] = 0;
      bits[cf][i] = 0;
    }
    for (std::int64_t r = 0; r < c.ft; ++r, ++i) {
      y[i] = 0;
      bits[cf][i] = 1;
    }
    for (std::int64_t r = 0; r < c.tf; ++r, ++i) {
      y[i] = 1;
      bits[cf][i] = 0;
    }
    for (std::int64_t r = 0; r < c.tt; ++r, ++i) {
      y[i] = 1;
      bits[cf][i] = 1;
    }
  } else {
    n_pos = n / 2;
    for (std::int64_t i = n - n_pos; i < n; ++i) y[i] = 1;
  }
  const std::int64_t n_neg = n - n_pos;
  bits[task_idx].assign(y.begin(), y.end());

  // per-stratum index pools, shuffled per feature
  std::vector<std::int64_t> neg_idx, pos_idx;
  for (std::int64_t i = 0; i < n; ++i) (y[i] ? pos_idx : neg_idx).push_back(i);

  for (int j = 0; j < k; ++j) {
    if (j == task_idx) continue;
    if (config.cell_counts &&
        config.features[j].name == *config.cell_counts_feature) {
      continue;
    }
    double corr = 0.0;
    if (auto it = config.correlations.find(config.features[j].name);
        it != config.correlations.end()) {
      corr = it->second;
    }
    const auto [c0, c1] = stratum_positive_counts(n_neg, n_pos, corr,
                                                  config.features[j].name);
    auto rng = rng::engine(rng::derive(config.seed, 0x1000 + j));
    std::vector<std::int64_t> neg = neg_idx, pos = pos_idx;
    std::shuffle(neg.begin(), neg.end(), rng);
    std::shuffle(pos.begin(), pos.end(), rng);
    for (std::int64_t r = 0; r < c0; ++r) bits[j][neg[r]] = 1;
    for (std::int64_t r = 0; r < c1; ++r) bits[j][pos[r]] = 1;
  }

  // optional label noise on top of the task bit
  if (config.label_noise > 0.0) {
    const auto flips =
        static_cast<std::int64_t>(std::llround(config.label_noise * n));
    std::vector<std::int64_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    auto rng = rng::engine(rng::derive(config.seed, 0x2000));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::int64_t r = 0; r < flips; ++r) {
      y[order[r]] = static_cast<std::uint8_t>(1 - y[order[r]]);
    }
  }

  // presentation order
  std::vector<std::int64_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  {
    auto rng = rng::engine(rng::derive(config.seed, 0x3000));
    std::shuffle(perm.begin(), perm.end(), rng);
  }

  // render
  std::vector<std::vector<std::pair<int, int>>> glyphs(k);
  for (int j = 0; j < k; ++j) {
    if (config.features[j].kind == FeatureKind::pattern) {
      glyphs[j] = glyph_pixels(config.features[j], config.height,
                               config.width);
    }
  }
  const std::int64_t chw = static_cast<std::int64_t>(config.channels) *
                           config.height * config.width;
  Dataset out;
  out.config = config;
  out.instances.resize(n);
  parallel_for(n, [&](std::int64_t row) {
    const std::int64_t src = perm[row];
    Instance inst;
    inst.y = y[src];
    inst.f.resize(k);
    for (int j = 0; j < k; ++j) inst.f[j] = bits[j][src];
    inst.x = Tensor::full({config.channels, config.height, config.width},
                          kBackground);
    auto& px = inst.x.data();
    for (int j = 0; j < k; ++j) {
      if (!inst.f[j]) continue;
      const auto& feat = config.features[j];
      if (feat.kind == FeatureKind::pattern) {
        for (int c = 0; c < config.channels; ++c) {
          const std::int64_t plane =
              static_cast<std::int64_t>(c) * config.height * config.width;
          for (const auto& [r, q] : glyphs[j]) {
            px[plane + static_cast<std::int64_t>(r) * config.width + q] =
                kGlyphValue;
          }
        }
      } else {
        for (int c = 0; c < config.channels; ++c) {
          const std::int64_t plane =
              static_cast<std::int64_t>(c) * config.height * config.width;
          for (std::int64_t p = 0;
               p < static_cast<std::int64_t>(config.height) * config.width;
               ++p) {
            px[plane + p] += feat.tint[c];
          }
        }
      }
    }
    if (config.noise_amplitude > 0.0) {
      auto rng = rng::engine(rng::derive(config.seed, 0x100000 + row));
      std::uniform_real_distribution<double> noise(-config.noise_amplitude,
                                                   config.noise_amplitude);
      for (std::int64_t p = 0; p < chw; ++p) px[p] += noise(rng);
    }
    for (std::int64_t p = 0; p < chw; ++p) px[p] = std::clamp(px[p], 0.0, 1.0);
    out.instances[row] = std::move(inst);
  });
  return out;
}

std::pair<Dataset, Dataset> split(const Dataset& dataset,
                                  double train_fraction, std::uint64_t seed) {
  if (train_fraction <= 0.0 || train_fraction >= 1.0) {
    throw std::invalid_argument("split: fraction must be in (0,1)");
  }
  std::vector<std::int64_t> order(dataset.n());
  std::iota(order.begin(), order.end(), 0);
  auto rng = rng::engine(rng::derive(seed, 0x5511));
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::int64_t>(
      std::llround(train_fraction * static_cast<double>(dataset.n())));
  Dataset train, test;
  train.config = dataset.config;
  test.config = dataset.config;
  for (std::int64_t i = 0; i < dataset.n(); ++i) {
    (i < n_train ? train : test)
        .instances.push_back(dataset.instances[order[i]]);
  }
  train.config.n = train.n();
  test.config.n = test.n();
  return {std::move(train), std::move(test)};
}

Dataset remove_instances(const Dataset& dataset,
                         const AnnotationPredicate& predicate) {
  Dataset out;
  out.config = dataset.config;
  for (const auto& inst : dataset.instances) {
    if (!predicate(inst.f)) out.instances.push_back(inst);
  }
  out.config.n = out.n();
  return out;
}

std::vector<std::uint8_t> glyph_region_mask(const FeatureSpec& feature,
                                            int height, int width) {
  if (feature.kind != FeatureKind::pattern) {
    throw std::invalid_argument("glyph_region_mask: '" + feature.name +
                                "' is not a pattern feature");
  }
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(height) * width, 0);
  for (const auto& [r, c] : glyph_pixels(feature, height, width)) {
    mask[static_cast<std::size_t>(r) * width + c] = 1;
  }
  return mask;
}

Tensor stack_batch(const Dataset& dataset, const std::vector<int>& indices) {
  if (indices.empty()) throw std::invalid_argument("stack_batch: empty batch");
  const auto& c = dataset.config;
  const std::int64_t chw =
      static_cast<std::int64_t>(c.channels) * c.height * c.width;
  Tensor out = Tensor::zeros(
      {static_cast<int>(indices.size()), c.channels, c.height, c.width});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& inst = dataset.instances.at(indices[b]);
    std::copy(inst.x.data().begin(), inst.x.data().end(),
              out.data().begin() + static_cast<std::int64_t>(b) * chw);
  }
  return out;
}

std::vector<int> batch_labels(const Dataset& dataset,
                              const std::vector<int>& indices) {
  std::vector<int> out(indices.size());
  for (std::size_t b = 0; b < indices.size(); ++b) {
    out[b] = dataset.instances.at(indices[b]).y;
  }
  return out;
}

Tensor batch_feature_bits(const Dataset& dataset,
                          const std::vector<int>& indices,
                          const std::vector<int>& feature_indices) {
  const int m = static_cast<int>(feature_indices.size());
  Tensor out = Tensor::zeros({static_cast<int>(indices.size()), m});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& inst = dataset.instances.at(indices[b]);
    for (int j = 0; j < m; ++j) {
      out.data()[static_cast<std::int64_t>(b) * m + j] =
          inst.f.at(feature_indices[j]) ? 1.0 : 0.0;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// serialization

namespace {

constexpr char kDatasetMagic[4] = {'F', 'U', 'D', 'S'};
constexpr std::uint32_t kDatasetVersion = 1;

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(const std::string& in, std::size_t& off) {
  if (off + sizeof(T) > in.size()) {
    throw std::runtime_error("dataset format: truncated file");
  }
  T value;
  std::memcpy(&value, in.data() + off, sizeof(T));
  off += sizeof(T);
  return value;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot open " + path.string());
  }
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  return bytes;
}

}  // namespace

void write_file_atomic(const std::filesystem::path& path,
                       const std::string& bytes) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::string blob;
  blob.append(kDatasetMagic, 4);
  put<std::uint32_t>(blob, kDatasetVersion);
  put<std::uint64_t>(blob, static_cast<std::uint64_t>(dataset.n()));
  put<std::uint32_t>(blob, dataset.config.channels);
  put<std::uint32_t>(blob, dataset.config.height);
  put<std::uint32_t>(blob, dataset.config.width);
  put<std::uint32_t>(blob, dataset.k());
  for (const auto& inst : dataset.instances) {
    for (double v : inst.x.data()) put<double>(blob, v);
  }
  for (const auto& inst : dataset.instances) {
    put<double>(blob, static_cast<double>(inst.y));
  }
  for (const auto& inst : dataset.instances) {
    for (int j = 0; j < dataset.k(); ++j) {
      put<double>(blob, inst.f[j] ? 1.0 : 0.0);
    }
  }
  write_file_atomic(dir / "data.bin", blob);

  nlohmann::json counts = nlohmann::json::object();
  for (int j = 0; j < dataset.k(); ++j) {
    std::int64_t cells[4] = {0, 0, 0, 0};
    for (const auto& inst : dataset.instances) {
      ++cells[inst.y * 2 + (inst.f[j] ? 1 : 0)];
    }
    counts[dataset.config.features[j].name] = {cells[0], cells[1], cells[2],
                                               cells[3]};
  }
  nlohmann::json manifest = {{"kind", "fud-dataset"},
                             {"config", dataset.config},
                             {"joint_counts_y_f", counts}};
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
  Dataset out;
  out.config = manifest.at("config").get<DatasetConfig>();
  const std::string blob = read_file(dir / "data.bin");
  std::size_t off = 0;
  if (blob.size() < 4 || std::memcmp(blob.data(), kDatasetMagic, 4) != 0) {
    throw std::runtime_error("dataset format: bad magic");
  }
  off = 4;
  if (take<std::uint32_t>(blob, off) != kDatasetVersion) {
    throw std::runtime_error("dataset format: unsupported version");
  }
  const auto n = static_cast<std::int64_t>(take<std::uint64_t>(blob, off));
  const int c = static_cast<int>(take<std::uint32_t>(blob, off));
  const int h = static_cast<int>(take<std::uint32_t>(blob, off));
  const int w = static_cast<int>(take<std::uint32_t>(blob, off));
  const int k = static_cast<int>(take<std::uint32_t>(blob, off));
  if (c != out.config.channels || h != out.config.height ||
      w != out.config.width || k != static_cast<int>(out.config.features.size())) {
    throw std::runtime_error("dataset format: header disagrees with manifest");
  }
  const std::int64_t chw = static_cast<std::int64_t>(c) * h * w;
  const std::size_t want =
      off + sizeof(double) * static_cast<std::size_t>(n * (chw + 1 + k));
  if (blob.size() != want) {
    throw std::runtime_error("dataset format: truncated file");
  }
  out.instances.resize(n);
  for (std::int64_t i = 0; i < n; ++i) {
    Tensor x = Tensor::zeros({c, h, w});
    for (std::int64_t p = 0; p < chw; ++p) {
      x.data()[p] = take<double>(blob, off);
    }
    out.instances[i].x = std::move(x);
  }
  for (std::int64_t i = 0; i < n; ++i) {
    out.instances[i].y = static_cast<int>(take<double>(blob, off));
  }
  for (std::int64_t i = 0; i < n; ++i) {
    out.instances[i].f.resize(k);
    for (int j = 0; j < k; ++j) {
      out.instances[i].f[j] = take<double>(blob, off) != 0.0 ? 1 : 0;
    }
  }
  out.config.n = n;
  return out;
}

// ---------------------------------------------------------------------------
// JSON

void to_json(nlohmann::json& j, const FeatureSpec& f) {
  j = {{"name", f.name},
       {"kind", f.kind == FeatureKind::pattern ? "pattern" : "attribute"}};
  if (f.kind == FeatureKind::pattern) {
    const char* shape = f.shape == GlyphShape::square
                            ? "square"
                            : (f.shape == GlyphShape::cross ? "cross"
                                                            : "triangle");
    j["shape"] = shape;
    j["cell_row"] = f.cell_row;
    j["cell_col"] = f.cell_col;
    j["size_px"] = f.size_px;
  } else {
    j["tint"] = f.tint;
  }
}

void from_json(const nlohmann::json& j, FeatureSpec& f) {
  f.name = j.at("name").get<std::string>();
  const auto kind = j.at("kind").get<std::string>();
  if (kind != "pattern" && kind != "attribute") {
    throw std::invalid_argument("feature kind must be pattern|attribute");
  }
  f.kind = kind == "pattern" ? FeatureKind::pattern : FeatureKind::attribute;
  if (f.kind == FeatureKind::pattern) {
    const auto shape = j.value("shape", std::string("square"));
    if (shape == "square") {
      f.shape = GlyphShape::square;
    } else if (shape == "cross") {
      f.shape = GlyphShape::cross;
    } else if (shape == "triangle") {
      f.shape = GlyphShape::triangle;
    } else {
      throw std::invalid_argument("unknown glyph shape '" + shape + "'");
    }
    f.cell_row = j.value("cell_row", 0);
    f.cell_col = j.value("cell_col", 0);
    f.size_px = j.value("size_px", 6);
  } else {
    f.tint = j.at("tint").get<std::vector<double>>();
  }
}

void to_json(nlohmann::json& j, const DatasetConfig& c) {
  j = {{"n", c.n},
       {"channels", c.channels},
       {"height", c.height},
       {"width", c.width},
       {"features", c.features},
       {"task_feature", c.task_feature},
       {"noise_amplitude", c.noise_amplitude},
       {"label_noise", c.label_noise},
       {"seed", c.seed}};
  if (!c.correlations.empty()) j["correlations"] = c.correlations;
  if (c.cell_counts) {
    j["cell_counts"] = {{"feature", *c.cell_counts_feature},
                        {"ff", c.cell_counts->ff},
                        {"ft", c.cell_counts->ft},
                        {"tf", c.cell_counts->tf},
                        {"tt", c.cell_counts->tt}};
  }
}

void from_json(const nlohmann::json& j, DatasetConfig& c) {
  c = DatasetConfig{};
  c.n = j.value("n", static_cast<std::int64_t>(1000));
  c.channels = j.value("channels", 1);
  c.height = j.value("height", 32);
  c.width = j.value("width", 32);
  c.features = j.at("features").get<std::vector<FeatureSpec>>();
  c.task_feature = j.at("task_feature").get<std::string>();
  if (j.contains("correlations")) {
    c.correlations =
        j.at("correlations").get<std::map<std::string, double>>();
  }
  if (j.contains("cell_counts")) {
    const auto& cc = j.at("cell_counts");
    c.cell_counts_feature = cc.at("feature").get<std::string>();
    CellCounts counts;
    counts.ff = cc.at("ff").get<std::int64_t>();
    counts.ft = cc.at("ft").get<std::int64_t>();
    counts.tf = cc.at("tf").get<std::int64_t>();
    counts.tt = cc.at("tt").get<std::int64_t>();
    c.cell_counts = counts;
  }
  c.noise_amplitude = j.value("noise_amplitude", 0.05);
  c.label_noise = j.value("label_noise", 0.0);
  c.seed = j.value("seed", static_cast<std::uint64_t>(0));
}

}  // namespace fud
