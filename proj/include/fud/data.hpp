#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fud/tensor.hpp"
#include "json.hpp"

// Planted-feature image datasets: instances are (x, y, f) with x a [C,H,W]
// image in [0,1], y the binary task label and f the per-feature annotation
// bits. Pattern features are glyphs drawn on a 4x4 cell grid; attribute
// features are global tints.

namespace fud {

enum class FeatureKind { pattern, attribute };
enum class GlyphShape { square, cross, triangle };

struct FeatureSpec {
  std::string name;
  FeatureKind kind = FeatureKind::pattern;
  // pattern glyphs
  GlyphShape shape = GlyphShape::square;
  int cell_row = 0;  // 4x4 cell grid
  int cell_col = 0;
  int size_px = 6;
  // attribute tint, per channel, each in [-0.3, 0.3]
  std::vector<double> tint;
};

struct Instance {
  Tensor x;
  int y = 0;
  std::vector<std::uint8_t> f;
};

// joint counts over (task bit, feature bit)
struct CellCounts {
  std::int64_t ff = 0, ft = 0, tf = 0, tt = 0;
  std::int64_t total() const { return ff + ft + tf + tt; }
};

struct DatasetConfig {
  std::int64_t n = 1000;
  int channels = 1;
  int height = 32;
  int width = 32;
  std::vector<FeatureSpec> features;
  std::string task_feature;
  std::map<std::string, double> correlations;  // feature -> corr with task bit
  std::optional<std::string> cell_counts_feature;
  std::optional<CellCounts> cell_counts;
  double noise_amplitude = 0.05;
  double label_noise = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Dataset {
  DatasetConfig config;
  std::vector<Instance> instances;

  std::int64_t n() const { return static_cast<std::int64_t>(instances.size()); }
  int k() const { return static_cast<int>(config.features.size()); }
  int feature_index(const std::string& name) const;
  const FeatureSpec& feature(const std::string& name) const;
};

Dataset generate_dataset(const DatasetConfig& config);
std::pair<Dataset, Dataset> split(const Dataset& dataset,
                                  double train_fraction, std::uint64_t seed);
using AnnotationPredicate =
    std::function<bool(const std::vector<std::uint8_t>&)>;
// keeps the instances where the predicate is false
Dataset remove_instances(const Dataset& dataset,
                         const AnnotationPredicate& predicate);

// ground-truth glyph pixels of a pattern feature, as an H*W 0/1 mask
std::vector<std::uint8_t> glyph_region_mask(const FeatureSpec& feature,
                                            int height, int width);

// batching helpers
Tensor stack_batch(const Dataset& dataset, const std::vector<int>& indices);
std::vector<int> batch_labels(const Dataset& dataset,
                              const std::vector<int>& indices);
// target bits laid out [B, m] for the given feature indices
Tensor batch_feature_bits(const Dataset& dataset,
                          const std::vector<int>& indices,
                          const std::vector<int>& feature_indices);

// directory layout: manifest.json + data.bin ("FUDS" header, doubles)
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

void to_json(nlohmann::json& j, const FeatureSpec& f);
void from_json(const nlohmann::json& j, FeatureSpec& f);
void to_json(nlohmann::json& j, const DatasetConfig& c);
void from_json(const nlohmann::json& j, DatasetConfig& c);

// atomic file write used by every artifact emitter (temp + rename)
void write_file_atomic(const std::filesystem::path& path,
                       const std::string& bytes);

}  // namespace fud
