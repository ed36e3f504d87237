#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fud/tensor.hpp"
#include "json.hpp"

namespace fud {

struct ConvSpec {
  int filters = 8;
  int kernel = 3;
  int stride = 1;
  int pad = -1;  // -1: kernel/2 ("same" for odd kernels)

  int effective_pad() const { return pad < 0 ? kernel / 2 : pad; }
  bool operator==(const ConvSpec&) const = default;
};

// conv blocks are conv -> bias -> relu -> 2x2 max pool; then two linear
// layers with a relu in between.
struct ClassifierSpec {
  int in_channels = 1;
  int in_height = 32;
  int in_width = 32;
  std::vector<ConvSpec> conv = {{8, 3, 1, -1}, {16, 3, 1, -1}};
  int hidden = 64;
  int classes = 2;

  void validate() const;
  bool operator==(const ClassifierSpec&) const = default;
};

class Classifier {
 public:
  Classifier() = default;
  Classifier(ClassifierSpec spec, std::uint64_t seed);

  Tensor forward(Tape& tape, const Tensor& x) const;  // logits [N,classes]
  // (logits, post-relu output of conv block layer_id)
  std::pair<Tensor, Tensor> forward_hooked(Tape& tape, const Tensor& x,
                                           int layer_id) const;
  std::vector<Tensor> parameters() const;
  const ClassifierSpec& spec() const { return spec_; }
  // {filters, h, w} after conv block `layer`
  Shape block_shape(int layer) const;
  int conv_layers() const { return static_cast<int>(conv_.size()); }

 private:
  friend Classifier checkpoint_to_classifier(const nlohmann::json&,
                                             const std::string&,
                                             std::size_t&);
  ClassifierSpec spec_;
  struct ConvParams {
    Tensor kernel, bias;
  };
  std::vector<ConvParams> conv_;
  Tensor w1_, b1_, w2_, b2_;
};

// encoder blocks: conv -> relu -> pool; decoder blocks: upsample -> conv ->
// relu; then a 1x1 conv + sigmoid mask head with as many channels as the
// input image.
struct RemoverSpec {
  int in_channels = 1;
  int in_height = 32;
  int in_width = 32;
  std::vector<ConvSpec> encoder = {{8, 3, 1, -1}, {16, 3, 1, -1}};
  std::vector<ConvSpec> decoder = {{8, 3, 1, -1}, {8, 3, 1, -1}};

  void validate() const;
  bool operator==(const RemoverSpec&) const = default;
};

class Remover {
 public:
  Remover() = default;
  Remover(RemoverSpec spec, std::uint64_t seed);

  Tensor mask(Tape& tape, const Tensor& x) const;   // values in (0,1)
  Tensor apply(Tape& tape, const Tensor& x) const;  // x ⊙ mask(x)
  std::vector<Tensor> parameters() const;
  const RemoverSpec& spec() const { return spec_; }

 private:
  friend Remover checkpoint_to_remover(const nlohmann::json&,
                                       const std::string&, std::size_t&);
  RemoverSpec spec_;
  struct ConvParams {
    Tensor kernel, bias;
  };
  std::vector<ConvParams> encoder_, decoder_;
  ConvParams head_;
};

struct IdentifierSpec {
  ClassifierSpec net;
  int target_layer = -1;  // -1: last conv block

  int resolved_layer() const {
    return target_layer < 0 ? static_cast<int>(net.conv.size()) - 1
                            : target_layer;
  }
  void validate() const;
  bool operator==(const IdentifierSpec&) const = default;
};

class Identifier {
 public:
  Identifier() = default;
  Identifier(IdentifierSpec spec, std::uint64_t seed);

  Classifier& net() { return net_; }
  const Classifier& net() const { return net_; }
  int target_layer() const { return spec_.resolved_layer(); }
  int filter_count() const { return net_.block_shape(target_layer())[0]; }
  const IdentifierSpec& spec() const { return spec_; }

  const std::optional<FilterPartition>& partition() const {
    return partition_;
  }
  void set_partition(FilterPartition partition);

 private:
  IdentifierSpec spec_;
  Classifier net_;
  std::optional<FilterPartition> partition_;
};

// relu MLP with a sigmoid scalar head (the membership attack model)
struct MlpSpec {
  int in = 2;
  std::vector<int> hidden = {256, 128};

  void validate() const;
  bool operator==(const MlpSpec&) const = default;
};

class Mlp {
 public:
  Mlp() = default;
  Mlp(MlpSpec spec, std::uint64_t seed);

  Tensor forward(Tape& tape, const Tensor& x) const;  // [N,1] probabilities
  std::vector<Tensor> parameters() const;
  const MlpSpec& spec() const { return spec_; }

 private:
  friend Mlp checkpoint_to_mlp(const nlohmann::json&, const std::string&,
                               std::size_t&);
  MlpSpec spec_;
  struct Layer {
    Tensor weight, bias;
  };
  std::vector<Layer> layers_;
};

void set_requires_grad(const std::vector<Tensor>& params, bool value);
std::vector<double> snapshot_parameters(const std::vector<Tensor>& params);
void restore_parameters(const std::vector<Tensor>& params,
                        const std::vector<double>& snapshot);

// temporarily drops requires_grad on wrapped params (frozen eval passes)
class FreezeGuard {
 public:
  explicit FreezeGuard(std::vector<Tensor> params);
  ~FreezeGuard();
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  std::vector<Tensor> params_;
  std::vector<bool> was_;
};

enum class ModelKind { classifier, remover, identifier, mlp };

void save_checkpoint(const Classifier& model,
                     const std::filesystem::path& path);
void save_checkpoint(const Remover& model, const std::filesystem::path& path);
void save_checkpoint(const Identifier& model,
                     const std::filesystem::path& path);
void save_checkpoint(const Mlp& model, const std::filesystem::path& path);

ModelKind checkpoint_kind(const std::filesystem::path& path);
Classifier load_classifier(const std::filesystem::path& path);
Remover load_remover(const std::filesystem::path& path);
Identifier load_identifier(const std::filesystem::path& path);
Mlp load_mlp(const std::filesystem::path& path);

void to_json(nlohmann::json& j, const ConvSpec& s);
void from_json(const nlohmann::json& j, ConvSpec& s);
void to_json(nlohmann::json& j, const ClassifierSpec& s);
void from_json(const nlohmann::json& j, ClassifierSpec& s);
void to_json(nlohmann::json& j, const RemoverSpec& s);
void from_json(const nlohmann::json& j, RemoverSpec& s);
void to_json(nlohmann::json& j, const IdentifierSpec& s);
void from_json(const nlohmann::json& j, IdentifierSpec& s);
void to_json(nlohmann::json& j, const MlpSpec& s);
void from_json(const nlohmann::json& j, MlpSpec& s);

}  // namespace fud
