#include "fud/model.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include "fud/data.hpp"

namespace fud {

namespace {

struct BlockDims {
  int c, h, w;
};

BlockDims conv_block_out(const BlockDims& in, const ConvSpec& s, bool pool,
                         const std::string& where, int index) {
  const int pad = s.effective_pad();
  if (s.kernel > in.h + 2 * pad || s.kernel > in.w + 2 * pad) {
    throw std::invalid_argument(where + " layer " + std::to_string(index) +
                                ": kernel does not fit its input");
  }
  BlockDims out;
  out.c = s.filters;
  out.h = (in.h + 2 * pad - s.kernel) / s.stride + 1;
  out.w = (in.w + 2 * pad - s.kernel) / s.stride + 1;
  if (pool) {
    if (out.h < 2 || out.w < 2) {
      throw std::invalid_argument(where + " layer " + std::to_string(index) +
                                  ": output too small to pool");
    }
    out.h /= 2;
    out.w /= 2;
  }
  return out;
}

void check_probe(const Tensor& x, int c, int h, int w, const char* who) {
  if (x.shape().size() != 4 || x.dim(1) != c || x.dim(2) != h ||
      x.dim(3) != w) {
    throw std::invalid_argument(std::string(who) + ": expected [N," +
                                std::to_string(c) + "," + std::to_string(h) +
                                "," + std::to_string(w) + "], got " +
                                shape_str(x.shape()));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Classifier

void ClassifierSpec::validate() const {
  if (conv.size() < 2) {
    throw std::invalid_argument(
        "classifier spec: needs at least 2 conv layers (a higher conv layer "
        "must exist)");
  }
  if (in_channels < 1 || in_height < 1 || in_width < 1) {
    throw std::invalid_argument("classifier spec: bad input dims");
  }
  if (hidden < 1 || classes < 1) {
    throw std::invalid_argument("classifier spec: bad head dims");
  }
  BlockDims dims{in_channels, in_height, in_width};
  for (std::size_t i = 0; i < conv.size(); ++i) {
    dims = conv_block_out(dims, conv[i], true, "classifier conv",
                          static_cast<int>(i));
  }
}

Classifier::Classifier(ClassifierSpec spec, std::uint64_t seed)
    : spec_(std::move(spec)) {
  spec_.validate();
  auto rng = rng::engine(seed);
  BlockDims dims{spec_.in_channels, spec_.in_height, spec_.in_width};
  for (std::size_t i = 0; i < spec_.conv.size(); ++i) {
    const ConvSpec& c = spec_.conv[i];
    const int fan_in = dims.c * c.kernel * c.kernel;
    ConvParams p;
    p.kernel = Tensor::he_uniform({c.filters, dims.c, c.kernel, c.kernel},
                                  fan_in, rng);
    p.kernel.set_requires_grad(true);
    p.bias = Tensor::zeros({c.filters}, true);
    conv_.push_back(std::move(p));
    dims = conv_block_out(dims, c, true, "classifier conv",
                          static_cast<int>(i));
  }
  const int flat = dims.c * dims.h * dims.w;
  w1_ = Tensor::he_uniform({spec_.hidden, flat}, flat, rng);
  w1_.set_requires_grad(true);
  b1_ = Tensor::zeros({spec_.hidden}, true);
  w2_ = Tensor::he_uniform({spec_.classes, spec_.hidden}, spec_.hidden, rng);
  w2_.set_requires_grad(true);
  b2_ = Tensor::zeros({spec_.classes}, true);
}

Shape Classifier::block_shape(int layer) const {
  if (layer < 0 || layer >= conv_layers()) {
    throw std::invalid_argument("classifier: conv layer " +
                                std::to_string(layer) + " out of range");
  }
  BlockDims dims{spec_.in_channels, spec_.in_height, spec_.in_width};
  for (int i = 0; i <= layer; ++i) {
    dims = conv_block_out(dims, spec_.conv[i], true, "classifier conv", i);
  }
  return {dims.c, dims.h, dims.w};
}

Tensor Classifier::forward(Tape& tape, const Tensor& x) const {
  return forward_hooked(tape, x, conv_layers() - 1).first;
}

std::pair<Tensor, Tensor> Classifier::forward_hooked(Tape& tape,
                                                     const Tensor& x,
                                                     int layer_id) const {
  if (conv_.empty()) throw std::logic_error("classifier: not built");
  if (layer_id < 0 || layer_id >= conv_layers()) {
    throw std::invalid_argument("forward_hooked: layer " +
                                std::to_string(layer_id) + " out of range");
  }
  check_probe(x, spec_.in_channels, spec_.in_height, spec_.in_width,
              "classifier forward");
  Tensor h = x;
  Tensor hooked;
  for (int i = 0; i < conv_layers(); ++i) {
    const ConvSpec& c = spec_.conv[i];
    h = tape.conv2d(h, conv_[i].kernel, c.stride, c.effective_pad());
    h = tape.channel_bias(h, conv_[i].bias);
    h = tape.relu(h);
    h = tape.max_pool2(h);
    if (i == layer_id) hooked = h;
  }
  const Shape flat_shape = {h.dim(0), static_cast<int>(h.size() / h.dim(0))};
  h = tape.reshape(h, flat_shape);
  h = tape.relu(tape.linear(h, w1_, b1_));
  Tensor logits = tape.linear(h, w2_, b2_);
  return {logits, hooked};
}

std::vector<Tensor> Classifier::parameters() const {
  std::vector<Tensor> out;
  for (const auto& p : conv_) {
    out.push_back(p.kernel);
    out.push_back(p.bias);
  }
  out.push_back(w1_);
  out.push_back(b1_);
  out.push_back(w2_);
  out.push_back(b2_);
  return out;
}

// ---------------------------------------------------------------------------
// Remover

void RemoverSpec::validate() const {
  if (encoder.empty() || decoder.empty()) {
    throw std::invalid_argument("remover spec: encoder/decoder empty");
  }
  if (encoder.size() != decoder.size()) {
    throw std::invalid_argument(
        "remover spec: encoder and decoder depth must match so the mask "
        "regains the input size");
  }
  const int factor = 1 << encoder.size();
  if (in_height % factor != 0 || in_width % factor != 0) {
    throw std::invalid_argument(
        "remover spec: input dims must be divisible by 2^depth");
  }
  BlockDims dims{in_channels, in_height, in_width};
  for (std::size_t i = 0; i < encoder.size(); ++i) {
    dims = conv_block_out(dims, encoder[i], true, "remover encoder",
                          static_cast<int>(i));
  }
  for (std::size_t i = 0; i < decoder.size(); ++i) {
    dims.h *= 2;
    dims.w *= 2;
    dims = conv_block_out(dims, decoder[i], false, "remover decoder",
                          static_cast<int>(i));
  }
  if (dims.h != in_height || dims.w != in_width) {
    throw std::invalid_argument(
        "remover spec: decoder does not restore the input size");
  }
}

Remover::Remover(RemoverSpec spec, std::uint64_t seed)
    : spec_(std::move(spec)) {
  spec_.validate();
  auto rng = rng::engine(seed);
  BlockDims dims{spec_.in_channels, spec_.in_height, spec_.in_width};
  for (std::size_t i = 0; i < spec_.encoder.size(); ++i) {
    const ConvSpec& c = spec_.encoder[i];
    const int fan_in = dims.c * c.kernel * c.kernel;
    ConvParams p;
    p.kernel = Tensor::he_uniform({c.filters, dims.c, c.kernel, c.kernel},
                                  fan_in, rng);
    p.kernel.set_requires_grad(true);
    p.bias = Tensor::zeros({c.filters}, true);
    encoder_.push_back(std::move(p));
    dims = conv_block_out(dims, c, true, "remover encoder",
                          static_cast<int>(i));
  }
  for (std::size_t i = 0; i < spec_.decoder.size(); ++i) {
    const ConvSpec& c = spec_.decoder[i];
    const int fan_in = dims.c * c.kernel * c.kernel;
    ConvParams p;
    p.kernel = Tensor::he_uniform({c.filters, dims.c, c.kernel, c.kernel},
                                  fan_in, rng);
    p.kernel.set_requires_grad(true);
    p.bias = Tensor::zeros({c.filters}, true);
    decoder_.push_back(std::move(p));
    dims.h *= 2;
    dims.w *= 2;
    dims = conv_block_out(dims, c, false, "remover decoder",
                          static_cast<int>(i));
  }
  head_.kernel = Tensor::he_uniform({spec_.in_channels, dims.c, 1, 1}, dims.c,
                                    rng);
  head_.kernel.set_requires_grad(true);
  head_.bias = Tensor::zeros({spec_.in_channels}, true);
}

Tensor Remover::mask(Tape& tape, const Tensor& x) const {
  if (encoder_.empty()) throw std::logic_error("remover: not built");
  check_probe(x, spec_.in_channels, spec_.in_height, spec_.in_width,
              "remover forward");
  Tensor h = x;
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    const ConvSpec& c = spec_.encoder[i];
    h = tape.conv2d(h, encoder_[i].kernel, c.stride, c.effective_pad());
    h = tape.channel_bias(h, encoder_[i].bias);
    h = tape.relu(h);
    h = tape.max_pool2(h);
  }
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    const ConvSpec& c = spec_.decoder[i];
    h = tape.upsample_nearest2(h);
    h = tape.conv2d(h, decoder_[i].kernel, c.stride, c.effective_pad());
    h = tape.channel_bias(h, decoder_[i].bias);
    h = tape.relu(h);
  }
  h = tape.conv2d(h, head_.kernel, 1, 0);
  h = tape.channel_bias(h, head_.bias);
  return tape.sigmoid(h);
}

Tensor Remover::apply(Tape& tape, const Tensor& x) const {
  return tape.mul(x, mask(tape, x));
}

std::vector<Tensor> Remover::parameters() const {
  std::vector<Tensor> out;
  for (const auto& p : encoder_) {
    out.push_back(p.kernel);
    out.push_back(p.bias);
  }
  for (const auto& p : decoder_) {
    out.push_back(p.kernel);
    out.push_back(p.bias);
  }
  out.push_back(head_.kernel);
  out.push_back(head_.bias);
  return out;
}

// ---------------------------------------------------------------------------
// Identifier

void IdentifierSpec::validate() const {
  net.validate();
  const int layers = static_cast<int>(net.conv.size());
  const int layer = resolved_layer();
  if (layer < 0 || layer >= layers) {
    throw std::invalid_argument("identifier spec: target layer " +
                                std::to_string(target_layer) +
                                " is not a conv layer");
  }
}

Identifier::Identifier(IdentifierSpec spec, std::uint64_t seed)
    : spec_(std::move(spec)) {
  spec_.validate();
  net_ = Classifier(spec_.net, seed);
}

void Identifier::set_partition(FilterPartition partition) {
  partition.validate(filter_count());
  partition_ = std::move(partition);
}

// ---------------------------------------------------------------------------
// Mlp

void MlpSpec::validate() const {
  if (in < 1) throw std::invalid_argument("mlp spec: bad input dim");
  for (int h : hidden) {
    if (h < 1) throw std::invalid_argument("mlp spec: bad hidden dim");
  }
}

Mlp::Mlp(MlpSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  spec_.validate();
  auto rng = rng::engine(seed);
  int prev = spec_.in;
  for (int width : spec_.hidden) {
    Layer l;
    l.weight = Tensor::he_uniform({width, prev}, prev, rng);
    l.weight.set_requires_grad(true);
    l.bias = Tensor::zeros({width}, true);
    layers_.push_back(std::move(l));
    prev = width;
  }
  Layer out;
  out.weight = Tensor::he_uniform({1, prev}, prev, rng);
  out.weight.set_requires_grad(true);
  out.bias = Tensor::zeros({1}, true);
  layers_.push_back(std::move(out));
}

Tensor Mlp::forward(Tape& tape, const Tensor& x) const {
  if (layers_.empty()) throw std::logic_error("mlp: not built");
  Tensor h = x;
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) {
    h = tape.relu(tape.linear(h, layers_[i].weight, layers_[i].bias));
  }
  h = tape.linear(h, layers_.back().weight, layers_.back().bias);
  return tape.sigmoid(h);
}

std::vector<Tensor> Mlp::parameters() const {
  std::vector<Tensor> out;
  for (const auto& l : layers_) {
    out.push_back(l.weight);
    out.push_back(l.bias);
  }
  return out;
}

// ---------------------------------------------------------------------------
// parameter utilities

void set_requires_grad(const std::vector<Tensor>& params, bool value) {
  for (const Tensor& p : params) {
    Tensor t = p;
    t.set_requires_grad(value);
  }
}

std::vector<double> snapshot_parameters(const std::vector<Tensor>& params) {
  std::vector<double> out;
  for (const Tensor& p : params) {
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return out;
}

void restore_parameters(const std::vector<Tensor>& params,
                        const std::vector<double>& snapshot) {
  std::size_t off = 0;
  for (const Tensor& p : params) {
    Tensor t = p;
    if (off + t.data().size() > snapshot.size()) {
      throw std::invalid_argument("restore_parameters: snapshot too short");
    }
    std::copy(snapshot.begin() + off, snapshot.begin() + off + t.data().size(),
              t.data().begin());
    off += t.data().size();
  }
}

FreezeGuard::FreezeGuard(std::vector<Tensor> params)
    : params_(std::move(params)) {
  was_.reserve(params_.size());
  for (Tensor& p : params_) {
    was_.push_back(p.requires_grad());
    p.set_requires_grad(false);
  }
}

FreezeGuard::~FreezeGuard() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    params_[i].set_requires_grad(was_[i]);
  }
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {

constexpr char kModelMagic[4] = {'F', 'U', 'M', 'C'};
constexpr std::uint32_t kModelVersion = 1;

std::string kind_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::classifier:
      return "classifier";
    case ModelKind::remover:
      return "remover";
    case ModelKind::identifier:
      return "identifier";
    case ModelKind::mlp:
      return "mlp";
  }
  throw std::logic_error("unknown model kind");
}

void append_params(std::string& blob, const std::vector<Tensor>& params) {
  for (const Tensor& p : params) {
    const auto& d = p.data();
    const char* raw = reinterpret_cast<const char*>(d.data());
    blob.append(raw, d.size() * sizeof(double));
  }
}

void read_params(const std::string& blob, std::size_t& off,
                 const std::vector<Tensor>& params) {
  for (const Tensor& p : params) {
    Tensor t = p;
    const std::size_t bytes = t.data().size() * sizeof(double);
    if (off + bytes > blob.size()) {
      throw std::runtime_error("checkpoint format: truncated parameter block");
    }
    std::memcpy(t.data().data(), blob.data() + off, bytes);
    off += bytes;
  }
}

std::string checkpoint_blob(ModelKind kind, const nlohmann::json& meta,
                            const std::vector<Tensor>& params) {
  nlohmann::json header = meta;
  header["kind"] = kind_name(kind);
  const std::string js = header.dump();
  std::string blob;
  blob.append(kModelMagic, 4);
  const std::uint32_t version = kModelVersion;
  blob.append(reinterpret_cast<const char*>(&version), sizeof(version));
  const std::uint64_t len = js.size();
  blob.append(reinterpret_cast<const char*>(&len), sizeof(len));
  blob.append(js);
  append_params(blob, params);
  return blob;
}

nlohmann::json parse_checkpoint_header(const std::string& blob,
                                       std::size_t& off) {
  if (blob.size() < 16 || std::memcmp(blob.data(), kModelMagic, 4) != 0) {
    throw std::runtime_error("checkpoint format: bad magic");
  }
  std::uint32_t version;
  std::memcpy(&version, blob.data() + 4, sizeof(version));
  if (version != kModelVersion) {
    throw std::runtime_error("checkpoint format: unsupported version " +
                             std::to_string(version));
  }
  std::uint64_t len;
  std::memcpy(&len, blob.data() + 8, sizeof(len));
  if (16 + len > blob.size()) {
    throw std::runtime_error("checkpoint format: truncated header");
  }
  off = 16 + len;
  return nlohmann::json::parse(blob.substr(16, len));
}

std::string read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

void expect_kind(const nlohmann::json& header, const char* want) {
  const auto got = header.at("kind").get<std::string>();
  if (got != want) {
    throw std::runtime_error("checkpoint holds a " + got + ", expected " +
                             std::string(want));
  }
}

void expect_consumed(const std::string& blob, std::size_t off) {
  if (off != blob.size()) {
    throw std::runtime_error("checkpoint format: trailing bytes");
  }
}

}  // namespace

void save_checkpoint(const Classifier& model,
                     const std::filesystem::path& path) {
  nlohmann::json meta = {{"spec", model.spec()}};
  write_file_atomic(path, checkpoint_blob(ModelKind::classifier, meta,
                                          model.parameters()));
}

void save_checkpoint(const Remover& model, const std::filesystem::path& path) {
  nlohmann::json meta = {{"spec", model.spec()}};
  write_file_atomic(
      path, checkpoint_blob(ModelKind::remover, meta, model.parameters()));
}

void save_checkpoint(const Identifier& model,
                     const std::filesystem::path& path) {
  nlohmann::json meta = {{"spec", model.spec()}};
  if (model.partition()) {
    meta["partition"] = {{"k", model.partition()->k},
                         {"assignment", model.partition()->assignment}};
  }
  write_file_atomic(path, checkpoint_blob(ModelKind::identifier, meta,
                                          model.net().parameters()));
}

void save_checkpoint(const Mlp& model, const std::filesystem::path& path) {
  nlohmann::json meta = {{"spec", model.spec()}};
  write_file_atomic(path,
                    checkpoint_blob(ModelKind::mlp, meta, model.parameters()));
}

ModelKind checkpoint_kind(const std::filesystem::path& path) {
  const std::string blob = read_checkpoint(path);
  std::size_t off;
  const auto header = parse_checkpoint_header(blob, off);
  const auto kind = header.at("kind").get<std::string>();
  if (kind == "classifier") return ModelKind::classifier;
  if (kind == "remover") return ModelKind::remover;
  if (kind == "identifier") return ModelKind::identifier;
  if (kind == "mlp") return ModelKind::mlp;
  throw std::runtime_error("checkpoint format: unknown kind '" + kind + "'");
}

Classifier load_classifier(const std::filesystem::path& path) {
  const std::string blob = read_checkpoint(path);
  std::size_t off;
  const auto header = parse_checkpoint_header(blob, off);
  expect_kind(header, "classifier");
  Classifier model(header.at("spec").get<ClassifierSpec>(), 0);
  read_params(blob, off, model.parameters());
  expect_consumed(blob, off);
  return model;
}

Remover load_remover(const std::filesystem::path& path) {
  const std::string blob = read_checkpoint(path);
  std::size_t off;
  const auto header = parse_checkpoint_header(blob, off);
  expect_kind(header, "remover");
  Remover model(header.at("spec").get<RemoverSpec>(), 0);
  read_params(blob, off, model.parameters());
  expect_consumed(blob, off);
  return model;
}

Identifier load_identifier(const std::filesystem::path& path) {
  const std::string blob = read_checkpoint(path);
  std::size_t off;
  const auto header = parse_checkpoint_header(blob, off);
  expect_kind(header, "identifier");
  Identifier model(header.at("spec").get<IdentifierSpec>(), 0);
  read_params(blob, off, model.net().parameters());
  expect_consumed(blob, off);
  if (header.contains("partition")) {
    FilterPartition p;
    p.k = header.at("partition").at("k").get<int>();
    p.assignment =
        header.at("partition").at("assignment").get<std::vector<int>>();
    model.set_partition(std::move(p));
  }
  return model;
}

Mlp load_mlp(const std::filesystem::path& path) {
  const std::string blob = read_checkpoint(path);
  std::size_t off;
  const auto header = parse_checkpoint_header(blob, off);
  expect_kind(header, "mlp");
  Mlp model(header.at("spec").get<MlpSpec>(), 0);
  read_params(blob, off, model.parameters());
  expect_consumed(blob, off);
  return model;
}

// ---------------------------------------------------------------------------
// JSON

void to_json(nlohmann::json& j, const ConvSpec& s) {
  j = {{"filters", s.filters},
       {"kernel", s.kernel},
       {"stride", s.stride},
       {"pad", s.pad}};
}

void from_json(const nlohmann::json& j, ConvSpec& s) {
  s.filters = j.at("filters").get<int>();
  s.kernel = j.at("kernel").get<int>();
  s.stride = j.value("stride", 1);
  s.pad = j.value("pad", -1);
}

void to_json(nlohmann::json& j, const ClassifierSpec& s) {
  j = {{"in_channels", s.in_channels}, {"in_height", s.in_height},
       {"in_width", s.in_width},       {"conv", s.conv},
       {"hidden", s.hidden},           {"classes", s.classes}};
}

void from_json(const nlohmann::json& j, ClassifierSpec& s) {
  s = ClassifierSpec{};
  s.in_channels = j.value("in_channels", 1);
  s.in_height = j.value("in_height", 32);
  s.in_width = j.value("in_width", 32);
  if (j.contains("conv")) s.conv = j.at("conv").get<std::vector<ConvSpec>>();
  s.hidden = j.value("hidden", 64);
  s.classes = j.value("classes", 2);
}

void to_json(nlohmann::json& j, const RemoverSpec& s) {
  j = {{"in_channels", s.in_channels}, {"in_height", s.in_height},
       {"in_width", s.in_width},       {"encoder", s.encoder},
       {"decoder", s.decoder}};
}

void from_json(const nlohmann::json& j, RemoverSpec& s) {
  s = RemoverSpec{};
  s.in_channels = j.value("in_channels", 1);
  s.in_height = j.value("in_height", 32);
  s.in_width = j.value("in_width", 32);
  if (j.contains("encoder")) {
    s.encoder = j.at("encoder").get<std::vector<ConvSpec>>();
  }
  if (j.contains("decoder")) {
    s.decoder = j.at("decoder").get<std::vector<ConvSpec>>();
  }
}

void to_json(nlohmann::json& j, const IdentifierSpec& s) {
  j = {{"net", s.net}, {"target_layer", s.target_layer}};
}

void from_json(const nlohmann::json& j, IdentifierSpec& s) {
  s = IdentifierSpec{};
  s.net = j.at("net").get<ClassifierSpec>();
  s.target_layer = j.value("target_layer", -1);
}

void to_json(nlohmann::json& j, const MlpSpec& s) {
  j = {{"in", s.in}, {"hidden", s.hidden}};
}

void from_json(const nlohmann::json& j, MlpSpec& s) {
  s.in = j.at("in").get<int>();
  s.hidden = j.value("hidden", std::vector<int>{256, 128});
}

}  // namespace fud
