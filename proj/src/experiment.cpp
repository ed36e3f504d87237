#include "fud/experiment.hpp"

#include <fstream>
#include <iostream>

#include "fud/adversarial.hpp"
#include "fud/blind.hpp"
#include "fud/data.hpp"
#include "fud/evaluate.hpp"
#include "fud/identify.hpp"
#include "fud/model.hpp"
#include "fud/train.hpp"

namespace fud {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kToolVersion = "0.1.0";

void check_keys(const json& j, const std::string& where,
                std::initializer_list<const char*> allowed) {
  if (!j.is_object()) {
    throw SchemaError(where + ": expected an object");
  }
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) {
      throw SchemaError(where + ": unknown key '" + key + "'");
    }
  }
}

const json& require(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) {
    throw SchemaError(where + ": missing required key '" + key + "'");
  }
  return j.at(key);
}

void check_feature_keys(const json& j, const std::string& where) {
  check_keys(j, where,
             {"name", "kind", "shape", "cell_row", "cell_col", "size_px",
              "tint"});
}

void check_dataset_config_keys(const json& j, const std::string& where) {
  check_keys(j, where,
             {"n", "channels", "height", "width", "features", "task_feature",
              "correlations", "cell_counts", "noise_amplitude", "label_noise",
              "seed"});
  if (j.contains("features")) {
    int i = 0;
    for (const auto& f : j.at("features")) {
      check_feature_keys(f, where + ".features[" + std::to_string(i++) + "]");
    }
  }
  if (j.contains("cell_counts")) {
    check_keys(j.at("cell_counts"), where + ".cell_counts",
               {"feature", "ff", "ft", "tf", "tt"});
  }
}

void check_conv_keys(const json& j, const std::string& where) {
  check_keys(j, where, {"filters", "kernel", "stride", "pad"});
}

void check_classifier_spec_keys(const json& j, const std::string& where) {
  check_keys(j, where,
             {"in_channels", "in_height", "in_width", "conv", "hidden",
              "classes"});
  if (j.contains("conv")) {
    int i = 0;
    for (const auto& c : j.at("conv")) {
      check_conv_keys(c, where + ".conv[" + std::to_string(i++) + "]");
    }
  }
}

void check_train_keys(const json& j, const std::string& where) {
  check_keys(j, where, {"epochs", "lr", "batch_size", "momentum", "seed"});
}

TrainConfig parse_train(const json& j, const std::string& where) {
  check_train_keys(j, where);
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.momentum = j.value("momentum", c.momentum);
  c.seed = j.value("seed", c.seed);
  return c;
}

json load_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw SchemaError("config " + path.string() + ": " + e.what());
  }
  return j;
}

void write_manifest(const fs::path& out_dir, const std::string& command,
                    const json& resolved_config) {
  json manifest = {{"command", command},
                   {"config", resolved_config},
                   {"tool", {{"name", "fud"}, {"version", kToolVersion}}}};
  write_file_atomic(out_dir / "manifest.json", manifest.dump(2) + "\n");
}

ClassifierSpec classifier_spec_for(const json& j, const Dataset& data,
                                   int classes, const std::string& where) {
  ClassifierSpec spec;
  if (!j.is_null()) {
    check_classifier_spec_keys(j, where);
    spec = j.get<ClassifierSpec>();
  }
  if (!j.contains("in_channels")) spec.in_channels = data.config.channels;
  if (!j.contains("in_height")) spec.in_height = data.config.height;
  if (!j.contains("in_width")) spec.in_width = data.config.width;
  if (!j.contains("classes")) spec.classes = classes;
  spec.validate();
  return spec;
}

std::vector<int> parse_targets(const json& j, const Dataset& data,
                               const std::string& where) {
  if (!j.is_array() || j.empty()) {
    throw SchemaError(where + ": expected a non-empty array of feature names");
  }
  std::vector<int> out;
  for (const auto& name : j) {
    out.push_back(data.feature_index(name.get<std::string>()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// gen-data

void run_gen_data(const json& config, const fs::path& out_dir) {
  check_keys(config, "gen-data", {"dataset", "seed"});
  const json& dj = require(config, "dataset", "gen-data");
  check_dataset_config_keys(dj, "gen-data.dataset");
  DatasetConfig dc = dj.get<DatasetConfig>();
  Dataset dataset = generate_dataset(dc);
  save_dataset(dataset, out_dir / "dataset");
  write_manifest(out_dir, "gen-data", config);
}

// ---------------------------------------------------------------------------
// train

void run_train(const json& config, const fs::path& out_dir) {
  check_keys(config, "train",
             {"dataset", "role", "model", "targets", "train", "eval_fraction",
              "model_seed", "seed"});
  Dataset data = load_dataset(require(config, "dataset", "train")
                                  .get<std::string>());
  const std::string role = config.value("role", std::string("classifier"));
  if (role != "classifier" && role != "adversary") {
    throw SchemaError("train.role: expected classifier|adversary");
  }
  const TrainConfig tc =
      parse_train(config.value("train", json::object()), "train.train");
  const double eval_fraction = config.value("eval_fraction", 0.2);
  const auto model_seed = config.value("model_seed", std::uint64_t{1});
  auto [train_split, eval_split] =
      split(data, 1.0 - eval_fraction, rng::derive(tc.seed, 0xE7A1));

  json metrics;
  if (role == "classifier") {
    ClassifierSpec spec = classifier_spec_for(config.value("model", json()),
                                              data, 2, "train.model");
    Classifier model(spec, model_seed);
    metrics["train_loss"] = train_classifier(model, train_split, tc);
    metrics["accuracy"] = accuracy(model, eval_split);
    save_checkpoint(model, out_dir / "model.fumc");
  } else {
    const auto targets =
        parse_targets(require(config, "targets", "train"), data, "train.targets");
    ClassifierSpec spec = classifier_spec_for(
        config.value("model", json()), data,
        static_cast<int>(targets.size()), "train.model");
    Classifier model(spec, model_seed);
    train_adversary(model, train_split, targets, tc);
    metrics["head_accuracy"] =
        adversary_head_accuracy(model, eval_split, targets);
    metrics["accuracy"] = adversary_accuracy(model, eval_split, targets);
    save_checkpoint(model, out_dir / "model.fumc");
  }
  write_file_atomic(out_dir / "metrics.json", metrics.dump(2) + "\n");
  write_manifest(out_dir, "train", config);
}

// ---------------------------------------------------------------------------
// unlearn-annotated

AdvUnlearnConfig parse_unlearn(const json& j, const Dataset& data,
                               std::vector<int>* targets) {
  check_keys(j, "unlearn",
             {"beta", "lambda", "iterations", "lr_remover", "lr_finetune",
              "lr_adversary", "batch_size", "adversary_epochs", "targets",
              "seed"});
  AdvUnlearnConfig c;
  c.beta = j.value("beta", c.beta);
  c.lambda = j.value("lambda", c.lambda);
  c.iterations = j.value("iterations", c.iterations);
  c.lr_remover = j.value("lr_remover", c.lr_remover);
  c.lr_finetune = j.value("lr_finetune", c.lr_finetune);
  c.lr_adversary = j.value("lr_adversary", c.lr_adversary);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.adversary_epochs = j.value("adversary_epochs", c.adversary_epochs);
  c.seed = j.value("seed", c.seed);
  c.target_features =
      parse_targets(require(j, "targets", "unlearn"), data, "unlearn.targets");
  *targets = c.target_features;
  return c;
}

void run_unlearn_annotated(const json& config, const fs::path& out_dir) {
  check_keys(config, "unlearn-annotated",
             {"dataset", "model", "adversary", "remover", "unlearn",
              "eval_fraction", "checkpoint_every", "resume", "seed"});
  Dataset data =
      load_dataset(require(config, "dataset", "unlearn-annotated")
                       .get<std::string>());
  std::vector<int> targets;
  const AdvUnlearnConfig uc = parse_unlearn(
      require(config, "unlearn", "unlearn-annotated"), data, &targets);
  const double eval_fraction = config.value("eval_fraction", 0.25);
  auto [train_split, eval_split] =
      split(data, 1.0 - eval_fraction, rng::derive(uc.seed, 0xE7A1));

  const json resume = config.value("resume", json());
  int start_iteration = 0;
  Classifier m;
  Remover remover;
  Classifier adversary;
  UnlearnTrace trace;
  if (!resume.is_null()) {
    const fs::path state = resume.get<std::string>();
    m = load_classifier(state / "model.fumc");
    remover = load_remover(state / "remover.fumc");
    adversary = load_classifier(state / "adversary.fumc");
    trace = UnlearnTrace::read_csv(state / "trace.csv");
    const json st = load_json(state / "state.json");
    start_iteration = st.at("next_iteration").get<int>();
  } else {
    m = load_classifier(require(config, "model", "unlearn-annotated")
                            .get<std::string>());
    const json aj = config.value("adversary", json::object());
    check_keys(aj, "unlearn-annotated.adversary",
               {"checkpoint", "model", "model_seed"});
    if (aj.contains("checkpoint")) {
      adversary = load_classifier(aj.at("checkpoint").get<std::string>());
    } else {
      ClassifierSpec spec = classifier_spec_for(
          aj.value("model", json()), data, static_cast<int>(targets.size()),
          "unlearn-annotated.adversary.model");
      adversary = Classifier(spec, aj.value("model_seed", std::uint64_t{2}));
      TrainConfig tc;
      tc.epochs = uc.adversary_epochs;
      tc.lr = uc.lr_adversary;
      tc.batch_size = uc.batch_size;
      tc.seed = rng::derive(uc.seed, 0xADA0);
      train_adversary(adversary, train_split, targets, tc);
    }
    const json rj = config.value("remover", json::object());
    check_keys(rj, "unlearn-annotated.remover",
               {"checkpoint", "model_seed"});
    if (rj.contains("checkpoint")) {
      remover = load_remover(rj.at("checkpoint").get<std::string>());
    } else {
      RemoverSpec rs;
      rs.in_channels = data.config.channels;
      rs.in_height = data.config.height;
      rs.in_width = data.config.width;
      remover = Remover(rs, rj.value("model_seed", std::uint64_t{3}));
    }
  }

  const int checkpoint_every = config.value("checkpoint_every", 0);
  auto save_state = [&](int next_iteration) {
    const fs::path state = out_dir / "state";
    fs::create_directories(state);
    save_checkpoint(m, state / "model.fumc");
    save_checkpoint(remover, state / "remover.fumc");
    save_checkpoint(adversary, state / "adversary.fumc");
    trace.write_csv(state / "trace.csv");
    write_file_atomic(state / "state.json",
                      json{{"next_iteration", next_iteration}}.dump(2) + "\n");
  };

  if (checkpoint_every > 0) {
    for (int at = start_iteration; at < uc.iterations;) {
      const int stop = std::min(uc.iterations, at + checkpoint_every);
      AdvUnlearnConfig chunk = uc;
      chunk.iterations = stop;
      auto result = unlearn_annotated(m, remover, adversary, train_split,
                                      eval_split, chunk, at);
      trace.rows.insert(trace.rows.end(), result.trace.rows.begin(),
                        result.trace.rows.end());
      at = stop;
      save_state(at);
    }
  } else {
    auto result = unlearn_annotated(m, remover, adversary, train_split,
                                    eval_split, uc, start_iteration);
    trace.rows.insert(trace.rows.end(), result.trace.rows.begin(),
                      result.trace.rows.end());
  }

  save_checkpoint(m, out_dir / "model_unlearned.fumc");
  save_checkpoint(remover, out_dir / "remover.fumc");
  save_checkpoint(adversary, out_dir / "adversary.fumc");
  trace.write_csv(out_dir / "trace.csv");
  write_manifest(out_dir, "unlearn-annotated", config);
}

// ---------------------------------------------------------------------------
// identify

void run_identify(const json& config, const fs::path& out_dir) {
  check_keys(config, "identify",
             {"dataset", "identifier", "target_layer", "train",
              "probe_fraction", "model_seed", "seed"});
  Dataset data =
      load_dataset(require(config, "dataset", "identify").get<std::string>());
  const json tj = config.value("train", json::object());
  check_keys(tj, "identify.train",
             {"gamma", "epochs_phase1", "epochs_phase2", "lr_phase1",
              "lr_phase2", "batch_size", "probe_size", "seed"});
  IdentifierTrainConfig tc;
  tc.gamma = tj.value("gamma", tc.gamma);
  tc.epochs_phase1 = tj.value("epochs_phase1", tc.epochs_phase1);
  tc.epochs_phase2 = tj.value("epochs_phase2", tc.epochs_phase2);
  tc.lr_phase1 = tj.value("lr_phase1", tc.lr_phase1);
  tc.lr_phase2 = tj.value("lr_phase2", tc.lr_phase2);
  tc.batch_size = tj.value("batch_size", tc.batch_size);
  tc.probe_size = tj.value("probe_size", tc.probe_size);
  tc.seed = tj.value("seed", tc.seed);

  IdentifierSpec spec;
  spec.net = classifier_spec_for(config.value("identifier", json()), data, 2,
                                 "identify.identifier");
  spec.target_layer = config.value("target_layer", -1);
  Identifier identifier(spec, config.value("model_seed", std::uint64_t{4}));

  const double probe_fraction = config.value("probe_fraction", 0.2);
  auto [train_split, probe_pool] =
      split(data, 1.0 - probe_fraction, rng::derive(tc.seed, 0xE7A1));
  IdentifyResult result =
      train_identifier(identifier, train_split, probe_pool, tc);

  save_checkpoint(identifier, out_dir / "identifier.fumc");
  write_similarity_csv(result.similarity, out_dir / "similarity.csv");
  json rj = {{"k", result.k},
             {"assignment", result.partition.assignment},
             {"phase1_loss", result.phase1_loss},
             {"phase2_loss", result.phase2_loss}};
  write_file_atomic(out_dir / "result.json", rj.dump(2) + "\n");
  write_manifest(out_dir, "identify", config);
}

// ---------------------------------------------------------------------------
// unlearn-blind

void run_unlearn_blind(const json& config, const fs::path& out_dir) {
  check_keys(config, "unlearn-blind",
             {"dataset", "model", "identifier", "encode", "eval_fraction",
              "seed"});
  Dataset data = load_dataset(
      require(config, "dataset", "unlearn-blind").get<std::string>());
  Classifier m = load_classifier(
      require(config, "model", "unlearn-blind").get<std::string>());
  Identifier identifier = load_identifier(
      require(config, "identifier", "unlearn-blind").get<std::string>());
  const json ej = require(config, "encode", "unlearn-blind");
  check_keys(ej, "unlearn-blind.encode",
             {"group", "align_feature", "threshold", "fill", "lr", "epochs",
              "batch_size", "seed"});
  EncodeConfig ec;
  ec.threshold = ej.value("threshold", ec.threshold);
  ec.fill = ej.value("fill", ec.fill);
  ec.lr = ej.value("lr", ec.lr);
  ec.epochs = ej.value("epochs", ec.epochs);
  ec.batch_size = ej.value("batch_size", ec.batch_size);
  ec.seed = ej.value("seed", ec.seed);
  const double eval_fraction = config.value("eval_fraction", 0.25);
  auto [train_split, eval_split] =
      split(data, 1.0 - eval_fraction, rng::derive(ec.seed, 0xE7A1));
  if (ej.contains("group") == ej.contains("align_feature")) {
    throw SchemaError(
        "unlearn-blind.encode: give exactly one of group | align_feature");
  }
  if (ej.contains("group")) {
    ec.group_id = ej.at("group").get<int>();
  } else {
    const int feature =
        data.feature_index(ej.at("align_feature").get<std::string>());
    Dataset probe;
    probe.config = eval_split.config;
    for (std::int64_t i = 0;
         i < std::min<std::int64_t>(64, eval_split.n()); ++i) {
      probe.instances.push_back(eval_split.instances[i]);
    }
    probe.config.n = probe.n();
    ec.group_id = aligned_group(identifier, probe, feature, ec.threshold);
  }

  BlindResult result = unlearn_blind(m, identifier, train_split, eval_split,
                                     ec);
  save_checkpoint(m, out_dir / "model_unlearned.fumc");
  result.trace.write_csv(out_dir / "trace.csv");
  json rj = {{"group", ec.group_id}};
  write_file_atomic(out_dir / "result.json", rj.dump(2) + "\n");
  write_manifest(out_dir, "unlearn-blind", config);
}

// ---------------------------------------------------------------------------
// evaluate

void run_evaluate(const json& config, const fs::path& out_dir) {
  check_keys(config, "evaluate", {"model", "dataset", "metrics", "seed"});
  Classifier model =
      load_classifier(require(config, "model", "evaluate").get<std::string>());
  Dataset data =
      load_dataset(require(config, "dataset", "evaluate").get<std::string>());
  const json& metrics = require(config, "metrics", "evaluate");
  check_keys(metrics, "evaluate.metrics",
             {"accuracy", "adversary_accuracy", "saliency", "mia", "inversion",
              "fairness"});
  json report;

  if (metrics.contains("accuracy")) {
    check_keys(metrics.at("accuracy"), "evaluate.metrics.accuracy", {});
    report["accuracy"] = accuracy(model, data);
  }
  if (metrics.contains("adversary_accuracy")) {
    const json& aj = metrics.at("adversary_accuracy");
    check_keys(aj, "evaluate.metrics.adversary_accuracy",
               {"adversary", "targets", "remover"});
    Classifier adversary = load_classifier(
        require(aj, "adversary", "adversary_accuracy").get<std::string>());
    const auto targets = parse_targets(
        require(aj, "targets", "adversary_accuracy"), data,
        "adversary_accuracy.targets");
    std::optional<Remover> remover;
    if (aj.contains("remover")) {
      remover = load_remover(aj.at("remover").get<std::string>());
    }
    report["adversary_accuracy"] = adversary_accuracy(
        adversary, data, targets, remover ? &*remover : nullptr);
    report["adversary_head_accuracy"] = adversary_head_accuracy(
        adversary, data, targets, remover ? &*remover : nullptr);
  }
  if (metrics.contains("saliency")) {
    const json& sj = metrics.at("saliency");
    check_keys(sj, "evaluate.metrics.saliency",
               {"class", "count", "region_feature"});
    const int class_id = sj.value("class", 1);
    const auto count =
        std::min<std::int64_t>(sj.value("count", 8), data.n());
    const auto& feature =
        data.feature(require(sj, "region_feature", "saliency")
                         .get<std::string>());
    const auto region =
        glyph_region_mask(feature, data.config.height, data.config.width);
    double acc = 0.0;
    for (std::int64_t i = 0; i < count; ++i) {
      const SaliencyMap map =
          guided_saliency(model, data.instances[i].x, class_id);
      acc += region_energy(map, region);
    }
    report["saliency_region_energy"] = acc / static_cast<double>(count);
  }
  if (metrics.contains("mia")) {
    const json& mj = metrics.at("mia");
    check_keys(mj, "evaluate.metrics.mia",
               {"members", "nonmembers", "shadow_pool", "shadow_models",
                "shadow_epochs", "batch_size", "shadow_lr", "attack_epochs",
                "attack_lr", "seed"});
    Dataset members =
        load_dataset(require(mj, "members", "mia").get<std::string>());
    Dataset nonmembers =
        load_dataset(require(mj, "nonmembers", "mia").get<std::string>());
    Dataset shadow_pool =
        load_dataset(require(mj, "shadow_pool", "mia").get<std::string>());
    MiaConfig mc;
    mc.shadow_models = mj.value("shadow_models", mc.shadow_models);
    mc.shadow_epochs = mj.value("shadow_epochs", mc.shadow_epochs);
    mc.batch_size = mj.value("batch_size", mc.batch_size);
    mc.shadow_lr = mj.value("shadow_lr", mc.shadow_lr);
    mc.attack_epochs = mj.value("attack_epochs", mc.attack_epochs);
    mc.attack_lr = mj.value("attack_lr", mc.attack_lr);
    mc.seed = mj.value("seed", mc.seed);
    mc.shadow_spec = model.spec();
    report["mia_attack_accuracy"] =
        mia_attack(model, members, nonmembers, shadow_pool, mc);
  }
  if (metrics.contains("inversion")) {
    const json& ij = metrics.at("inversion");
    check_keys(ij, "evaluate.metrics.inversion",
               {"class", "steps", "lr", "region_feature"});
    const Tensor image =
        model_inversion(model, ij.value("class", 1), ij.value("steps", 200),
                        ij.value("lr", 1.0));
    const auto& feature = data.feature(
        require(ij, "region_feature", "inversion").get<std::string>());
    const auto region =
        glyph_region_mask(feature, data.config.height, data.config.width);
    double inside = 0.0, outside = 0.0;
    std::int64_t n_in = 0, n_out = 0;
    const std::int64_t hw =
        static_cast<std::int64_t>(data.config.height) * data.config.width;
    for (std::int64_t p = 0; p < hw; ++p) {
      if (region[p]) {
        inside += image.data()[p];
        ++n_in;
      } else {
        outside += image.data()[p];
        ++n_out;
      }
    }
    report["inversion_region_mean"] = inside / static_cast<double>(n_in);
    report["inversion_background_mean"] = outside / static_cast<double>(n_out);
    report["inversion_contrast"] = inside / static_cast<double>(n_in) -
                                   outside / static_cast<double>(n_out);
  }
  if (metrics.contains("fairness")) {
    const json& fj = metrics.at("fairness");
    check_keys(fj, "evaluate.metrics.fairness", {"group_feature"});
    const int group = data.feature_index(
        require(fj, "group_feature", "fairness").get<std::string>());
    std::vector<int> labels;
    std::vector<std::uint8_t> groups;
    for (const auto& inst : data.instances) {
      labels.push_back(inst.y);
      groups.push_back(inst.f[group]);
    }
    const FairnessReport fr =
        fairness_metrics(positive_scores(model, data), labels, groups);
    report["fairness"] = {{"eod", fr.eod}, {"dpd", fr.dpd}, {"aps", fr.aps}};
  }

  write_file_atomic(out_dir / "report.json", report.dump(2) + "\n");
  write_manifest(out_dir, "evaluate", config);
}

// ---------------------------------------------------------------------------
// visualize

void run_visualize(const json& config, const fs::path& out_dir) {
  check_keys(config, "visualize",
             {"model", "dataset", "count", "class", "inversion", "seed"});
  Classifier model = load_classifier(
      require(config, "model", "visualize").get<std::string>());
  Dataset data = load_dataset(
      require(config, "dataset", "visualize").get<std::string>());
  const auto count = std::min<std::int64_t>(config.value("count", 8), data.n());
  const int class_id = config.value("class", 1);
  fs::create_directories(out_dir / "images");
  for (std::int64_t i = 0; i < count; ++i) {
    const auto& x = data.instances[i].x;
    const SaliencyMap map = guided_saliency(model, x, class_id);
    // channel-0 input view next to its saliency
    std::vector<double> input(x.data().begin(),
                              x.data().begin() + map.height * map.width);
    write_ppm(input, map.height, map.width,
              out_dir / "images" / ("input_" + std::to_string(i) + ".ppm"));
    write_ppm(map.mag, map.height, map.width,
              out_dir / "images" / ("saliency_" + std::to_string(i) + ".ppm"),
              /*autoscale=*/true);
  }
  if (config.contains("inversion")) {
    const json& ij = config.at("inversion");
    check_keys(ij, "visualize.inversion", {"class", "steps", "lr"});
    const Tensor image =
        model_inversion(model, ij.value("class", 1), ij.value("steps", 200),
                        ij.value("lr", 1.0));
    const std::int64_t hw =
        static_cast<std::int64_t>(image.dim(1)) * image.dim(2);
    std::vector<double> plane(image.data().begin(),
                              image.data().begin() + hw);
    write_ppm(plane, image.dim(1), image.dim(2),
              out_dir / "images" / "inversion.ppm");
  }
  write_manifest(out_dir, "visualize", config);
}

void substitute_seed(json& j, std::uint64_t seed) {
  if (j.is_object()) {
    for (auto& [key, value] : j.items()) {
      if (key == "seed" && value.is_number()) {
        value = seed;
      } else {
        substitute_seed(value, seed);
      }
    }
  } else if (j.is_array()) {
    for (auto& v : j) substitute_seed(v, seed);
  }
}

}  // namespace

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names = {
      "gen-data",      "train",    "unlearn-annotated", "unlearn-blind",
      "identify",      "evaluate", "visualize"};
  return names;
}

void run_command(const std::string& command, const json& config,
                 const fs::path& out_dir) {
  fs::create_directories(out_dir);
  if (command == "gen-data") {
    run_gen_data(config, out_dir);
  } else if (command == "train") {
    run_train(config, out_dir);
  } else if (command == "unlearn-annotated") {
    run_unlearn_annotated(config, out_dir);
  } else if (command == "unlearn-blind") {
    run_unlearn_blind(config, out_dir);
  } else if (command == "identify") {
    run_identify(config, out_dir);
  } else if (command == "evaluate") {
    run_evaluate(config, out_dir);
  } else if (command == "visualize") {
    run_visualize(config, out_dir);
  } else {
    throw SchemaError("unknown command '" + command + "'");
  }
}

int run_cli(const std::string& command, const fs::path& config_path,
            const std::optional<fs::path>& out_dir,
            std::optional<std::uint64_t> seed_override) {
  try {
    json config = load_json(config_path);
    if (seed_override) substitute_seed(config, *seed_override);
    const fs::path out = out_dir.value_or(fs::path("out"));
    run_command(command, config, out);
    return 0;
  } catch (const SchemaError& e) {
    std::cerr << json{{"error",
                       {{"code", 2}, {"kind", "schema"}, {"message", e.what()}}}}
                     .dump()
              << "\n";
    return 2;
  } catch (const DivergenceError& e) {
    std::cerr << json{{"error",
                       {{"code", 3},
                        {"kind", "divergence"},
                        {"iteration", e.iteration()},
                        {"message", e.what()}}}}
                     .dump()
              << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << json{{"error",
                       {{"code", 1}, {"kind", "runtime"}, {"message", e.what()}}}}
                     .dump()
              << "\n";
    return 1;
  }
}

}  // namespace fud
