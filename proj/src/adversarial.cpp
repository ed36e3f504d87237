#include "fud/adversarial.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>

#include "fud/evaluate.hpp"

namespace fud {

void AdvUnlearnConfig::validate(int annotation_width) const {
  if (beta < 0.0 || lambda < 0.0) {
    throw std::invalid_argument("adv unlearn: beta/lambda must be >= 0");
  }
  if (iterations < 0) {
    throw std::invalid_argument("adv unlearn: iterations must be >= 0");
  }
  if (lr_remover <= 0.0 || lr_finetune <= 0.0 || lr_adversary <= 0.0) {
    throw std::invalid_argument("adv unlearn: learning rates must be > 0");
  }
  if (batch_size < 1) {
    throw std::invalid_argument("adv unlearn: batch size must be >= 1");
  }
  if (target_features.empty()) {
    throw std::invalid_argument("adv unlearn: needs at least one target");
  }
  for (int idx : target_features) {
    if (idx < 0 || idx >= annotation_width) {
      throw std::invalid_argument(
          "adv unlearn: target index " + std::to_string(idx) +
          " exceeds annotation width " + std::to_string(annotation_width));
    }
  }
}

void train_adversary(Classifier& adversary, const Dataset& train,
                     const std::vector<int>& targets,
                     const TrainConfig& config) {
  if (targets.empty()) {
    throw std::invalid_argument("train_adversary: no target features");
  }
  for (int idx : targets) {
    if (idx < 0 || idx >= train.k()) {
      throw std::invalid_argument(
          "train_adversary: target index " + std::to_string(idx) +
          " exceeds annotation width " + std::to_string(train.k()));
    }
  }
  if (adversary.spec().classes != static_cast<int>(targets.size())) {
    throw std::invalid_argument(
        "train_adversary: adversary must have one head per target feature");
  }
  Sgd opt{config.lr, config.momentum};
  const auto params = adversary.parameters();
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto batches = epoch_batches(train.n(), config.batch_size,
                                       rng::derive(config.seed, epoch));
    for (const auto& batch : batches) {
      Tensor x = stack_batch(train, batch);
      Tensor bits = batch_feature_bits(train, batch, targets);
      Tape tape;
      Tensor probs = tape.sigmoid(adversary.forward(tape, x));
      Tensor loss = tape.bce_loss(probs, bits);
      if (!std::isfinite(loss.item())) {
        throw DivergenceError("train_adversary: non-finite loss", epoch);
      }
      zero_grads(params);
      tape.backward(loss);
      opt.step(params);
    }
  }
}

std::vector<double> adversary_head_accuracy(const Classifier& adversary,
                                            const Dataset& data,
                                            const std::vector<int>& targets,
                                            const Remover* remover) {
  if (data.n() == 0) {
    throw std::invalid_argument("adversary_head_accuracy: empty dataset");
  }
  const int m = static_cast<int>(targets.size());
  std::vector<double> hits(m, 0.0);
  FreezeGuard freeze_adv(adversary.parameters());
  std::optional<FreezeGuard> freeze_rem;
  if (remover) freeze_rem.emplace(remover->parameters());
  const int chunk = 128;
  for (std::int64_t at = 0; at < data.n(); at += chunk) {
    std::vector<int> idx;
    for (std::int64_t i = at; i < std::min<std::int64_t>(at + chunk, data.n());
         ++i) {
      idx.push_back(static_cast<int>(i));
    }
    Tensor x = stack_batch(data, idx);
    Tape tape;
    if (remover) x = remover->apply(tape, x);
    Tensor logits = adversary.forward(tape, x);
    Tensor bits = batch_feature_bits(data, idx, targets);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      for (int j = 0; j < m; ++j) {
        const bool said =
            logits.data()[static_cast<std::int64_t>(b) * m + j] > 0.0;
        const bool truth =
            bits.data()[static_cast<std::int64_t>(b) * m + j] > 0.5;
        if (said == truth) hits[j] += 1.0;
      }
    }
  }
  for (double& h : hits) h /= static_cast<double>(data.n());
  return hits;
}

double adversary_accuracy(const Classifier& adversary, const Dataset& data,
                          const std::vector<int>& targets,
                          const Remover* remover) {
  const auto heads =
      adversary_head_accuracy(adversary, data, targets, remover);
  double acc = 0.0;
  for (double h : heads) acc += h;
  return acc / static_cast<double>(heads.size());
}

Tensor remover_loss(Tape& tape, const Remover& remover, const Classifier& m,
                    const Classifier& adversary, const Tensor& x,
                    const std::vector<int>& labels, const Tensor& target_bits,
                    double beta, double lambda, RemoverLossParts* parts) {
  Tensor x_hat = remover.apply(tape, x);
  Tensor l1 = tape.l1_loss(x, x_hat);
  Tensor lm = tape.cross_entropy_loss(m.forward(tape, x_hat), labels);
  Tensor lc = tape.bce_loss(tape.sigmoid(adversary.forward(tape, x_hat)),
                            target_bits);
  Tensor total = lm;
  if (beta != 0.0) total = tape.add(tape.scale(l1, beta), total);
  if (lambda != 0.0) total = tape.add(total, tape.scale(lc, -lambda));
  if (parts) {
    parts->total = total.item();
    parts->l1 = l1.item();
    parts->lm = lm.item();
    parts->lc = lc.item();
  }
  return total;
}

double finetune_step(Classifier& m, const Remover& remover, const Tensor& x,
                     const std::vector<int>& labels, double lr) {
  FreezeGuard freeze(remover.parameters());
  Tape tape;
  Tensor x_hat = remover.apply(tape, x);
  Tensor loss = tape.cross_entropy_loss(m.forward(tape, x_hat), labels);
  const auto params = m.parameters();
  zero_grads(params);
  tape.backward(loss);
  sgd_step(params, lr);
  return loss.item();
}

AdvUnlearnResult unlearn_annotated(Classifier& m, Remover& remover,
                                   Classifier& adversary, const Dataset& train,
                                   const Dataset& eval,
                                   const AdvUnlearnConfig& config,
                                   int start_iteration) {
  config.validate(train.k());
  if (train.n() == 0 || eval.n() == 0) {
    throw std::invalid_argument("unlearn_annotated: empty dataset");
  }
  if (adversary.spec().classes !=
      static_cast<int>(config.target_features.size())) {
    throw std::invalid_argument(
        "unlearn_annotated: adversary heads do not match target count");
  }
  AdvUnlearnResult result;
  const auto m_params = m.parameters();
  const auto e_params = remover.parameters();

  for (int t = start_iteration; t < config.iterations; ++t) {
    const std::uint64_t iter_seed = rng::derive(config.seed, 0xA110 + t);
    const bool remover_phase = t % 2 == 0;
    double sum_l1 = 0.0, sum_lm = 0.0, sum_lc = 0.0;
    std::int64_t seen = 0;
    if (remover_phase) {
      FreezeGuard freeze_m(m_params);
      FreezeGuard freeze_c(adversary.parameters());
      for (const auto& batch :
           epoch_batches(train.n(), config.batch_size, iter_seed)) {
        Tensor x = stack_batch(train, batch);
        const auto labels = batch_labels(train, batch);
        Tensor bits =
            batch_feature_bits(train, batch, config.target_features);
        Tape tape;
        RemoverLossParts parts;
        Tensor loss = remover_loss(tape, remover, m, adversary, x, labels,
                                   bits, config.beta, config.lambda, &parts);
        if (!std::isfinite(parts.total)) {
          throw DivergenceError(
              "unlearn_annotated: non-finite remover loss at iteration " +
                  std::to_string(t),
              t);
        }
        zero_grads(e_params);
        tape.backward(loss);
        sgd_step(e_params, config.lr_remover);
        const auto w = static_cast<double>(batch.size());
        sum_l1 += parts.l1 * w;
        sum_lm += parts.lm * w;
        sum_lc += parts.lc * w;
        seen += static_cast<std::int64_t>(batch.size());
      }
    } else {
      FreezeGuard freeze_c(adversary.parameters());
      FreezeGuard freeze_e(e_params);
      for (const auto& batch :
           epoch_batches(train.n(), config.batch_size, iter_seed)) {
        Tensor x = stack_batch(train, batch);
        const auto labels = batch_labels(train, batch);
        Tape tape;
        Tensor x_hat = remover.apply(tape, x);
        Tensor loss = tape.cross_entropy_loss(m.forward(tape, x_hat), labels);
        const double value = loss.item();
        if (!std::isfinite(value)) {
          throw DivergenceError(
              "unlearn_annotated: non-finite task loss at iteration " +
                  std::to_string(t),
              t);
        }
        zero_grads(m_params);
        tape.backward(loss);
        sgd_step(m_params, config.lr_finetune);
        sum_lm += value * static_cast<double>(batch.size());
        seen += static_cast<std::int64_t>(batch.size());
      }
      sum_l1 = sum_lc = std::nan("");
    }
    TraceRow row;
    row.iteration = t;
    row.phase = remover_phase ? "remover" : "finetune";
    row.adv_acc = adversary_accuracy(adversary, eval, config.target_features,
                                     &remover);
    row.task_acc = accuracy(m, eval);
    const auto denom = static_cast<double>(seen);
    row.l1_term = remover_phase ? sum_l1 / denom : sum_l1;
    row.l_m = sum_lm / denom;
    row.l_c = remover_phase ? sum_lc / denom : sum_lc;
    result.trace.rows.push_back(row);
  }
  return result;
}

BaselineResult baseline_instance_finetune(Classifier& m, const Dataset& data,
                                          const AnnotationPredicate& predicate,
                                          const TrainConfig& config) {
  BaselineResult result;
  Dataset remaining = remove_instances(data, predicate);
  result.remaining = remaining.n();
  if (remaining.n() == 0) {
    // the retraining baseline's degenerate path: zero steps, model untouched
    result.empty_remainder = true;
    return result;
  }
  train_classifier(m, remaining, config);
  result.epochs_run = config.epochs;
  return result;
}

// ---------------------------------------------------------------------------
// trace CSV

void UnlearnTrace::write_csv(const std::filesystem::path& path) const {
  std::string out = "iteration,phase,adv_acc,task_acc,l1_term,l_m,l_c\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%s,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  r.iteration, r.phase.c_str(), r.adv_acc, r.task_acc,
                  r.l1_term, r.l_m, r.l_c);
    out += buf;
  }
  write_file_atomic(path, out);
}

UnlearnTrace UnlearnTrace::read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  UnlearnTrace trace;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string field;
    TraceRow r;
    std::getline(ss, field, ',');
    r.iteration = std::stoi(field);
    std::getline(ss, r.phase, ',');
    std::getline(ss, field, ',');
    r.adv_acc = std::stod(field);
    std::getline(ss, field, ',');
    r.task_acc = std::stod(field);
    std::getline(ss, field, ',');
    r.l1_term = std::stod(field);
    std::getline(ss, field, ',');
    r.l_m = std::stod(field);
    std::getline(ss, field, ',');
    r.l_c = std::stod(field);
    trace.rows.push_back(r);
  }
  return trace;
}

}  // namespace fud
