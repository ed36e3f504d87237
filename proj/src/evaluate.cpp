#include "fud/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fud {

namespace {

std::vector<int> chunk_indices(std::int64_t at, std::int64_t end) {
  std::vector<int> idx;
  idx.reserve(end - at);
  for (std::int64_t i = at; i < end; ++i) idx.push_back(static_cast<int>(i));
  return idx;
}

// softmax over a logit row
void softmax_row(const double* logits, int k, double* out) {
  double mx = logits[0];
  for (int j = 1; j < k; ++j) mx = std::max(mx, logits[j]);
  double z = 0.0;
  for (int j = 0; j < k; ++j) {
    out[j] = std::exp(logits[j] - mx);
    z += out[j];
  }
  for (int j = 0; j < k; ++j) out[j] /= z;
}

}  // namespace

double accuracy(const Classifier& model, const Dataset& data) {
  if (data.n() == 0) throw std::invalid_argument("accuracy: empty dataset");
  FreezeGuard freeze(model.parameters());
  const int classes = model.spec().classes;
  std::int64_t hits = 0;
  const int chunk = 128;
  for (std::int64_t at = 0; at < data.n(); at += chunk) {
    const auto idx =
        chunk_indices(at, std::min<std::int64_t>(at + chunk, data.n()));
    Tensor x = stack_batch(data, idx);
    Tape tape;
    Tensor logits = model.forward(tape, x);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const double* row =
          logits.data().data() + static_cast<std::int64_t>(b) * classes;
      int arg = 0;
      for (int j = 1; j < classes; ++j) {
        if (row[j] > row[arg]) arg = j;
      }
      if (arg == data.instances[idx[b]].y) ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(data.n());
}

std::vector<double> positive_scores(const Classifier& model,
                                    const Dataset& data) {
  FreezeGuard freeze(model.parameters());
  const int classes = model.spec().classes;
  if (classes < 2) {
    throw std::invalid_argument("positive_scores: needs >= 2 classes");
  }
  std::vector<double> scores(data.n());
  std::vector<double> probs(classes);
  const int chunk = 128;
  for (std::int64_t at = 0; at < data.n(); at += chunk) {
    const auto idx =
        chunk_indices(at, std::min<std::int64_t>(at + chunk, data.n()));
    Tensor x = stack_batch(data, idx);
    Tape tape;
    Tensor logits = model.forward(tape, x);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      softmax_row(logits.data().data() + static_cast<std::int64_t>(b) * classes,
                  classes, probs.data());
      scores[idx[b]] = probs[1];
    }
  }
  return scores;
}

// ---------------------------------------------------------------------------
// saliency

namespace {

SaliencyMap saliency_impl(const Classifier& model, const Tensor& x,
                          int class_id, GradMode mode) {
  if (x.shape().size() != 3) {
    throw std::invalid_argument("saliency: expected a single [C,H,W] image");
  }
  if (class_id < 0 || class_id >= model.spec().classes) {
    throw std::invalid_argument("saliency: class id out of range");
  }
  FreezeGuard freeze(model.parameters());
  Tensor probe =
      Tensor::from_data({1, x.dim(0), x.dim(1), x.dim(2)}, x.data(), true);
  Tape tape(mode);
  Tensor logits = model.forward(tape, probe);
  Tensor root = tape.pick(logits, class_id);
  tape.backward(root);
  SaliencyMap map;
  map.height = x.dim(1);
  map.width = x.dim(2);
  map.mag.assign(static_cast<std::size_t>(map.height) * map.width, 0.0);
  const auto& g = probe.grad();
  const std::int64_t hw = static_cast<std::int64_t>(map.height) * map.width;
  for (int c = 0; c < x.dim(0); ++c) {
    for (std::int64_t p = 0; p < hw; ++p) {
      map.mag[p] += std::abs(g[static_cast<std::int64_t>(c) * hw + p]);
    }
  }
  return map;
}

}  // namespace

SaliencyMap guided_saliency(const Classifier& model, const Tensor& x,
                            int class_id) {
  return saliency_impl(model, x, class_id, GradMode::guided);
}

SaliencyMap standard_saliency(const Classifier& model, const Tensor& x,
                              int class_id) {
  return saliency_impl(model, x, class_id, GradMode::standard);
}

double region_energy(const SaliencyMap& map,
                     const std::vector<std::uint8_t>& region) {
  if (region.size() != map.mag.size()) {
    throw std::invalid_argument("region_energy: mask/map size mismatch");
  }
  double inside = 0.0, total = 0.0;
  for (std::size_t p = 0; p < map.mag.size(); ++p) {
    total += map.mag[p];
    if (region[p]) inside += map.mag[p];
  }
  return total > 0.0 ? inside / total : 0.0;
}

// ---------------------------------------------------------------------------
// membership inference

namespace {

// sorted-descending softmax vector, the attack model's input
std::vector<double> attack_features(const Classifier& model,
                                    const Dataset& data) {
  FreezeGuard freeze(model.parameters());
  const int classes = model.spec().classes;
  std::vector<double> rows(static_cast<std::size_t>(data.n()) * classes);
  const int chunk = 128;
  for (std::int64_t at = 0; at < data.n(); at += chunk) {
    const auto idx =
        chunk_indices(at, std::min<std::int64_t>(at + chunk, data.n()));
    Tensor x = stack_batch(data, idx);
    Tape tape;
    Tensor logits = model.forward(tape, x);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      double* dst = rows.data() + static_cast<std::int64_t>(idx[b]) * classes;
      softmax_row(logits.data().data() + static_cast<std::int64_t>(b) * classes,
                  classes, dst);
      std::sort(dst, dst + classes, std::greater<double>());
    }
  }
  return rows;
}

Dataset subset(const Dataset& data, const std::vector<std::int64_t>& keep) {
  Dataset out;
  out.config = data.config;
  for (std::int64_t i : keep) out.instances.push_back(data.instances[i]);
  out.config.n = out.n();
  return out;
}

}  // namespace

MiaAttack train_mia_attack(const Dataset& shadow_pool,
                           const MiaConfig& config) {
  if (shadow_pool.n() < 4) {
    throw std::invalid_argument(
        "mia: shadow pool too small to split into member/non-member halves");
  }
  const int classes = config.shadow_spec.classes;
  const std::int64_t half = shadow_pool.n() / 2;
  // per shadow: sorted output vectors labeled in/out
  std::vector<std::vector<double>> features(config.shadow_models);
  std::vector<std::vector<double>> labels(config.shadow_models);
  parallel_for(config.shadow_models, [&](std::int64_t s) {
    std::vector<std::int64_t> order(shadow_pool.n());
    std::iota(order.begin(), order.end(), 0);
    auto rng = rng::engine(rng::derive(config.seed, 0x51AD + s));
    std::shuffle(order.begin(), order.end(), rng);
    const std::vector<std::int64_t> in(order.begin(), order.begin() + half);
    const std::vector<std::int64_t> out(order.begin() + half, order.end());
    Dataset in_set = subset(shadow_pool, in);
    Dataset out_set = subset(shadow_pool, out);
    Classifier shadow(config.shadow_spec, rng::derive(config.seed, 0x5EED + s));
    TrainConfig tc;
    tc.epochs = config.shadow_epochs;
    tc.lr = config.shadow_lr;
    tc.batch_size = config.batch_size;
    tc.seed = rng::derive(config.seed, 0x7A1 + s);
    train_classifier(shadow, in_set, tc);
    const auto in_rows = attack_features(shadow, in_set);
    const auto out_rows = attack_features(shadow, out_set);
    features[s] = in_rows;
    features[s].insert(features[s].end(), out_rows.begin(), out_rows.end());
    labels[s].assign(in_set.n(), 1.0);
    labels[s].insert(labels[s].end(), out_set.n(), 0.0);
  });

  std::vector<double> xs, ys;
  for (int s = 0; s < config.shadow_models; ++s) {
    xs.insert(xs.end(), features[s].begin(), features[s].end());
    ys.insert(ys.end(), labels[s].begin(), labels[s].end());
  }
  const auto rows = static_cast<std::int64_t>(ys.size());
  MiaAttack attack;
  attack.classes = classes;
  attack.model = Mlp(MlpSpec{classes, {256, 128}},
                     rng::derive(config.seed, 0xA77AC4));
  const auto params = attack.model.parameters();
  Sgd opt{config.attack_lr, 0.0};
  for (int epoch = 0; epoch < config.attack_epochs; ++epoch) {
    const auto batches = epoch_batches(rows, config.attack_batch,
                                       rng::derive(config.seed, 0xE0 + epoch));
    for (const auto& batch : batches) {
      Tensor x = Tensor::zeros({static_cast<int>(batch.size()), classes});
      Tensor t = Tensor::zeros({static_cast<int>(batch.size()), 1});
      for (std::size_t b = 0; b < batch.size(); ++b) {
        for (int j = 0; j < classes; ++j) {
          x.data()[b * classes + j] =
              xs[static_cast<std::int64_t>(batch[b]) * classes + j];
        }
        t.data()[b] = ys[batch[b]];
      }
      Tape tape;
      Tensor loss = tape.bce_loss(attack.model.forward(tape, x), t);
      if (!std::isfinite(loss.item())) {
        throw DivergenceError("mia attack training diverged", epoch);
      }
      zero_grads(params);
      tape.backward(loss);
      opt.step(params);
    }
  }
  return attack;
}

double mia_attack_accuracy(const MiaAttack& attack, const Classifier& target,
                           const Dataset& members,
                           const Dataset& nonmembers) {
  if (members.n() == 0 || nonmembers.n() == 0) {
    throw std::invalid_argument("mia: empty member or non-member set");
  }
  if (target.spec().classes != attack.classes) {
    throw std::invalid_argument("mia: target output width differs from attack");
  }
  const std::int64_t count = std::min(members.n(), nonmembers.n());
  const auto mem_rows = attack_features(target, members);
  const auto non_rows = attack_features(target, nonmembers);
  auto predict = [&](const std::vector<double>& rows, std::int64_t i) {
    Tensor x = Tensor::from_data(
        {1, attack.classes},
        std::vector<double>(rows.begin() + i * attack.classes,
                            rows.begin() + (i + 1) * attack.classes));
    Tape tape;
    return attack.model.forward(tape, x).item() >= 0.5;
  };
  std::int64_t hits = 0;
  for (std::int64_t i = 0; i < count; ++i) {
    if (predict(mem_rows, i)) ++hits;
    if (!predict(non_rows, i)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(2 * count);
}

double mia_attack(const Classifier& target, const Dataset& members,
                  const Dataset& nonmembers, const Dataset& shadow_pool,
                  const MiaConfig& config) {
  const MiaAttack attack = train_mia_attack(shadow_pool, config);
  return mia_attack_accuracy(attack, target, members, nonmembers);
}

// ---------------------------------------------------------------------------
// model inversion

Tensor model_inversion(const Classifier& model, int class_id, int steps,
                       double lr) {
  if (steps < 0) throw std::invalid_argument("model_inversion: steps < 0");
  if (class_id < 0 || class_id >= model.spec().classes) {
    throw std::invalid_argument("model_inversion: class id out of range");
  }
  FreezeGuard freeze(model.parameters());
  const auto& s = model.spec();
  Tensor x = Tensor::zeros({1, s.in_channels, s.in_height, s.in_width}, true);
  for (int step = 0; step < steps; ++step) {
    x.zero_grad();
    Tape tape;
    Tensor logit = tape.pick(model.forward(tape, x), class_id);
    tape.backward(logit);
    auto& data = x.data();
    const auto& g = x.grad();
    for (std::size_t i = 0; i < data.size(); ++i) {
      data[i] = std::clamp(data[i] + lr * g[i], 0.0, 1.0);
    }
  }
  Tensor out =
      Tensor::from_data({s.in_channels, s.in_height, s.in_width}, x.data());
  return out;
}

// ---------------------------------------------------------------------------
// fairness

FairnessReport fairness_metrics(const std::vector<double>& scores,
                                const std::vector<int>& labels,
                                const std::vector<std::uint8_t>& groups,
                                double threshold) {
  const std::size_t n = scores.size();
  if (labels.size() != n || groups.size() != n || n == 0) {
    throw std::invalid_argument("fairness_metrics: size mismatch");
  }
  // strata counts: [group][label], plus positive predictions per cell
  double count[2][2] = {{0, 0}, {0, 0}};
  double pos[2][2] = {{0, 0}, {0, 0}};
  double group_count[2] = {0, 0};
  double group_pos[2] = {0, 0};
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] != 0 && labels[i] != 1) {
      throw std::invalid_argument("fairness_metrics: labels must be 0/1");
    }
    const int g = groups[i] ? 1 : 0;
    const int y = labels[i];
    const double yhat = scores[i] >= threshold ? 1.0 : 0.0;
    count[g][y] += 1.0;
    pos[g][y] += yhat;
    group_count[g] += 1.0;
    group_pos[g] += yhat;
  }
  if (group_count[0] == 0 || group_count[1] == 0) {
    throw std::invalid_argument("fairness_metrics: a group stratum is empty");
  }
  FairnessReport report;
  report.dpd = std::abs(group_pos[0] / group_count[0] -
                        group_pos[1] / group_count[1]);
  for (int y = 0; y < 2; ++y) {
    if (count[0][y] == 0 || count[1][y] == 0) {
      throw std::invalid_argument(
          "fairness_metrics: a (group,label) stratum is empty");
    }
    report.eod = std::max(
        report.eod,
        std::abs(pos[0][y] / count[0][y] - pos[1][y] / count[1][y]));
  }

  // average precision over the descending-score step curve
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a,
                                                   std::size_t b) {
    return scores[a] > scores[b];
  });
  double total_pos = 0.0;
  for (int y : labels) total_pos += y;
  if (total_pos == 0.0) {
    throw std::invalid_argument("fairness_metrics: no positive labels");
  }
  double tp = 0.0, fp = 0.0, prev_recall = 0.0, ap = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) {
      tp += labels[order[j]];
      fp += 1.0 - labels[order[j]];
      ++j;
    }
    const double recall = tp / total_pos;
    const double precision = tp / (tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  report.aps = ap;
  return report;
}

// ---------------------------------------------------------------------------
// image output

void write_ppm(const std::vector<double>& values, int height, int width,
               const std::filesystem::path& path, bool autoscale) {
  if (values.size() != static_cast<std::size_t>(height) * width) {
    throw std::invalid_argument("write_ppm: size mismatch");
  }
  double scale = 255.0;
  if (autoscale) {
    double mx = 0.0;
    for (double v : values) mx = std::max(mx, v);
    scale = mx > 0.0 ? 255.0 / mx : 0.0;
  }
  std::string out = "P6\n" + std::to_string(width) + " " +
                    std::to_string(height) + "\n255\n";
  for (double v : values) {
    const double scaled = autoscale ? v * scale : v * 255.0;
    const auto byte = static_cast<unsigned char>(
        std::clamp(scaled, 0.0, 255.0));
    out.push_back(static_cast<char>(byte));
    out.push_back(static_cast<char>(byte));
    out.push_back(static_cast<char>(byte));
  }
  write_file_atomic(path, out);
}

}  // namespace fud
