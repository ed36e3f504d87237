#include "fud/blind.hpp"

#include <algorithm>
#include <cmath>

#include "fud/evaluate.hpp"

namespace fud {

void EncodeConfig::validate(const Identifier& identifier) const {
  if (!identifier.partition()) {
    throw std::invalid_argument("encode: identifier has no partition");
  }
  if (group_id < 0 || group_id >= identifier.partition()->k) {
    throw std::invalid_argument("encode: group id " + std::to_string(group_id) +
                                " outside [0," +
                                std::to_string(identifier.partition()->k) +
                                ")");
  }
  if (threshold < 0.0) throw std::invalid_argument("encode: threshold < 0");
  if (epochs < 0) throw std::invalid_argument("encode: epochs < 0");
  if (batch_size < 1) throw std::invalid_argument("encode: batch size < 1");
}

Tensor group_map(const Identifier& identifier, const Tensor& x, int group_id) {
  if (!identifier.partition()) {
    throw std::invalid_argument("group_map: identifier has no partition");
  }
  const auto& partition = *identifier.partition();
  if (group_id < 0 || group_id >= partition.k) {
    throw std::invalid_argument("group_map: invalid group id");
  }
  if (x.shape().size() != 3) {
    throw std::invalid_argument("group_map: expected a single [C,H,W] image");
  }
  FreezeGuard freeze(identifier.net().parameters());
  Tensor batch =
      Tensor::from_data({1, x.dim(0), x.dim(1), x.dim(2)}, x.data());
  Tape tape;
  auto [logits, act] = identifier.net().forward_hooked(
      tape, batch, identifier.target_layer());
  (void)logits;
  const int d = act.dim(1), h = act.dim(2), w = act.dim(3);
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;
  Tensor map = Tensor::zeros({h, w});
  int members = 0;
  for (int f = 0; f < d; ++f) {
    if (partition.assignment[f] != group_id) continue;
    ++members;
    const double* plane = act.data().data() + static_cast<std::int64_t>(f) * hw;
    for (std::int64_t p = 0; p < hw; ++p) map.data()[p] += plane[p];
  }
  for (std::int64_t p = 0; p < hw; ++p) {
    map.data()[p] /= static_cast<double>(members);
  }
  return map;
}

std::vector<double> resize_nearest(const std::vector<double>& map, int h,
                                   int w, int out_h, int out_w) {
  if (map.size() != static_cast<std::size_t>(h) * w) {
    throw std::invalid_argument("resize_nearest: size mismatch");
  }
  std::vector<double> out(static_cast<std::size_t>(out_h) * out_w);
  for (int y = 0; y < out_h; ++y) {
    const int sy = std::min(h - 1, y * h / out_h);
    for (int x = 0; x < out_w; ++x) {
      const int sx = std::min(w - 1, x * w / out_w);
      out[static_cast<std::size_t>(y) * out_w + x] =
          map[static_cast<std::size_t>(sy) * w + sx];
    }
  }
  return out;
}

Tensor encode_instance(const Identifier& identifier, const Tensor& x,
                       const EncodeConfig& config) {
  config.validate(identifier);
  Tensor map = group_map(identifier, x, config.group_id);
  const int h = map.dim(0), w = map.dim(1);
  double mx = 0.0;
  for (double v : map.data()) mx = std::max(mx, v);
  Tensor out = x.clone();
  if (mx <= 0.0) return out;  // nothing to remove
  std::vector<double> norm = map.data();
  for (double& v : norm) v /= mx;
  const std::vector<double> up =
      resize_nearest(norm, h, w, x.dim(1), x.dim(2));
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
  for (std::int64_t p = 0; p < hw; ++p) {
    if (up[p] > config.threshold) {
      for (int c = 0; c < x.dim(0); ++c) {
        out.data()[static_cast<std::int64_t>(c) * hw + p] = config.fill;
      }
    }
  }
  return out;
}

Dataset encode_dataset(const Identifier& identifier, const Dataset& data,
                       const EncodeConfig& config) {
  config.validate(identifier);
  Dataset out;
  out.config = data.config;
  out.instances.resize(data.n());
  parallel_for(data.n(), [&](std::int64_t i) {
    Instance inst;
    inst.y = data.instances[i].y;
    inst.f = data.instances[i].f;
    inst.x = encode_instance(identifier, data.instances[i].x, config);
    out.instances[i] = std::move(inst);
  });
  return out;
}

BlindResult unlearn_blind(Classifier& m, const Identifier& identifier,
                          const Dataset& train, const Dataset& eval,
                          const EncodeConfig& config) {
  config.validate(identifier);
  if (train.n() == 0 || eval.n() == 0) {
    throw std::invalid_argument("unlearn_blind: empty dataset");
  }
  BlindResult result;
  const Dataset encoded = encode_dataset(identifier, train, config);
  const Dataset encoded_eval = encode_dataset(identifier, eval, config);
  const auto params = m.parameters();
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double acc = 0.0;
    for (const auto& batch : epoch_batches(encoded.n(), config.batch_size,
                                           rng::derive(config.seed, epoch))) {
      Tensor x = stack_batch(encoded, batch);
      const auto labels = batch_labels(encoded, batch);
      Tape tape;
      Tensor loss = tape.cross_entropy_loss(m.forward(tape, x), labels);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw DivergenceError("unlearn_blind: non-finite loss", epoch);
      }
      zero_grads(params);
      tape.backward(loss);
      sgd_step(params, config.lr);
      acc += value * static_cast<double>(batch.size());
    }
    TraceRow row;
    row.iteration = epoch;
    row.phase = "blind";
    row.adv_acc = accuracy(m, encoded_eval);
    row.task_acc = accuracy(m, eval);
    row.l1_term = std::nan("");
    row.l_m = acc / static_cast<double>(encoded.n());
    row.l_c = std::nan("");
    result.trace.rows.push_back(row);
  }
  return result;
}

double group_region_overlap(const Identifier& identifier, const Dataset& probe,
                            int group_id, int feature_index,
                            double threshold) {
  const auto& feature = probe.config.features.at(feature_index);
  const auto region = glyph_region_mask(feature, probe.config.height,
                                        probe.config.width);
  double inside = 0.0, total = 0.0;
  for (const auto& inst : probe.instances) {
    if (!inst.f.at(feature_index)) continue;
    Tensor map = group_map(identifier, inst.x, group_id);
    double mx = 0.0;
    for (double v : map.data()) mx = std::max(mx, v);
    if (mx <= 0.0) continue;
    std::vector<double> norm = map.data();
    for (double& v : norm) v /= mx;
    const auto up = resize_nearest(norm, map.dim(0), map.dim(1),
                                   probe.config.height, probe.config.width);
    for (std::size_t p = 0; p < up.size(); ++p) {
      if (up[p] <= threshold) continue;
      total += up[p];
      if (region[p]) inside += up[p];
    }
  }
  return total > 0.0 ? inside / total : 0.0;
}

int aligned_group(const Identifier& identifier, const Dataset& probe,
                  int feature_index, double threshold) {
  if (!identifier.partition()) {
    throw std::invalid_argument("aligned_group: identifier has no partition");
  }
  int best = 0;
  double best_overlap = -1.0;
  for (int g = 0; g < identifier.partition()->k; ++g) {
    const double overlap =
        group_region_overlap(identifier, probe, g, feature_index, threshold);
    if (overlap > best_overlap) {
      best_overlap = overlap;
      best = g;
    }
  }
  return best;
}

}  // namespace fud
