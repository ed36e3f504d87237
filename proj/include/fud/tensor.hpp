#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

// Dense 64-bit tensors with tape-based reverse-mode differentiation.
// One tape per forward pass; tensors may be shared between tapes
// (parameters), the tape owns only the recorded graph.

namespace fud {

using Shape = std::vector<int>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated iff requires_grad
  bool requires_grad = false;
};
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> values,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  // He-uniform fan-in init, seeded.
  static Tensor he_uniform(Shape shape, int fan_in, std::mt19937_64& rng);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::int64_t size() const;
  int dim(int axis) const;

  std::vector<double>& data();
  const std::vector<double>& data() const;
  double item() const;  // scalar tensors only
  double at(std::initializer_list<int> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  void zero_grad();

  Tensor clone() const;  // deep copy, detached
  bool shares_storage(const Tensor& other) const {
    return impl_ == other.impl_;
  }

  detail::TensorImpl* impl() const { return impl_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl)
      : impl_(std::move(impl)) {}
  static Tensor make(Shape shape, bool requires_grad);
  std::shared_ptr<detail::TensorImpl> impl_;
  friend class Tape;
};

enum class GradMode { standard, guided };
enum class ActivationKind { relu, sigmoid };
enum class LossKind { bce, cross_entropy, l1 };

struct FilterPartition {
  int k = 0;
  std::vector<int> assignment;  // filter index -> group id in [0, k)

  void validate(int filter_count) const;
  std::vector<std::vector<int>> groups() const;
  bool operator==(const FilterPartition&) const = default;
};

class Tape {
 public:
  explicit Tape(GradMode mode = GradMode::standard) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  GradMode mode() const { return mode_; }
  std::size_t node_count() const { return nodes_.size(); }

  // input [N,C,H,W], kernel [F,C,kh,kw]; cross-correlation.
  Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride = 1,
                int pad = 0);
  Tensor channel_bias(const Tensor& x, const Tensor& bias);
  // x [N,in], weight [out,in], bias [out]
  Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
  Tensor relu(const Tensor& x);
  Tensor sigmoid(const Tensor& x);
  Tensor activation(const Tensor& x, ActivationKind kind);
  Tensor max_pool2(const Tensor& x);          // 2x2 window, stride 2
  Tensor upsample_nearest2(const Tensor& x);  // x2 in both spatial dims
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& x, double c);
  Tensor sum(const Tensor& x);
  Tensor mean(const Tensor& x);
  Tensor reshape(const Tensor& x, Shape shape);
  Tensor pick(const Tensor& x, std::int64_t flat_index);

  Tensor bce_loss(const Tensor& pred, const Tensor& target);
  // logits [N,K], labels length N (class ids)
  Tensor cross_entropy_loss(const Tensor& logits,
                            const std::vector<int>& labels);
  Tensor l1_loss(const Tensor& a, const Tensor& b);
  Tensor loss(const Tensor& pred, const Tensor& target, LossKind kind);

  // activation [N,d,h,w] -> similarity matrix [d,d], s_ij = pearson + 1.
  Tensor pearson_similarity(const Tensor& activation);
  // -sum_k S_k^within / S_k^all over the partition groups.
  Tensor grouping_loss(const Tensor& similarity,
                       const FilterPartition& partition);

  // Accumulates d(root)/d(t) into grad buffers of every recorded tensor
  // with requires_grad. Repeated calls keep accumulating.
  void backward(const Tensor& root);

 private:
  using GradMap =
      std::unordered_map<detail::TensorImpl*, std::vector<double>>;
  struct Node {
    detail::TensorImpl* out = nullptr;
    std::function<void(GradMap&, const std::vector<double>&)> fn;
  };

  void push_node(const Tensor& output,
                 std::function<void(GradMap&, const std::vector<double>&)> fn);

  GradMode mode_;
  std::vector<Node> nodes_;
};

struct Sgd {
  Sgd() = default;
  Sgd(double lr_, double momentum_) : lr(lr_), momentum(momentum_) {}

  double lr = 0.01;
  double momentum = 0.0;

  void step(const std::vector<Tensor>& params);

 private:
  std::unordered_map<const detail::TensorImpl*, std::vector<double>> velocity_;
};

void sgd_step(const std::vector<Tensor>& params, double lr);
void zero_grads(const std::vector<Tensor>& params);

// Gradient checking. f builds a scalar on the given tape from x.
using TapeFn = std::function<Tensor(Tape&, const Tensor&)>;

std::vector<double> analytic_gradient(const TapeFn& f, const Tensor& x,
                                      GradMode mode = GradMode::standard);
std::vector<double> numeric_gradient(const TapeFn& f, const Tensor& x,
                                     double eps);
// max over coordinates of |a - n| / max(|a|, |n|, 1e-8); coordinates with
// |x_i| <= 10*eps are skipped to stay away from relu kinks.
double grad_check(const TapeFn& f, const Tensor& x, double eps = 1e-5);

namespace rng {
// splitmix64-style stream derivation for per-epoch/per-item generators
std::uint64_t derive(std::uint64_t seed, std::uint64_t stream);
std::mt19937_64 engine(std::uint64_t seed);
}  // namespace rng

// FUD_THREADS caps this; n tasks are split over worker threads, each task
// writes only its own outputs.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn);
int max_threads();

}  // namespace fud
