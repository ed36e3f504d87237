#include "fud/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace fud {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  for (int d : shape) {
    if (d <= 0) {
      throw std::invalid_argument("tensor dims must be positive, got " +
                                  shape_str(shape));
    }
  }
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
}

std::vector<double>& grad_buffer(
    std::unordered_map<detail::TensorImpl*, std::vector<double>>& grads,
    detail::TensorImpl* t) {
  auto it = grads.find(t);
  if (it == grads.end()) {
    it = grads.emplace(t, std::vector<double>(numel(t->shape), 0.0)).first;
  }
  return it->second;
}

// c[m][n] += a[m][k] * b[k][n]
void gemm_acc(const double* a, const double* b, double* c, int m, int k,
              int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::int64_t>(i) * k;
    double* crow = c + static_cast<std::int64_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + static_cast<std::int64_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m][n] += sum_k a[m][k] * b[n][k]
void gemm_abt_acc(const double* a, const double* b, double* c, int m, int n,
                  int k) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::int64_t>(i) * k;
    for (int j = 0; j < n; ++j) {
      const double* brow = b + static_cast<std::int64_t>(j) * k;
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[static_cast<std::int64_t>(i) * n + j] += acc;
    }
  }
}

// c[k][n] += sum_m a[m][k] * b[m][n]
void gemm_atb_acc(const double* a, const double* b, double* c, int m, int k,
                  int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::int64_t>(i) * k;
    const double* brow = b + static_cast<std::int64_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      double* crow = c + static_cast<std::int64_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

struct ConvDims {
  int n, c, h, w, f, kh, kw, oh, ow, stride, pad;
  std::int64_t in_chw, out_fhw, col_rows, col_cols;
};

ConvDims conv_dims(const Tensor& input, const Tensor& kernel, int stride,
                   int pad) {
  if (input.shape().size() != 4) {
    throw std::invalid_argument("conv2d: input must be 4-d [N,C,H,W], got " +
                                shape_str(input.shape()));
  }
  if (kernel.shape().size() != 4) {
    throw std::invalid_argument("conv2d: kernel must be 4-d [F,C,kh,kw], got " +
                                shape_str(kernel.shape()));
  }
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (pad < 0) throw std::invalid_argument("conv2d: pad must be >= 0");
  ConvDims d;
  d.n = input.dim(0);
  d.c = input.dim(1);
  d.h = input.dim(2);
  d.w = input.dim(3);
  d.f = kernel.dim(0);
  d.kh = kernel.dim(2);
  d.kw = kernel.dim(3);
  d.stride = stride;
  d.pad = pad;
  if (kernel.dim(1) != d.c) {
    throw std::invalid_argument(
        "conv2d: kernel channels (axis 1) = " + std::to_string(kernel.dim(1)) +
        " do not match input channels (axis 1) = " + std::to_string(d.c));
  }
  if (d.kh > d.h + 2 * pad) {
    throw std::invalid_argument(
        "conv2d: kernel height (axis 2) = " + std::to_string(d.kh) +
        " exceeds padded input height " + std::to_string(d.h + 2 * pad));
  }
  if (d.kw > d.w + 2 * pad) {
    throw std::invalid_argument(
        "conv2d: kernel width (axis 3) = " + std::to_string(d.kw) +
        " exceeds padded input width " + std::to_string(d.w + 2 * pad));
  }
  d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
  d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
  d.in_chw = static_cast<std::int64_t>(d.c) * d.h * d.w;
  d.out_fhw = static_cast<std::int64_t>(d.f) * d.oh * d.ow;
  d.col_rows = static_cast<std::int64_t>(d.c) * d.kh * d.kw;
  d.col_cols = static_cast<std::int64_t>(d.oh) * d.ow;
  return d;
}

void im2col(const double* src, const ConvDims& d, double* col) {
  for (int c = 0; c < d.c; ++c) {
    for (int ki = 0; ki < d.kh; ++ki) {
      for (int kj = 0; kj < d.kw; ++kj) {
        double* row =
            col + ((static_cast<std::int64_t>(c) * d.kh + ki) * d.kw + kj) *
                      d.col_cols;
        for (int oy = 0; oy < d.oh; ++oy) {
          const int iy = oy * d.stride - d.pad + ki;
          double* out = row + static_cast<std::int64_t>(oy) * d.ow;
          if (iy < 0 || iy >= d.h) {
            std::fill(out, out + d.ow, 0.0);
            continue;
          }
          const double* in =
              src + (static_cast<std::int64_t>(c) * d.h + iy) * d.w;
          for (int ox = 0; ox < d.ow; ++ox) {
            const int ix = ox * d.stride - d.pad + kj;
            out[ox] = (ix >= 0 && ix < d.w) ? in[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, const ConvDims& d, double* dst) {
  for (int c = 0; c < d.c; ++c) {
    for (int ki = 0; ki < d.kh; ++ki) {
      for (int kj = 0; kj < d.kw; ++kj) {
        const double* row =
            col + ((static_cast<std::int64_t>(c) * d.kh + ki) * d.kw + kj) *
                      d.col_cols;
        for (int oy = 0; oy < d.oh; ++oy) {
          const int iy = oy * d.stride - d.pad + ki;
          if (iy < 0 || iy >= d.h) continue;
          double* out = dst + (static_cast<std::int64_t>(c) * d.h + iy) * d.w;
          const double* in = row + static_cast<std::int64_t>(oy) * d.ow;
          for (int ox = 0; ox < d.ow; ++ox) {
            const int ix = ox * d.stride - d.pad + kj;
            if (ix >= 0 && ix < d.w) out[ix] += in[ox];
          }
        }
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::make(Shape shape, bool requires_grad) {
  check_shape(shape);
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data.assign(numel(impl->shape), 0.0);
  impl->requires_grad = requires_grad;
  if (requires_grad) impl->grad.assign(impl->data.size(), 0.0);
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return make(std::move(shape), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = make(std::move(shape), requires_grad);
  std::fill(t.data().begin(), t.data().end(), value);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values,
                         bool requires_grad) {
  check_shape(shape);
  if (numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw std::invalid_argument("from_data: " + shape_str(shape) +
                                " does not hold " +
                                std::to_string(values.size()) + " values");
  }
  Tensor t = make(std::move(shape), requires_grad);
  t.data() = std::move(values);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::he_uniform(Shape shape, int fan_in, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  Tensor t = make(std::move(shape), false);
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

const Shape& Tensor::shape() const {
  if (!impl_) throw std::logic_error("undefined tensor");
  return impl_->shape;
}

std::int64_t Tensor::size() const { return numel(shape()); }

int Tensor::dim(int axis) const {
  const Shape& s = shape();
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    throw std::invalid_argument("axis " + std::to_string(axis) +
                                " out of range for " + shape_str(s));
  }
  return s[axis];
}

std::vector<double>& Tensor::data() {
  if (!impl_) throw std::logic_error("undefined tensor");
  return impl_->data;
}

const std::vector<double>& Tensor::data() const {
  if (!impl_) throw std::logic_error("undefined tensor");
  return impl_->data;
}

double Tensor::item() const {
  if (size() != 1) {
    throw std::invalid_argument("item(): tensor " + shape_str(shape()) +
                                " is not a scalar");
  }
  return data()[0];
}

double Tensor::at(std::initializer_list<int> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) {
    throw std::invalid_argument("at(): rank mismatch");
  }
  std::int64_t flat = 0;
  int axis = 0;
  for (int i : index) {
    if (i < 0 || i >= s[axis]) throw std::invalid_argument("at(): oob index");
    flat = flat * s[axis] + i;
    ++axis;
  }
  return data()[flat];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  if (!impl_) throw std::logic_error("undefined tensor");
  impl_->requires_grad = value;
  if (value) {
    impl_->grad.assign(impl_->data.size(), 0.0);
  } else {
    impl_->grad.clear();
    impl_->grad.shrink_to_fit();
  }
}

std::vector<double>& Tensor::grad() {
  if (!requires_grad()) {
    throw std::logic_error("grad(): tensor does not require grad");
  }
  return impl_->grad;
}

const std::vector<double>& Tensor::grad() const {
  if (!requires_grad()) {
    throw std::logic_error("grad(): tensor does not require grad");
  }
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (requires_grad()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  Tensor t = make(shape(), impl_->requires_grad);
  t.data() = data();
  return t;
}

// ---------------------------------------------------------------------------
// FilterPartition

void FilterPartition::validate(int filter_count) const {
  if (k < 1) throw std::invalid_argument("partition: k must be >= 1");
  if (static_cast<int>(assignment.size()) != filter_count) {
    throw std::invalid_argument(
        "partition: assignment covers " + std::to_string(assignment.size()) +
        " filters, layer has " + std::to_string(filter_count));
  }
  std::vector<int> count(k, 0);
  for (int g : assignment) {
    if (g < 0 || g >= k) {
      throw std::invalid_argument("partition: group id " + std::to_string(g) +
                                  " outside [0," + std::to_string(k) + ")");
    }
    ++count[g];
  }
  for (int g = 0; g < k; ++g) {
    if (count[g] == 0) {
      throw std::invalid_argument("partition: group " + std::to_string(g) +
                                  " is empty");
    }
  }
}

std::vector<std::vector<int>> FilterPartition::groups() const {
  std::vector<std::vector<int>> out(k);
  for (int i = 0; i < static_cast<int>(assignment.size()); ++i) {
    out[assignment[i]].push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tape

void Tape::push_node(
    const Tensor& output,
    std::function<void(GradMap&, const std::vector<double>&)> fn) {
  if (!output.requires_grad()) return;
  nodes_.push_back(Node{output.impl(), std::move(fn)});
}

Tensor Tape::conv2d(const Tensor& input, const Tensor& kernel, int stride,
                    int pad) {
  const ConvDims d = conv_dims(input, kernel, stride, pad);
  const bool rg = input.requires_grad() || kernel.requires_grad();
  Tensor out = Tensor::make({d.n, d.f, d.oh, d.ow}, rg);

  std::vector<double> col(d.col_rows * d.col_cols);
  for (int n = 0; n < d.n; ++n) {
    im2col(input.data().data() + n * d.in_chw, d, col.data());
    gemm_acc(kernel.data().data(), col.data(),
             out.data().data() + n * d.out_fhw, d.f,
             static_cast<int>(d.col_rows), static_cast<int>(d.col_cols));
  }

  push_node(out, [input, kernel, d](GradMap& grads,
                                    const std::vector<double>& gout) {
    std::vector<double> col(d.col_rows * d.col_cols);
    std::vector<double> colg(d.col_rows * d.col_cols);
    double* dkernel = kernel.requires_grad()
                          ? grad_buffer(grads, kernel.impl()).data()
                          : nullptr;
    double* dinput = input.requires_grad()
                         ? grad_buffer(grads, input.impl()).data()
                         : nullptr;
    for (int n = 0; n < d.n; ++n) {
      const double* go = gout.data() + n * d.out_fhw;
      if (dkernel) {
        im2col(input.data().data() + n * d.in_chw, d, col.data());
        gemm_abt_acc(go, col.data(), dkernel, d.f,
                     static_cast<int>(d.col_rows),
                     static_cast<int>(d.col_cols));
      }
      if (dinput) {
        std::fill(colg.begin(), colg.end(), 0.0);
        gemm_atb_acc(kernel.data().data(), go, colg.data(), d.f,
                     static_cast<int>(d.col_rows),
                     static_cast<int>(d.col_cols));
        col2im_add(colg.data(), d, dinput + n * d.in_chw);
      }
    }
  });
  return out;
}

Tensor Tape::channel_bias(const Tensor& x, const Tensor& bias) {
  if (x.shape().size() != 4 || bias.shape().size() != 1 ||
      bias.dim(0) != x.dim(1)) {
    throw std::invalid_argument("channel_bias: expected [N,C,H,W] and [C]");
  }
  const int n = x.dim(0), c = x.dim(1);
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
  Tensor out = Tensor::make(x.shape(), x.requires_grad() ||
                                           bias.requires_grad());
  const double* src = x.data().data();
  double* dst = out.data().data();
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < c; ++j) {
      const double b = bias.data()[j];
      const std::int64_t base = (static_cast<std::int64_t>(i) * c + j) * hw;
      for (std::int64_t p = 0; p < hw; ++p) dst[base + p] = src[base + p] + b;
    }
  }
  push_node(out, [x, bias, out, n, c, hw](GradMap& grads,
                                          const std::vector<double>& gout) {
    if (x.requires_grad()) {
      auto& dx = grad_buffer(grads, x.impl());
      for (std::size_t i = 0; i < gout.size(); ++i) dx[i] += gout[i];
    }
    if (bias.requires_grad()) {
      auto& db = grad_buffer(grads, bias.impl());
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < c; ++j) {
          const std::int64_t base =
              (static_cast<std::int64_t>(i) * c + j) * hw;
          double acc = 0.0;
          for (std::int64_t p = 0; p < hw; ++p) acc += gout[base + p];
          db[j] += acc;
        }
      }
    }
  });
  return out;
}

Tensor Tape::linear(const Tensor& x, const Tensor& weight,
                    const Tensor& bias) {
  if (x.shape().size() != 2 || weight.shape().size() != 2) {
    throw std::invalid_argument("linear: expected x [N,in], weight [out,in]");
  }
  const int n = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  if (weight.dim(1) != in) {
    throw std::invalid_argument(
        "linear: weight in-dim " + std::to_string(weight.dim(1)) +
        " does not match input dim " + std::to_string(in));
  }
  if (bias.shape().size() != 1 || bias.dim(0) != out_dim) {
    throw std::invalid_argument("linear: bias must be [out]");
  }
  const bool rg =
      x.requires_grad() || weight.requires_grad() || bias.requires_grad();
  Tensor out = Tensor::make({n, out_dim}, rg);
  double* dst = out.data().data();
  for (int i = 0; i < n; ++i) {
    for (int o = 0; o < out_dim; ++o) {
      dst[static_cast<std::int64_t>(i) * out_dim + o] = bias.data()[o];
    }
  }
  gemm_abt_acc(x.data().data(), weight.data().data(), dst, n, out_dim, in);

  push_node(out, [x, weight, bias, n, in, out_dim](
                     GradMap& grads, const std::vector<double>& gout) {
    if (x.requires_grad()) {
      gemm_acc(gout.data(), weight.data().data(),
               grad_buffer(grads, x.impl()).data(), n, out_dim, in);
    }
    if (weight.requires_grad()) {
      gemm_atb_acc(gout.data(), x.data().data(),
                   grad_buffer(grads, weight.impl()).data(), n, out_dim, in);
    }
    if (bias.requires_grad()) {
      auto& db = grad_buffer(grads, bias.impl());
      for (int i = 0; i < n; ++i) {
        for (int o = 0; o < out_dim; ++o) {
          db[o] += gout[static_cast<std::int64_t>(i) * out_dim + o];
        }
      }
    }
  });
  return out;
}

Tensor Tape::relu(const Tensor& x) {
  Tensor out = Tensor::make(x.shape(), x.requires_grad());
  const auto& src = x.data();
  auto& dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i] = src[i] > 0.0 ? src[i] : 0.0;
  }
  const bool guided = mode_ == GradMode::guided;
  push_node(out, [x, guided](GradMap& grads, const std::vector<double>& gout) {
    if (!x.requires_grad()) return;
    auto& dx = grad_buffer(grads, x.impl());
    const auto& src = x.data();
    for (std::size_t i = 0; i < gout.size(); ++i) {
      if (src[i] > 0.0 && (!guided || gout[i] > 0.0)) dx[i] += gout[i];
    }
  });
  return out;
}

Tensor Tape::sigmoid(const Tensor& x) {
  Tensor out = Tensor::make(x.shape(), x.requires_grad());
  const auto& src = x.data();
  auto& dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double v = src[i];
    if (v >= 0.0) {
      dst[i] = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      dst[i] = e / (1.0 + e);
    }
  }
  push_node(out, [x, out](GradMap& grads, const std::vector<double>& gout) {
    if (!x.requires_grad()) return;
    auto& dx = grad_buffer(grads, x.impl());
    const auto& y = out.data();
    for (std::size_t i = 0; i < gout.size(); ++i) {
      dx[i] += gout[i] * y[i] * (1.0 - y[i]);
    }
  });
  return out;
}

Tensor Tape::activation(const Tensor& x, ActivationKind kind) {
  switch (kind) {
    case ActivationKind::relu:
      return relu(x);
    case ActivationKind::sigmoid:
      return sigmoid(x);
  }
  throw std::invalid_argument("activation: unknown kind");
}

Tensor Tape::max_pool2(const Tensor& x) {
  if (x.shape().size() != 4) {
    throw std::invalid_argument("max_pool2: expected [N,C,H,W]");
  }
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < 2 || w < 2) {
    throw std::invalid_argument("max_pool2: spatial dims must be >= 2");
  }
  const int oh = h / 2, ow = w / 2;
  Tensor out = Tensor::make({n, c, oh, ow}, x.requires_grad());
  auto argmax = std::make_shared<std::vector<std::int64_t>>(out.size());
  const double* src = x.data().data();
  double* dst = out.data().data();
  std::int64_t oi = 0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < c; ++j) {
      const std::int64_t plane =
          (static_cast<std::int64_t>(i) * c + j) * h * w;
      for (int y = 0; y < oh; ++y) {
        for (int z = 0; z < ow; ++z, ++oi) {
          std::int64_t best = plane + (2 * y) * w + 2 * z;
          double bv = src[best];
          const std::int64_t cand[3] = {plane + (2 * y) * w + 2 * z + 1,
                                        plane + (2 * y + 1) * w + 2 * z,
                                        plane + (2 * y + 1) * w + 2 * z + 1};
          for (std::int64_t idx : cand) {
            if (src[idx] > bv) {
              bv = src[idx];
              best = idx;
            }
          }
          dst[oi] = bv;
          (*argmax)[oi] = best;
        }
      }
    }
  }
  push_node(out, [x, argmax](GradMap& grads, const std::vector<double>& gout) {
    if (!x.requires_grad()) return;
    auto& dx = grad_buffer(grads, x.impl());
    for (std::size_t i = 0; i < gout.size(); ++i) {
      dx[(*argmax)[i]] += gout[i];
    }
  });
  return out;
}

Tensor Tape::upsample_nearest2(const Tensor& x) {
  if (x.shape().size() != 4) {
    throw std::invalid_argument("upsample_nearest2: expected [N,C,H,W]");
  }
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out = Tensor::make({n, c, 2 * h, 2 * w}, x.requires_grad());
  const double* src = x.data().data();
  double* dst = out.data().data();
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < c; ++j) {
      const std::int64_t ip = (static_cast<std::int64_t>(i) * c + j) * h * w;
      const std::int64_t op =
          (static_cast<std::int64_t>(i) * c + j) * 4 * h * w;
      for (int y = 0; y < 2 * h; ++y) {
        const double* row = src + ip + (y / 2) * w;
        double* orow = dst + op + static_cast<std::int64_t>(y) * 2 * w;
        for (int z = 0; z < 2 * w; ++z) orow[z] = row[z / 2];
      }
    }
  }
  push_node(out, [x, n, c, h, w](GradMap& grads,
                                 const std::vector<double>& gout) {
    if (!x.requires_grad()) return;
    auto& dx = grad_buffer(grads, x.impl());
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < c; ++j) {
        const std::int64_t ip =
            (static_cast<std::int64_t>(i) * c + j) * h * w;
        const std::int64_t op =
            (static_cast<std::int64_t>(i) * c + j) * 4 * h * w;
        for (int y = 0; y < 2 * h; ++y) {
          const double* grow = gout.data() + op + static_cast<std::int64_t>(y) * 2 * w;
          double* drow = dx.data() + ip + (y / 2) * w;
          for (int z = 0; z < 2 * w; ++z) drow[z / 2] += grow[z];
        }
      }
    }
  });
  return out;
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  Tensor out = Tensor::make(a.shape(), a.requires_grad() || b.requires_grad());
  for (std::size_t i = 0; i < out.data().size(); ++i) {
    out.data()[i] = a.data()[i] + b.data()[i];
  }
  push_node(out, [a, b](GradMap& grads, const std::vector<double>& gout) {
    for (const Tensor* t : {&a, &b}) {
      if (!t->requires_grad()) continue;
      auto& d = grad_buffer(grads, t->impl());
      for (std::size_t i = 0; i < gout.size(); ++i) d[i] += gout[i];
    }
  });
  return out;
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  Tensor out = Tensor::make(a.shape(), a.requires_grad() || b.requires_grad());
  for (std::size_t i = 0; i < out.data().size(); ++i) {
    out.data()[i] = a.data()[i] - b.data()[i];
  }
  push_node(out, [a, b](GradMap& grads, const std::vector<double>& gout) {
    if (a.requires_grad()) {
      auto& d = grad_buffer(grads, a.impl());
      for (std::size_t i = 0; i < gout.size(); ++i) d[i] += gout[i];
    }
    if (b.requires_grad()) {
      auto& d = grad_buffer(grads, b.impl());
      for (std::size_t i = 0; i < gout.size(); ++i) d[i] -= gout[i];
    }
  });
  return out;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  Tensor out = Tensor::make(a.shape(), a.requires_grad() || b.requires_grad());
  for (std::size_t i = 0; i < out.data().size(); ++i) {
    out.data()[i] = a.data()[i] * b.data()[i];
  }
  push_node(out, [a, b](GradMap& grads, const std::vector<double>& gout) {
    if (a.requires_grad()) {
      auto& d = grad_buffer(grads, a.impl());
      for (std::size_t i = 0; i < gout.size(); ++i) {
        d[i] += gout[i] * b.data()[i];
      }
    }
    if (b.requires_grad()) {
      auto& d = grad_buffer(grads, b.impl());
      for (std::size_t i = 0; i < gout.size(); ++i) {
        d[i] += gout[i] * a.data()[i];
      }
    }
  });
  return out;
}

Tensor Tape::scale(const Tensor& x, double c) {
  Tensor out = Tensor::make(x.shape(), x.requires_grad());
  for (std::size_t i = 0; i < out.data().size(); ++i) {
    out.data()[i] = x.data()[i] * c;
  }
  push_node(out, [x, c](GradMap& grads, const std::vector<double>& gout) {
    if (!x.requires_grad()) return;
    auto& d = grad_buffer(grads, x.impl());
    for (std::size_t i = 0; i < gout.size(); ++i) d[i] += gout[i] * c;
  });
  return out;
}

Tensor Tape::sum(const Tensor& x) {
  Tensor out = Tensor::make({1}, x.requires_grad());
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  out.data()[0] = acc;
  push_node(out, [x](GradMap& grads, const std::vector<double>& gout) {
    if (!x.requires_grad()) return;
    auto& d = grad_buffer(grads, x.impl());
    for (double& v : d) v += gout[0];
  });
  return out;
}

Tensor Tape::mean(const Tensor& x) {
  const double inv = 1.0 / static_cast<double>(x.size());
  Tensor out = Tensor::make({1}, x.requires_grad());
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  out.data()[0] = acc * inv;
  push_node(out, [x, inv](GradMap& grads, const std::vector<double>& gout) {
    if (!x.requires_grad()) return;
    auto& d = grad_buffer(grads, x.impl());
    for (double& v : d) v += gout[0] * inv;
  });
  return out;
}

Tensor Tape::reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw std::invalid_argument("reshape: " + shape_str(x.shape()) + " -> " +
                                shape_str(shape) + " changes element count");
  }
  Tensor out = Tensor::make(std::move(shape), x.requires_grad());
  out.data() = x.data();
  push_node(out, [x](GradMap& grads, const std::vector<double>& gout) {
    if (!x.requires_grad()) return;
    auto& d = grad_buffer(grads, x.impl());
    for (std::size_t i = 0; i < gout.size(); ++i) d[i] += gout[i];
  });
  return out;
}

Tensor Tape::pick(const Tensor& x, std::int64_t flat_index) {
  if (flat_index < 0 || flat_index >= x.size()) {
    throw std::invalid_argument("pick: index " + std::to_string(flat_index) +
                                " out of range for " + shape_str(x.shape()));
  }
  Tensor out = Tensor::make({1}, x.requires_grad());
  out.data()[0] = x.data()[flat_index];
  push_node(out,
            [x, flat_index](GradMap& grads, const std::vector<double>& gout) {
              if (!x.requires_grad()) return;
              grad_buffer(grads, x.impl())[flat_index] += gout[0];
            });
  return out;
}

namespace {
constexpr double kBceEps = 1e-7;
}

Tensor Tape::bce_loss(const Tensor& pred, const Tensor& target) {
  check_same_shape("bce_loss", pred, target);
  const std::size_t n = pred.data().size();
  const double inv = 1.0 / static_cast<double>(n);
  Tensor out = Tensor::make({1}, pred.requires_grad());
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = std::clamp(pred.data()[i], kBceEps, 1.0 - kBceEps);
    const double t = target.data()[i];
    acc += -(t * std::log(p) + (1.0 - t) * std::log(1.0 - p));
  }
  out.data()[0] = acc * inv;
  push_node(out, [pred, target, inv](GradMap& grads,
                                     const std::vector<double>& gout) {
    if (!pred.requires_grad()) return;
    auto& d = grad_buffer(grads, pred.impl());
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double p = pred.data()[i];
      if (p <= kBceEps || p >= 1.0 - kBceEps) continue;  // clamped: flat
      const double t = target.data()[i];
      d[i] += gout[0] * inv * (p - t) / (p * (1.0 - p));
    }
  });
  return out;
}

Tensor Tape::cross_entropy_loss(const Tensor& logits,
                                const std::vector<int>& labels) {
  if (logits.shape().size() != 2) {
    throw std::invalid_argument("cross_entropy: logits must be [N,K]");
  }
  const int n = logits.dim(0), k = logits.dim(1);
  if (static_cast<int>(labels.size()) != n) {
    throw std::invalid_argument("cross_entropy: " + std::to_string(n) +
                                " rows vs " + std::to_string(labels.size()) +
                                " labels");
  }
  for (int lbl : labels) {
    if (lbl < 0 || lbl >= k) {
      throw std::invalid_argument("cross_entropy: label " +
                                  std::to_string(lbl) + " outside [0," +
                                  std::to_string(k) + ")");
    }
  }
  auto probs = std::make_shared<std::vector<double>>(logits.data().size());
  const double inv = 1.0 / static_cast<double>(n);
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    const double* row = logits.data().data() + static_cast<std::int64_t>(i) * k;
    double mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double logz = std::log(z) + mx;
    for (int j = 0; j < k; ++j) {
      (*probs)[static_cast<std::int64_t>(i) * k + j] = std::exp(row[j] - logz);
    }
    acc -= row[labels[i]] - logz;
  }
  Tensor out = Tensor::make({1}, logits.requires_grad());
  out.data()[0] = acc * inv;
  push_node(out, [logits, labels, probs, n, k, inv](
                     GradMap& grads, const std::vector<double>& gout) {
    if (!logits.requires_grad()) return;
    auto& d = grad_buffer(grads, logits.impl());
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < k; ++j) {
        const std::int64_t idx = static_cast<std::int64_t>(i) * k + j;
        const double onehot = (j == labels[i]) ? 1.0 : 0.0;
        d[idx] += gout[0] * inv * ((*probs)[idx] - onehot);
      }
    }
  });
  return out;
}

Tensor Tape::l1_loss(const Tensor& a, const Tensor& b) {
  check_same_shape("l1_loss", a, b);
  const double inv = 1.0 / static_cast<double>(a.size());
  Tensor out = Tensor::make({1}, a.requires_grad() || b.requires_grad());
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    acc += std::abs(a.data()[i] - b.data()[i]);
  }
  out.data()[0] = acc * inv;
  push_node(out, [a, b, inv](GradMap& grads, const std::vector<double>& gout) {
    const double g = gout[0] * inv;
    for (std::size_t i = 0; i < a.data().size(); ++i) {
      const double diff = a.data()[i] - b.data()[i];
      const double s = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
      if (a.requires_grad()) grad_buffer(grads, a.impl())[i] += g * s;
      if (b.requires_grad()) grad_buffer(grads, b.impl())[i] -= g * s;
    }
  });
  return out;
}

Tensor Tape::loss(const Tensor& pred, const Tensor& target, LossKind kind) {
  switch (kind) {
    case LossKind::bce:
      return bce_loss(pred, target);
    case LossKind::l1:
      return l1_loss(pred, target);
    case LossKind::cross_entropy: {
      std::vector<int> labels(target.data().size());
      for (std::size_t i = 0; i < labels.size(); ++i) {
        labels[i] = static_cast<int>(std::llround(target.data()[i]));
      }
      return cross_entropy_loss(pred, labels);
    }
  }
  throw std::invalid_argument("loss: unknown kind");
}

Tensor Tape::pearson_similarity(const Tensor& activation) {
  if (activation.shape().size() != 4) {
    throw std::invalid_argument("pearson_similarity: expected [N,d,h,w]");
  }
  const int n = activation.dim(0), d = activation.dim(1);
  const std::int64_t hw =
      static_cast<std::int64_t>(activation.dim(2)) * activation.dim(3);
  const std::int64_t len = n * hw;
  if (len < 2) {
    throw std::invalid_argument(
        "pearson_similarity: need at least 2 samples per filter");
  }
  // gather filter vectors, center, normalize
  auto unit = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(d) * len);
  auto sigma = std::make_shared<std::vector<double>>(d);
  const double* src = activation.data().data();
  for (int f = 0; f < d; ++f) {
    double* u = unit->data() + static_cast<std::int64_t>(f) * len;
    for (int i = 0; i < n; ++i) {
      const double* plane =
          src + (static_cast<std::int64_t>(i) * d + f) * hw;
      std::copy(plane, plane + hw, u + static_cast<std::int64_t>(i) * hw);
    }
    double mu = 0.0;
    for (std::int64_t p = 0; p < len; ++p) mu += u[p];
    mu /= static_cast<double>(len);
    double ss = 0.0;
    for (std::int64_t p = 0; p < len; ++p) {
      u[p] -= mu;
      ss += u[p] * u[p];
    }
    const double s = std::sqrt(ss);
    (*sigma)[f] = s;
    if (s > 0.0) {
      for (std::int64_t p = 0; p < len; ++p) u[p] /= s;
    } else {
      std::fill(u, u + len, 0.0);
    }
  }
  Tensor out = Tensor::make({d, d}, activation.requires_grad());
  auto rho = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(d) * d, 0.0);
  for (int i = 0; i < d; ++i) {
    (*rho)[static_cast<std::int64_t>(i) * d + i] = 1.0;
    const double* ui = unit->data() + static_cast<std::int64_t>(i) * len;
    for (int j = i + 1; j < d; ++j) {
      const double* uj = unit->data() + static_cast<std::int64_t>(j) * len;
      double acc = 0.0;
      for (std::int64_t p = 0; p < len; ++p) acc += ui[p] * uj[p];
      // zero-variance filters correlate with nothing
      if ((*sigma)[i] == 0.0 || (*sigma)[j] == 0.0) acc = 0.0;
      acc = std::clamp(acc, -1.0, 1.0);
      (*rho)[static_cast<std::int64_t>(i) * d + j] = acc;
      (*rho)[static_cast<std::int64_t>(j) * d + i] = acc;
    }
  }
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) {
      out.data()[static_cast<std::int64_t>(i) * d + j] =
          (i == j) ? 2.0 : (*rho)[static_cast<std::int64_t>(i) * d + j] + 1.0;
    }
  }

  push_node(out, [activation, unit, sigma, rho, n, d, hw, len](
                     GradMap& grads, const std::vector<double>& gout) {
    if (!activation.requires_grad()) return;
    auto& da = grad_buffer(grads, activation.impl());
    std::vector<double> dv(len);
    for (int i = 0; i < d; ++i) {
      if ((*sigma)[i] == 0.0) continue;
      std::fill(dv.begin(), dv.end(), 0.0);
      double r = 0.0;
      bool any = false;
      for (int j = 0; j < d; ++j) {
        if (j == i || (*sigma)[j] == 0.0) continue;
        const double wgt = gout[static_cast<std::int64_t>(i) * d + j] +
                           gout[static_cast<std::int64_t>(j) * d + i];
        if (wgt == 0.0) continue;
        any = true;
        const double* uj = unit->data() + static_cast<std::int64_t>(j) * len;
        for (std::int64_t p = 0; p < len; ++p) dv[p] += wgt * uj[p];
        r += wgt * (*rho)[static_cast<std::int64_t>(i) * d + j];
      }
      if (!any) continue;
      const double* ui = unit->data() + static_cast<std::int64_t>(i) * len;
      const double inv_sigma = 1.0 / (*sigma)[i];
      // dv = (sum_j w_j u_j - (sum_j w_j rho_ij) u_i) / sigma_i
      for (std::int64_t p = 0; p < len; ++p) {
        dv[p] = (dv[p] - r * ui[p]) * inv_sigma;
      }
      // scatter back into [N,d,h,w]
      for (int b = 0; b < n; ++b) {
        double* dst = da.data() + (static_cast<std::int64_t>(b) * d + i) * hw;
        const double* s = dv.data() + static_cast<std::int64_t>(b) * hw;
        for (std::int64_t p = 0; p < hw; ++p) dst[p] += s[p];
      }
    }
  });
  return out;
}

Tensor Tape::grouping_loss(const Tensor& similarity,
                           const FilterPartition& partition) {
  if (similarity.shape().size() != 2 ||
      similarity.dim(0) != similarity.dim(1)) {
    throw std::invalid_argument("grouping_loss: similarity must be [d,d]");
  }
  const int d = similarity.dim(0);
  partition.validate(d);
  const auto groups = partition.groups();
  auto within = std::make_shared<std::vector<double>>(partition.k, 0.0);
  auto total = std::make_shared<std::vector<double>>(partition.k, 0.0);
  const double* s = similarity.data().data();
  for (int k = 0; k < partition.k; ++k) {
    for (int i : groups[k]) {
      const double* row = s + static_cast<std::int64_t>(i) * d;
      for (int j : groups[k]) (*within)[k] += row[j];
      for (int j = 0; j < d; ++j) (*total)[k] += row[j];
    }
  }
  double value = 0.0;
  for (int k = 0; k < partition.k; ++k) {
    if ((*total)[k] > 0.0) value -= (*within)[k] / (*total)[k];
  }
  Tensor out = Tensor::make({1}, similarity.requires_grad());
  out.data()[0] = value;
  auto assign = std::make_shared<std::vector<int>>(partition.assignment);
  push_node(out, [similarity, within, total, assign, d](
                     GradMap& grads, const std::vector<double>& gout) {
    if (!similarity.requires_grad()) return;
    auto& ds = grad_buffer(grads, similarity.impl());
    for (int p = 0; p < d; ++p) {
      const int gp = (*assign)[p];
      const double t = (*total)[gp];
      if (t <= 0.0) continue;
      const double wt = (*within)[gp];
      for (int q = 0; q < d; ++q) {
        double g = wt / (t * t);
        if ((*assign)[q] == gp) g -= 1.0 / t;
        ds[static_cast<std::int64_t>(p) * d + q] += gout[0] * g;
      }
    }
  });
  return out;
}

void Tape::backward(const Tensor& root) {
  if (!root.defined() || root.size() != 1) {
    throw std::invalid_argument("backward: root must be a defined scalar");
  }
  GradMap grads;
  grads.emplace(root.impl(), std::vector<double>{1.0});
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    const auto found = grads.find(it->out);
    if (found == grads.end()) continue;  // not on the path from root
    it->fn(grads, found->second);
  }
  for (auto& [impl, buf] : grads) {
    if (!impl->requires_grad) continue;
    auto& g = impl->grad;
    for (std::size_t i = 0; i < buf.size(); ++i) g[i] += buf[i];
  }
}

// ---------------------------------------------------------------------------
// Optimizer

void sgd_step(const std::vector<Tensor>& params, double lr) {
  for (const Tensor& p : params) {
    if (!p.requires_grad()) {
      throw std::invalid_argument("sgd_step: parameter without grad buffer");
    }
  }
  for (const Tensor& p : params) {
    Tensor t = p;
    auto& data = t.data();
    const auto& g = t.grad();
    for (std::size_t i = 0; i < data.size(); ++i) data[i] -= lr * g[i];
  }
}

void Sgd::step(const std::vector<Tensor>& params) {
  if (momentum == 0.0) {
    sgd_step(params, lr);
    return;
  }
  for (const Tensor& p : params) {
    if (!p.requires_grad()) {
      throw std::invalid_argument("Sgd::step: parameter without grad buffer");
    }
    auto& v = velocity_[p.impl()];
    if (v.empty()) v.assign(p.size(), 0.0);
    Tensor t = p;
    auto& data = t.data();
    const auto& g = t.grad();
    for (std::size_t i = 0; i < data.size(); ++i) {
      v[i] = momentum * v[i] + g[i];
      data[i] -= lr * v[i];
    }
  }
}

void zero_grads(const std::vector<Tensor>& params) {
  for (const Tensor& p : params) {
    Tensor t = p;
    t.zero_grad();
  }
}

// ---------------------------------------------------------------------------
// Gradient checking

std::vector<double> analytic_gradient(const TapeFn& f, const Tensor& x,
                                      GradMode mode) {
  Tensor probe = x.clone();
  probe.set_requires_grad(true);
  Tape tape(mode);
  Tensor y = f(tape, probe);
  if (y.size() != 1) {
    throw std::invalid_argument("analytic_gradient: f must be scalar-valued");
  }
  tape.backward(y);
  return probe.grad();
}

std::vector<double> numeric_gradient(const TapeFn& f, const Tensor& x,
                                     double eps) {
  if (eps <= 0.0) throw std::invalid_argument("numeric_gradient: eps > 0");
  std::vector<double> out(x.size());
  for (std::int64_t i = 0; i < x.size(); ++i) {
    Tensor hi = x.clone();
    hi.data()[i] += eps;
    Tensor lo = x.clone();
    lo.data()[i] -= eps;
    Tape t1, t2;
    out[i] = (f(t1, hi).item() - f(t2, lo).item()) / (2.0 * eps);
  }
  return out;
}

double grad_check(const TapeFn& f, const Tensor& x, double eps) {
  const std::vector<double> a = analytic_gradient(f, x);
  const std::vector<double> num = numeric_gradient(f, x, eps);
  double worst = 0.0;
  for (std::int64_t i = 0; i < x.size(); ++i) {
    if (std::abs(x.data()[i]) <= 10.0 * eps) continue;  // relu kink guard
    const double denom =
        std::max({std::abs(a[i]), std::abs(num[i]), 1e-8});
    worst = std::max(worst, std::abs(a[i] - num[i]) / denom);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// RNG + threading

namespace rng {

std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::mt19937_64 engine(std::uint64_t seed) { return std::mt19937_64(seed); }

}  // namespace rng

int max_threads() {
  if (const char* env = std::getenv("FUD_THREADS")) {
    const int v = std::atoi(env);
    if (v >= 1) return v;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

void parallel_for(std::int64_t n,
                  const std::function<void(std::int64_t)>& fn) {
  const int threads = std::min<std::int64_t>(max_threads(), n);
  if (threads <= 1) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t]() {
      for (std::int64_t i = t; i < n; i += threads) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace fud
