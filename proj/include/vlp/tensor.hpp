#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "vlp/error.hpp"

namespace vlp {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
};

}  // namespace detail

// Dense row-major float64 tensor with shared storage. Copies of a Tensor alias
// the same node, which is what lets the tape route gradients back to leaves.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::TensorNode>()) {
    for (auto d : shape) detail::require<DimensionError>(d > 0, "tensor dims must be positive: " + shape_str(shape));
    detail::require<DimensionError>(data.size() == shape_numel(shape),
                                    "data length " + std::to_string(data.size()) + " does not match shape " +
                                        shape_str(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

  static Tensor identity(std::size_t n) {
    auto t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows, bool requires_grad = false) {
    const std::size_t r = rows.size();
    detail::require<DimensionError>(r > 0, "empty matrix literal");
    const std::size_t c = rows.begin()->size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      detail::require<DimensionError>(row.size() == c, "ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data), requires_grad);
  }

  static Tensor vector(std::vector<double> v, bool requires_grad = false) {
    const auto n = v.size();
    return Tensor({n}, std::move(v), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t rows() const { return node_->shape.at(0); }
  std::size_t cols() const { return node_->shape.at(1); }
  bool is_scalar() const { return numel() == 1; }

  std::span<double> data() { return node_->data; }
  std::span<const double> data() const { return node_->data; }
  const std::vector<double>& values() const { return node_->data; }
  double item() const {
    detail::require<ContractError>(is_scalar(), "item() on non-scalar tensor " + shape_str(shape()));
    return node_->data[0];
  }

  double& at(std::size_t i, std::size_t j) { return node_->data[i * node_->shape[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return node_->data[i * node_->shape[1] + j]; }
  double& operator[](std::size_t i) { return node_->data[i]; }
  double operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  // Gradient state lives in the shared node, so these work through const
  // handles (the tape holds const copies of its inputs).
  void set_requires_grad(bool v) const { node_->requires_grad = v; }

  bool has_grad() const { return !node_->grad.empty(); }
  // Gradient buffer; allocated (zero) on first access.
  std::span<double> grad() const {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
    return node_->grad;
  }
  Tensor grad_tensor() const {
    if (node_->grad.empty()) return zeros(shape());
    return Tensor(shape(), node_->grad);
  }
  void zero_grad() const { node_->grad.clear(); }

  // Value copy that is disconnected from any tape.
  Tensor detach() const { return Tensor(shape(), node_->data); }
  Tensor clone(bool requires_grad) const { return Tensor(shape(), node_->data, requires_grad); }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

// Records differentiable operations in execution order. Entries are appended
// only after their inputs exist, so the sequence is topologically sorted and
// a single reverse sweep computes all gradients.
//
// A disabled tape records nothing and every op output is a constant; it is
// used for inference.
class Tape {
 public:
  Tape() = default;
  static Tape inference() {
    Tape t;
    t.enabled_ = false;
    return t;
  }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  bool enabled() const { return enabled_; }
  std::size_t size() const { return entries_.size(); }

  bool wants_grad(std::initializer_list<const Tensor*> inputs) const {
    if (!enabled_) return false;
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
  }
  bool wants_grad(std::span<const Tensor> inputs) const {
    if (!enabled_) return false;
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  }

  void record(Tensor output, std::function<void()> backward) {
    entries_.push_back({std::move(output), std::move(backward)});
  }

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape backwards. Gradients of
  // leaf tensors accumulate across calls; intermediate gradients are owned by
  // this tape's outputs.
  void backward(Tensor loss) {
    detail::require<ContractError>(loss.defined() && loss.is_scalar(),
                                   "backward needs a scalar loss, got " +
                                       (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    auto it = std::find_if(entries_.rbegin(), entries_.rend(),
                           [&](const Entry& e) { return e.output.same_node(loss); });
    detail::require<ContractError>(it != entries_.rend(), "loss is not an output recorded on this tape");
    loss.grad()[0] += 1.0;
    for (; it != entries_.rend(); ++it) {
      if (it->output.has_grad()) it->backward();
    }
  }

  void clear() { entries_.clear(); }

 private:
  struct Entry {
    Tensor output;
    std::function<void()> backward;
  };
  std::vector<Entry> entries_;
  bool enabled_ = true;
};

namespace detail {

inline void require_matrix(const Tensor& t, const char* op) {
  require<DimensionError>(t.defined() && t.rank() == 2,
                          std::string(op) + ": expected a matrix, got " +
                              (t.defined() ? shape_str(t.shape()) : std::string("undefined")));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require<DimensionError>(a.shape() == b.shape(),
                          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline void accumulate(const Tensor& t, std::span<const double> g) {
  if (!t.requires_grad()) return;
  auto dst = t.grad();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

// c[m×n] += a[m×k] · b[k×n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[m×k] += a[m×n] · b[k×n]ᵀ
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += ai[j] * bp[j];
      c[i * k + p] += s;
    }
  }
}

// c[k×n] += a[m×k]ᵀ · b[m×n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Differentiable operations. Each takes the tape first; when no input needs a
// gradient (or the tape is disabled) nothing is recorded.
// ---------------------------------------------------------------------------

inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  detail::require<DimensionError>(b.rows() == k, "matmul: inner dimensions disagree " + shape_str(a.shape()) + " · " +
                                                     shape_str(b.shape()));
  Tensor out = Tensor::zeros({m, n});
  detail::gemm_nn(a.data().data(), b.data().data(), out.data().data(), m, k, n);
  if (tape.wants_grad({&a, &b})) {
    out.set_requires_grad(true);
    tape.record(out, [a, b, out, m, k, n]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) detail::gemm_nt(g.data(), b.data().data(), a.grad().data(), m, n, k);
      if (b.requires_grad()) detail::gemm_tn(a.data().data(), g.data(), b.grad().data(), m, k, n);
    });
  }
  return out;
}

inline Tensor transpose(Tape& tape, const Tensor& a) {
  detail::require_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
  if (tape.wants_grad({&a})) {
    out.set_requires_grad(true);
    tape.record(out, [a, out, m, n]() mutable {
      auto g = out.grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    });
  }
  return out;
}

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] + b[i];
  Tensor out(a.shape(), std::move(v));
  if (tape.wants_grad({&a, &b})) {
    out.set_requires_grad(true);
    tape.record(out, [a, b, out]() mutable {
      detail::accumulate(a, out.grad());
      detail::accumulate(b, out.grad());
    });
  }
  return out;
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] - b[i];
  Tensor out(a.shape(), std::move(v));
  if (tape.wants_grad({&a, &b})) {
    out.set_requires_grad(true);
    tape.record(out, [a, b, out]() mutable {
      auto g = out.grad();
      detail::accumulate(a, g);
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * b[i];
  Tensor out(a.shape(), std::move(v));
  if (tape.wants_grad({&a, &b})) {
    out.set_requires_grad(true);
    tape.record(out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      }
    });
  }
  return out;
}

inline Tensor scale(Tape& tape, const Tensor& a, double s) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * s;
  Tensor out(a.shape(), std::move(v));
  if (tape.wants_grad({&a})) {
    out.set_requires_grad(true);
    tape.record(out, [a, out, s]() mutable {
      if (!a.requires_grad()) return;
      auto g = out.grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
  }
  return out;
}

// x[m×n] + bias[n] broadcast over rows. The only broadcast supported.
inline Tensor add_row_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
  detail::require_matrix(x, "add_row_bias");
  const std::size_t m = x.rows(), n = x.cols();
  detail::require<DimensionError>(bias.numel() == n, "add_row_bias: bias length " + std::to_string(bias.numel()) +
                                                         " vs " + std::to_string(n) + " columns");
  Tensor out = x.detach();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) += bias[j];
  if (tape.wants_grad({&x, &bias})) {
    out.set_requires_grad(true);
    tape.record(out, [x, bias, out, m, n]() mutable {
      auto g = out.grad();
      detail::accumulate(x, g);
      if (bias.requires_grad()) {
        auto gb = bias.grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
      }
    });
  }
  return out;
}

// Affine layer: x · w + b.
inline Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_row_bias(tape, matmul(tape, x, w), b);
}

inline Tensor softmax_rows(Tape& tape, const Tensor& x) {
  detail::require_matrix(x, "softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  Tensor out = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j) {
      const double v = x.at(i, j);
      detail::require<NumericError>(!std::isnan(v), "softmax_rows: NaN input");
      mx = std::max(mx, v);
    }
    detail::require<NumericError>(std::isfinite(mx), "softmax_rows: non-finite row maximum");
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += (out.at(i, j) = std::exp(x.at(i, j) - mx));
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) /= s;
  }
  if (tape.wants_grad({&x})) {
    out.set_requires_grad(true);
    tape.record(out, [x, out, m, n]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * out.at(i, j);
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += out.at(i, j) * (g[i * n + j] - dot);
      }
    });
  }
  return out;
}

inline Tensor log_softmax_rows(Tape& tape, const Tensor& x) {
  detail::require_matrix(x, "log_softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  Tensor out = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j) {
      detail::require<NumericError>(!std::isnan(x.at(i, j)), "log_softmax_rows: NaN input");
      mx = std::max(mx, x.at(i, j));
    }
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(x.at(i, j) - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = x.at(i, j) - lse;
  }
  if (tape.wants_grad({&x})) {
    out.set_requires_grad(true);
    tape.record(out, [x, out, m, n]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < m; ++i) {
        double gs = 0.0;
        for (std::size_t j = 0; j < n; ++j) gs += g[i * n + j];
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[i * n + j] - std::exp(out.at(i, j)) * gs;
      }
    });
  }
  return out;
}

// Per-row normalization over the last dimension followed by gain/bias.
inline Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  detail::require_matrix(x, "layer_norm");
  const std::size_t m = x.rows(), n = x.cols();
  detail::require<DimensionError>(n >= 2, "layer_norm: last dimension must be >= 2");
  detail::require<DimensionError>(gain.numel() == n && bias.numel() == n, "layer_norm: gain/bias length mismatch");
  Tensor out = Tensor::zeros({m, n});
  std::vector<double> xhat(m * n), inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += x.at(i, j);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (x.at(i, j) - mean) * (x.at(i, j) - mean);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (x.at(i, j) - mean) * inv_std[i];
      out.at(i, j) = xhat[i * n + j] * gain[j] + bias[j];
    }
  }
  if (tape.wants_grad({&x, &gain, &bias})) {
    out.set_requires_grad(true);
    tape.record(out, [x, gain, bias, out, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)]() mutable {
      auto g = out.grad();
      if (gain.requires_grad()) {
        auto gg = gain.grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * xhat[i * n + j];
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
      }
      if (x.requires_grad()) {
        auto gx = x.grad();
        const double dn = static_cast<double>(n);
        for (std::size_t i = 0; i < m; ++i) {
          double sum_d = 0.0, sum_dx = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double d = g[i * n + j] * gain[j];
            sum_d += d;
            sum_dx += d * xhat[i * n + j];
          }
          for (std::size_t j = 0; j < n; ++j) {
            const double d = g[i * n + j] * gain[j];
            gx[i * n + j] += inv_std[i] * (d - sum_d / dn - xhat[i * n + j] * sum_dx / dn);
          }
        }
      }
    });
  }
  return out;
}

// tanh-approximated GELU; smooth everywhere, so finite differences behave.
inline Tensor gelu(Tape& tape, const Tensor& x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c3 = 0.044715;
  std::vector<double> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double u = x[i];
    v[i] = 0.5 * u * (1.0 + std::tanh(k * (u + c3 * u * u * u)));
  }
  Tensor out(x.shape(), std::move(v));
  if (tape.wants_grad({&x})) {
    out.set_requires_grad(true);
    tape.record(out, [x, out]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double u = x[i];
        const double t = std::tanh(k * (u + c3 * u * u * u));
        const double dt = (1.0 - t * t) * k * (1.0 + 3.0 * c3 * u * u);
        gx[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * u * dt);
      }
    });
  }
  return out;
}

// Columns [begin, end) of a matrix.
inline Tensor slice_cols(Tape& tape, const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require_matrix(x, "slice_cols");
  detail::require<DimensionError>(begin < end && end <= x.cols(), "slice_cols: bad column range");
  const std::size_t m = x.rows(), n = x.cols(), w = end - begin;
  Tensor out = Tensor::zeros({m, w});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) out.at(i, j) = x.at(i, begin + j);
  if (tape.wants_grad({&x})) {
    out.set_requires_grad(true);
    tape.record(out, [x, out, m, n, w, begin]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) gx[i * n + begin + j] += g[i * w + j];
    });
  }
  return out;
}

inline Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts) {
  detail::require<DimensionError>(!parts.empty(), "concat_cols: no inputs");
  const std::size_t m = parts.front().rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_cols");
    detail::require<DimensionError>(p.rows() == m, "concat_cols: row counts differ");
    total += p.cols();
  }
  Tensor out = Tensor::zeros({m, total});
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out.at(i, off + j) = p.at(i, j);
    off += p.cols();
  }
  if (tape.wants_grad(std::span<const Tensor>(parts))) {
    out.set_requires_grad(true);
    tape.record(out, [parts, out, m, total]() mutable {
      auto g = out.grad();
      std::size_t off = 0;
      for (auto& p : parts) {
        const std::size_t w = p.cols();
        if (p.requires_grad()) {
          auto gp = p.grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) gp[i * w + j] += g[i * total + off + j];
        }
        off += w;
      }
    });
  }
  return out;
}

// Stacks matrices (or vectors, treated as single rows) vertically.
inline Tensor concat_rows(Tape& tape, const std::vector<Tensor>& parts) {
  detail::require<DimensionError>(!parts.empty(), "concat_rows: no inputs");
  auto width = [](const Tensor& t) { return t.rank() == 1 ? t.numel() : t.cols(); };
  auto height = [](const Tensor& t) { return t.rank() == 1 ? std::size_t{1} : t.rows(); };
  const std::size_t n = width(parts.front());
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require<DimensionError>(p.rank() <= 2 && width(p) == n, "concat_rows: column counts differ");
    total += height(p);
  }
  std::vector<double> v;
  v.reserve(total * n);
  for (const auto& p : parts) v.insert(v.end(), p.data().begin(), p.data().end());
  Tensor out({total, n}, std::move(v));
  if (tape.wants_grad(std::span<const Tensor>(parts))) {
    out.set_requires_grad(true);
    tape.record(out, [parts, out]() mutable {
      auto g = out.grad();
      std::size_t off = 0;
      for (auto& p : parts) {
        const std::size_t len = p.numel();
        if (p.requires_grad()) detail::accumulate(p, g.subspan(off, len));
        off += len;
      }
    });
  }
  return out;
}

// out[r] = x[indices[r]]; repeated indices accumulate in backward.
inline Tensor gather_rows(Tape& tape, const Tensor& x, const std::vector<std::size_t>& indices) {
  detail::require_matrix(x, "gather_rows");
  detail::require<DimensionError>(!indices.empty(), "gather_rows: no indices");
  const std::size_t n = x.cols();
  Tensor out = Tensor::zeros({indices.size(), n});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    detail::require<DimensionError>(indices[r] < x.rows(), "gather_rows: index out of range");
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(indices[r] * n), n,
                out.data().begin() + static_cast<std::ptrdiff_t>(r * n));
  }
  if (tape.wants_grad({&x})) {
    out.set_requires_grad(true);
    tape.record(out, [x, out, indices, n]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t r = 0; r < indices.size(); ++r)
        for (std::size_t j = 0; j < n; ++j) gx[indices[r] * n + j] += g[r * n + j];
    });
  }
  return out;
}

inline Tensor sum(Tape& tape, const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor out = Tensor::scalar(s);
  if (tape.wants_grad({&x})) {
    out.set_requires_grad(true);
    tape.record(out, [x, out]() mutable {
      const double g = out.grad()[0];
      auto gx = x.grad();
      for (auto& v : gx) v += g;
    });
  }
  return out;
}

inline Tensor sum_squares(Tape& tape, const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v * v;
  Tensor out = Tensor::scalar(s);
  if (tape.wants_grad({&x})) {
    out.set_requires_grad(true);
    tape.record(out, [x, out]() mutable {
      const double g = out.grad()[0];
      auto gx = x.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += 2.0 * g * x[i];
    });
  }
  return out;
}

// Σ weights ⊙ x with weights held constant.
inline Tensor weighted_sum(Tape& tape, const Tensor& x, const Tensor& weights) {
  detail::require_same_shape(x, weights, "weighted_sum");
  double s = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) s += x[i] * weights[i];
  Tensor out = Tensor::scalar(s);
  if (tape.wants_grad({&x})) {
    out.set_requires_grad(true);
    Tensor w = weights.detach();
    tape.record(out, [x, w, out]() mutable {
      const double g = out.grad()[0];
      auto gx = x.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * w[i];
    });
  }
  return out;
}

// Linear combination Σ coeffs[i]·parts[i] of scalars.
inline Tensor combine_scalars(Tape& tape, const std::vector<Tensor>& parts, const std::vector<double>& coeffs) {
  detail::require<DimensionError>(parts.size() == coeffs.size() && !parts.empty(), "combine_scalars: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    detail::require<ContractError>(parts[i].is_scalar(), "combine_scalars: non-scalar part");
    s += coeffs[i] * parts[i].item();
  }
  Tensor out = Tensor::scalar(s);
  if (tape.wants_grad(std::span<const Tensor>(parts))) {
    out.set_requires_grad(true);
    tape.record(out, [parts, coeffs, out]() mutable {
      const double g = out.grad()[0];
      for (std::size_t i = 0; i < parts.size(); ++i)
        if (parts[i].requires_grad()) parts[i].grad()[0] += g * coeffs[i];
    });
  }
  return out;
}

// Mean negative log-likelihood of targets[r] under softmax(logits[r]).
inline Tensor cross_entropy_rows(Tape& tape, const Tensor& logits, const std::vector<std::size_t>& targets) {
  detail::require_matrix(logits, "cross_entropy_rows");
  detail::require<DimensionError>(targets.size() == logits.rows(), "cross_entropy_rows: one target per row required");
  const std::size_t m = logits.rows(), n = logits.cols();
  Tape local = Tape::inference();
  Tensor logp = log_softmax_rows(local, logits);
  double loss = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    detail::require<ContractError>(targets[r] < n, "cross_entropy_rows: target out of range");
    loss -= logp.at(r, targets[r]);
  }
  loss /= static_cast<double>(m);
  Tensor out = Tensor::scalar(loss);
  if (tape.wants_grad({&logits})) {
    out.set_requires_grad(true);
    tape.record(out, [logits, logp, targets, out, m, n]() mutable {
      const double g = out.grad()[0] / static_cast<double>(m);
      auto gx = logits.grad();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < n; ++j)
          gx[r * n + j] += g * (std::exp(logp.at(r, j)) - (j == targets[r] ? 1.0 : 0.0));
    });
  }
  return out;
}

// D[i][j] = 1 − cos(a_i, b_j).
inline Tensor cosine_distance_matrix(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "cosine_distance_matrix");
  detail::require_matrix(b, "cosine_distance_matrix");
  detail::require<DimensionError>(a.cols() == b.cols(), "cosine_distance_matrix: feature widths differ");
  const std::size_t m = a.rows(), t = b.rows(), c = a.cols();
  auto norms = [c](const Tensor& x) {
    std::vector<double> out(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) s += x.at(i, j) * x.at(i, j);
      detail::require<NumericError>(s > 0.0, "cosine distance: zero-norm row");
      out[i] = std::sqrt(s);
    }
    return out;
  };
  const auto na = norms(a), nb = norms(b);
  Tensor cosine = Tensor::zeros({m, t});
  detail::gemm_nt(a.data().data(), b.data().data(), cosine.data().data(), m, c, t);
  Tensor out = Tensor::zeros({m, t});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < t; ++j) {
      cosine.at(i, j) /= na[i] * nb[j];
      out.at(i, j) = 1.0 - cosine.at(i, j);
    }
  if (tape.wants_grad({&a, &b})) {
    out.set_requires_grad(true);
    tape.record(out, [a, b, out, cosine, na, nb, m, t, c]() mutable {
      auto g = out.grad();
      // d cos(x,y)/dx = y/(|x||y|) − cos·x/|x|²; the distance negates it.
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < t; ++j) {
            const double gij = g[i * t + j];
            if (gij == 0.0) continue;
            const double cij = cosine.at(i, j);
            for (std::size_t d = 0; d < c; ++d)
              ga[i * c + d] -= gij * (b.at(j, d) / (na[i] * nb[j]) - cij * a.at(i, d) / (na[i] * na[i]));
          }
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < t; ++j) {
            const double gij = g[i * t + j];
            if (gij == 0.0) continue;
            const double cij = cosine.at(i, j);
            for (std::size_t d = 0; d < c; ++d)
              gb[j * c + d] -= gij * (a.at(i, d) / (na[i] * nb[j]) - cij * b.at(j, d) / (nb[j] * nb[j]));
          }
      }
    });
  }
  return out;
}

}  // namespace vlp
