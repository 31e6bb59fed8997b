#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "allspark/errors.hpp"

namespace allspark {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Thread cap for the optional data-parallel matmul. Reads ALLSPARK_THREADS
/// once; anything unset/invalid means single-threaded deterministic mode.
inline unsigned matmul_thread_cap() {
  static const unsigned cap = [] {
    const char* env = std::getenv("ALLSPARK_THREADS");
    if (!env) return 1u;
    const long v = std::strtol(env, nullptr, 10);
    if (v < 1) return 1u;
    return static_cast<unsigned>(v);
  }();
  return cap;
}

template <typename T>
class Tape;

/// Dense row-major tensor. A Tensor is a cheap handle onto shared storage;
/// values are immutable once the tensor has entered an op, grads accumulate
/// in place during backward passes.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : s_(std::make_shared<Storage>()) {
    if (shape.empty()) throw contract_error("tensor shape must have rank >= 1");
    for (std::size_t d : shape) {
      if (d == 0) throw contract_error("tensor dimensions must be positive");
    }
    if (shape_numel(shape) != values.size()) {
      throw shape_error("tensor data length " + std::to_string(values.size()) +
                        " does not match shape " + shape_str(shape));
    }
    s_->shape = std::move(shape);
    s_->values = std::move(values);
    s_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> v(shape_numel(shape), T{0});
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    std::vector<T> v(shape_numel(shape), value);
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t numel() const { return s_->values.size(); }
  std::size_t rank() const { return s_->shape.size(); }

  std::size_t rows() const {
    require_rank2("rows()");
    return s_->shape[0];
  }
  std::size_t cols() const {
    require_rank2("cols()");
    return s_->shape[1];
  }

  std::span<const T> values() const { return s_->values; }
  /// Mutable values. Only legitimate before the tensor enters any op
  /// (initialization) or on optimizer-owned parameters between steps.
  std::span<T> values_mut() { return s_->values; }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool rg) { s_->requires_grad = rg; }

  bool has_grad() const { return !s_->grad.empty(); }
  std::span<const T> grad() const { return s_->grad; }

  /// Allocates (zero) grad storage if absent and returns it mutable.
  std::span<T> grad_mut() {
    if (s_->grad.empty()) s_->grad.assign(s_->values.size(), T{0});
    return s_->grad;
  }

  void zero_grad() {
    if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), T{0});
  }

  void accumulate_grad(std::span<const T> g) {
    if (!s_->requires_grad) return;
    auto dst = grad_mut();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
  }

  T item() const {
    if (numel() != 1) {
      throw contract_error("item() on tensor of shape " + shape_str(shape()));
    }
    return s_->values[0];
  }

  T at(std::size_t r, std::size_t c) const {
    require_rank2("at()");
    return s_->values[r * s_->shape[1] + c];
  }

  /// Copy of the data with no grad slot and no tape linkage.
  Tensor detach() const {
    return Tensor(s_->shape, s_->values, false);
  }

  Tensor clone(bool requires_grad) const {
    return Tensor(s_->shape, s_->values, requires_grad);
  }

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

 private:
  struct Storage {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;  // allocated lazily on first accumulation
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> s_;

  void require_rank2(const char* what) const {
    if (s_->shape.size() != 2) {
      throw shape_error(std::string(what) + " requires rank-2 tensor, got " +
                        shape_str(s_->shape));
    }
  }
};

/// Ordered record of executed differentiable operations. Eager: ops append
/// their backward closures in execution order, which is already topological.
/// A tape is consumed by exactly one backward pass.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t node_count() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  void record(std::function<void()> backward_step) {
    if (consumed_) {
      throw state_error("cannot record onto a consumed tape");
    }
    nodes_.push_back(std::move(backward_step));
  }

  /// Seeds d(loss)/d(loss) = 1 and propagates through all recorded nodes in
  /// reverse order. Tensors whose grad buffer stays empty were simply not
  /// reachable from the loss.
  void backward(Tensor<T> loss) {
    if (consumed_) {
      throw state_error("tape already consumed by a previous backward pass");
    }
    if (loss.numel() != 1) {
      throw contract_error("backward requires a scalar loss, got shape " +
                           shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) {
      throw contract_error(
          "backward requires a loss recorded on this tape "
          "(loss.requires_grad() is false)");
    }
    consumed_ = true;
    loss.grad_mut()[0] += T{1};
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
};

namespace detail {

template <typename T>
bool track(const Tape<T>* tape, std::initializer_list<bool> flags) {
  if (!tape) return false;
  for (bool f : flags) {
    if (f) return true;
  }
  return false;
}

// out[m x p] += a[m x n] * b[n x p], serial, ikj order.
template <typename T>
void matmul_accum(std::span<const T> a, std::span<const T> b, std::span<T> out,
                  std::size_t m, std::size_t n, std::size_t p,
                  std::size_t row_begin, std::size_t row_end) {
  for (std::size_t i = row_begin; i < row_end; ++i) {
    const T* arow = a.data() + i * n;
    T* orow = out.data() + i * p;
    for (std::size_t k = 0; k < n; ++k) {
      const T aik = arow[k];
      if (aik == T{0}) continue;
      const T* brow = b.data() + k * p;
      for (std::size_t j = 0; j < p; ++j) orow[j] += aik * brow[j];
    }
  }
}

// Row-partitioned parallel matmul. Each output row is produced by exactly one
// thread with the same serial inner loop, so results are bit-identical to the
// single-threaded path.
template <typename T>
void matmul_forward(std::span<const T> a, std::span<const T> b, std::span<T> out,
                    std::size_t m, std::size_t n, std::size_t p) {
  const unsigned cap = matmul_thread_cap();
  const std::size_t flops = m * n * p;
  if (cap <= 1 || m < 2 * cap || flops < 1u << 20) {
    matmul_accum(a, b, out, m, n, p, 0, m);
    return;
  }
  const unsigned nthreads = std::min<unsigned>(cap, static_cast<unsigned>(m));
  std::vector<std::thread> workers;
  workers.reserve(nthreads);
  const std::size_t chunk = (m + nthreads - 1) / nthreads;
  for (unsigned t = 0; t < nthreads; ++t) {
    const std::size_t lo = t * chunk;
    const std::size_t hi = std::min(m, lo + chunk);
    if (lo >= hi) break;
    workers.emplace_back([=] { matmul_accum(a, b, out, m, n, p, lo, hi); });
  }
  for (auto& w : workers) w.join();
}

}  // namespace detail

/// Standard matrix product a[m x n] * b[n x p].
template <typename T>
Tensor<T> matmul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw shape_error("matmul requires rank-2 operands, got " +
                      shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), n = a.cols(), p = b.cols();
  if (b.rows() != n) {
    throw shape_error("matmul inner dimension mismatch: " +
                      shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<T> buf(m * p, T{0});
  detail::matmul_forward<T>(a.values(), b.values(), buf, m, n, p);
  Tensor<T> out(Shape{m, p}, std::move(buf),
                detail::track(tape, {a.requires_grad(), b.requires_grad()}));
  if (out.requires_grad()) {
    tape->record([a, b, out, m, n, p]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      if (a.requires_grad()) {
        // dA[i,k] += sum_j go[i,j] * b[k,j]
        auto da = a.grad_mut();
        auto bv = b.values();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t k = 0; k < n; ++k) {
            T acc{0};
            const T* grow = go.data() + i * p;
            const T* brow = bv.data() + k * p;
            for (std::size_t j = 0; j < p; ++j) acc += grow[j] * brow[j];
            da[i * n + k] += acc;
          }
        }
      }
      if (b.requires_grad()) {
        // dB[k,j] += sum_i a[i,k] * go[i,j]
        auto db = b.grad_mut();
        auto av = a.values();
        for (std::size_t i = 0; i < m; ++i) {
          const T* arow = av.data() + i * n;
          const T* grow = go.data() + i * p;
          for (std::size_t k = 0; k < n; ++k) {
            const T aik = arow[k];
            if (aik == T{0}) continue;
            T* drow = db.data() + k * p;
            for (std::size_t j = 0; j < p; ++j) drow[j] += aik * grow[j];
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose(Tape<T>* tape, const Tensor<T>& x) {
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<T> buf(m * n);
  auto xv = x.values();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) buf[j * m + i] = xv[i * n + j];
  }
  Tensor<T> out(Shape{n, m}, std::move(buf),
                detail::track(tape, {x.requires_grad()}));
  if (out.requires_grad()) {
    tape->record([x, out, m, n]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += go[j * m + i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw shape_error("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  }
  std::vector<T> buf(a.numel());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = av[i] + bv[i];
  Tensor<T> out(a.shape(), std::move(buf),
                detail::track(tape, {a.requires_grad(), b.requires_grad()}));
  if (out.requires_grad()) {
    tape->record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      if (a.requires_grad()) a.accumulate_grad(go);
      if (b.requires_grad()) b.accumulate_grad(go);
    });
  }
  return out;
}

/// x[m x n] + bias[n] broadcast over rows.
template <typename T>
Tensor<T> add_row_bias(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t m = x.rows(), n = x.cols();
  if (bias.rank() != 1 || bias.numel() != n) {
    throw shape_error("add_row_bias: bias " + shape_str(bias.shape()) +
                      " does not match row width of " + shape_str(x.shape()));
  }
  std::vector<T> buf(m * n);
  auto xv = x.values(), bv = bias.values();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) buf[i * n + j] = xv[i * n + j] + bv[j];
  }
  Tensor<T> out(x.shape(), std::move(buf),
                detail::track(tape, {x.requires_grad(), bias.requires_grad()}));
  if (out.requires_grad()) {
    tape->record([x, bias, out, m, n]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      if (x.requires_grad()) x.accumulate_grad(go);
      if (bias.requires_grad()) {
        auto gb = bias.grad_mut();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) gb[j] += go[i * n + j];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& x, T factor) {
  std::vector<T> buf(x.numel());
  auto xv = x.values();
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = xv[i] * factor;
  Tensor<T> out(x.shape(), std::move(buf),
                detail::track(tape, {x.requires_grad()}));
  if (out.requires_grad()) {
    tape->record([x, out, factor]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor * go[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> tanh_act(Tape<T>* tape, const Tensor<T>& x) {
  std::vector<T> buf(x.numel());
  auto xv = x.values();
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = std::tanh(xv[i]);
  Tensor<T> out(x.shape(), std::move(buf),
                detail::track(tape, {x.requires_grad()}));
  if (out.requires_grad()) {
    tape->record([x, out]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto ov = out.values();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        gx[i] += (T{1} - ov[i] * ov[i]) * go[i];
      }
    });
  }
  return out;
}

/// Row-wise softmax, stabilized by row-max subtraction. Rejects NaN input.
template <typename T>
Tensor<T> softmax_rows(Tape<T>* tape, const Tensor<T>& x) {
  const std::size_t m = x.rows(), n = x.cols();
  if (n < 1) throw shape_error("softmax_rows requires at least one column");
  auto xv = x.values();
  std::vector<T> buf(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = xv.data() + i * n;
    T rowmax = row[0];
    for (std::size_t j = 0; j < n; ++j) {
      if (std::isnan(static_cast<double>(row[j]))) {
        throw numeric_error("softmax_rows: NaN at row " + std::to_string(i));
      }
      rowmax = std::max(rowmax, row[j]);
    }
    T sum{0};
    T* orow = buf.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - rowmax);
      sum += orow[j];
    }
    for (std::size_t j = 0; j < n; ++j) orow[j] /= sum;
  }
  Tensor<T> out(x.shape(), std::move(buf),
                detail::track(tape, {x.requires_grad()}));
  if (out.requires_grad()) {
    tape->record([x, out, m, n]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto y = out.values();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < m; ++i) {
        const T* yrow = y.data() + i * n;
        const T* grow = go.data() + i * n;
        T dot{0};
        for (std::size_t j = 0; j < n; ++j) dot += yrow[j] * grow[j];
        T* gxrow = gx.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) {
          gxrow[j] += yrow[j] * (grow[j] - dot);
        }
      }
    });
  }
  return out;
}

/// Row-wise instance normalization: (r - mean(r)) / sqrt(popvar(r) + eps).
template <typename T>
Tensor<T> instance_norm_rows(Tape<T>* tape, const Tensor<T>& x,
                             T eps = static_cast<T>(1e-5)) {
  const std::size_t m = x.rows(), n = x.cols();
  if (n < 1) throw shape_error("instance_norm_rows requires >= 1 column");
  auto xv = x.values();
  std::vector<T> buf(m * n);
  std::vector<T> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = xv.data() + i * n;
    T mean{0};
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<T>(n);
    T var{0};
    for (std::size_t j = 0; j < n; ++j) {
      const T d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<T>(n);
    const T is = T{1} / std::sqrt(var + eps);
    inv_std[i] = is;
    T* orow = buf.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) orow[j] = (row[j] - mean) * is;
  }
  Tensor<T> out(x.shape(), std::move(buf),
                detail::track(tape, {x.requires_grad()}));
  if (out.requires_grad()) {
    tape->record([x, out, inv_std = std::move(inv_std), m, n]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto y = out.values();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < m; ++i) {
        const T* yrow = y.data() + i * n;
        const T* grow = go.data() + i * n;
        T gmean{0}, gymean{0};
        for (std::size_t j = 0; j < n; ++j) {
          gmean += grow[j];
          gymean += grow[j] * yrow[j];
        }
        gmean /= static_cast<T>(n);
        gymean /= static_cast<T>(n);
        T* gxrow = gx.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) {
          gxrow[j] += inv_std[i] * (grow[j] - gmean - yrow[j] * gymean);
        }
      }
    });
  }
  return out;
}

inline constexpr double kCrossEntropyFloor = 1e-12;

/// Mean over non-ignored positions of -log(probs[i, targets[i]]).
/// probs rows must already lie on the simplex (within 1e-4).
template <typename T>
Tensor<T> cross_entropy_mean(Tape<T>* tape, const Tensor<T>& probs,
                             const std::vector<int>& targets,
                             std::optional<int> ignore_index = std::nullopt) {
  const std::size_t m = probs.rows(), k = probs.cols();
  if (targets.size() != m) {
    throw shape_error("cross_entropy_mean: " + std::to_string(targets.size()) +
                      " targets for " + std::to_string(m) + " rows");
  }
  auto pv = probs.values();
  for (std::size_t i = 0; i < m; ++i) {
    T sum{0};
    for (std::size_t j = 0; j < k; ++j) sum += pv[i * k + j];
    if (std::abs(static_cast<double>(sum) - 1.0) > 1e-4) {
      throw contract_error("cross_entropy_mean: row " + std::to_string(i) +
                           " sums to " + std::to_string(static_cast<double>(sum)) +
                           ", expected 1");
    }
  }
  std::size_t scored = 0;
  T loss{0};
  const T floor = static_cast<T>(kCrossEntropyFloor);
  for (std::size_t i = 0; i < m; ++i) {
    const int t = targets[i];
    if (ignore_index && t == *ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= k) {
      throw contract_error("cross_entropy_mean: target " + std::to_string(t) +
                           " out of range [0," + std::to_string(k) + ")");
    }
    ++scored;
    loss -= std::log(std::max(pv[i * k + static_cast<std::size_t>(t)], floor));
  }
  if (scored == 0) {
    throw contract_error("cross_entropy_mean: all positions ignored, mean undefined");
  }
  loss /= static_cast<T>(scored);
  Tensor<T> out = Tensor<T>::scalar(loss);
  out.set_requires_grad(detail::track(tape, {probs.requires_grad()}));
  if (out.requires_grad()) {
    tape->record([probs, out, targets, ignore_index, scored, k, floor]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0];
      auto pv2 = probs.values();
      auto gp = probs.grad_mut();
      const T inv = g / static_cast<T>(scored);
      for (std::size_t i = 0; i < targets.size(); ++i) {
        const int t = targets[i];
        if (ignore_index && t == *ignore_index) continue;
        const std::size_t idx = i * k + static_cast<std::size_t>(t);
        if (pv2[idx] > floor) gp[idx] -= inv / pv2[idx];
      }
    });
  }
  return out;
}

/// Columns [begin, end) of x.
template <typename T>
Tensor<T> slice_cols(Tape<T>* tape, const Tensor<T>& x, std::size_t begin,
                     std::size_t end) {
  const std::size_t m = x.rows(), n = x.cols();
  if (begin >= end || end > n) {
    throw shape_error("slice_cols [" + std::to_string(begin) + "," +
                      std::to_string(end) + ") out of " + shape_str(x.shape()));
  }
  const std::size_t w = end - begin;
  std::vector<T> buf(m * w);
  auto xv = x.values();
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(xv.data() + i * n + begin, w, buf.data() + i * w);
  }
  Tensor<T> out(Shape{m, w}, std::move(buf),
                detail::track(tape, {x.requires_grad()}));
  if (out.requires_grad()) {
    tape->record([x, out, begin, m, n, w]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
          gx[i * n + begin + j] += go[i * w + j];
        }
      }
    });
  }
  return out;
}

/// Horizontal concatenation; all parts share the row count.
template <typename T>
Tensor<T> concat_cols(Tape<T>* tape, const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw contract_error("concat_cols of zero tensors");
  const std::size_t m = parts[0].rows();
  std::size_t total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.rows() != m) {
      throw shape_error("concat_cols row mismatch: " + shape_str(p.shape()));
    }
    total += p.cols();
    rg = rg || p.requires_grad();
  }
  std::vector<T> buf(m * total);
  std::size_t off = 0;
  for (const auto& p : parts) {
    auto pv = p.values();
    const std::size_t w = p.cols();
    for (std::size_t i = 0; i < m; ++i) {
      std::copy_n(pv.data() + i * w, w, buf.data() + i * total + off);
    }
    off += w;
  }
  Tensor<T> out(Shape{m, total}, std::move(buf), detail::track(tape, {rg}));
  if (out.requires_grad()) {
    tape->record([parts, out, m, total]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      std::size_t off2 = 0;
      for (auto& p : parts) {
        const std::size_t w = p.cols();
        if (p.requires_grad()) {
          auto gp = p.grad_mut();
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
              gp[i * w + j] += go[i * total + off2 + j];
            }
          }
        }
        off2 += w;
      }
    });
  }
  return out;
}

/// Vertical stack; all parts share the column count.
template <typename T>
Tensor<T> concat_rows(Tape<T>* tape, const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw contract_error("concat_rows of zero tensors");
  const std::size_t n = parts[0].cols();
  std::size_t total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.cols() != n) {
      throw shape_error("concat_rows column mismatch: " + shape_str(p.shape()));
    }
    total += p.rows();
    rg = rg || p.requires_grad();
  }
  std::vector<T> buf;
  buf.reserve(total * n);
  for (const auto& p : parts) {
    auto pv = p.values();
    buf.insert(buf.end(), pv.begin(), pv.end());
  }
  Tensor<T> out(Shape{total, n}, std::move(buf), detail::track(tape, {rg}));
  if (out.requires_grad()) {
    tape->record([parts, out, n]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      std::size_t off = 0;
      for (auto& p : parts) {
        const std::size_t len = p.numel();
        if (p.requires_grad()) {
          auto gp = p.grad_mut();
          for (std::size_t i = 0; i < len; ++i) gp[i] += go[off + i];
        }
        off += len;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum_all(Tape<T>* tape, const Tensor<T>& x) {
  auto xv = x.values();
  T s{0};
  for (T v : xv) s += v;
  Tensor<T> out = Tensor<T>::scalar(s);
  out.set_requires_grad(detail::track(tape, {x.requires_grad()}));
  if (out.requires_grad()) {
    tape->record([x, out]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0];
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

/// Bilinear upsampling of a (gh*gw) x k token grid to an (out_h*out_w) x k
/// pixel grid, align-corners=false convention. For output pixel (oy, ox) the
/// source coordinate is sy = clamp((oy + 0.5) * gh / out_h - 0.5, 0, gh - 1)
/// (same for sx); the four neighboring grid cells blend with weights
/// (1-fy)(1-fx), (1-fy)fx, fy(1-fx), fy*fx where fy = sy - floor(sy).
template <typename T>
Tensor<T> bilinear_upsample(Tape<T>* tape, const Tensor<T>& grid,
                            std::size_t gh, std::size_t gw, std::size_t out_h,
                            std::size_t out_w) {
  const std::size_t k = grid.cols();
  if (grid.rows() != gh * gw) {
    throw shape_error("bilinear_upsample: grid " + shape_str(grid.shape()) +
                      " does not match " + std::to_string(gh) + "x" +
                      std::to_string(gw));
  }
  struct Tap {
    std::size_t src;
    T w;
  };
  // Four taps per output pixel, shared across all k columns.
  std::vector<std::array<Tap, 4>> taps(out_h * out_w);
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    double sy = (static_cast<double>(oy) + 0.5) * static_cast<double>(gh) /
                    static_cast<double>(out_h) -
                0.5;
    sy = std::clamp(sy, 0.0, static_cast<double>(gh - 1));
    const std::size_t y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, gh - 1);
    const T fy = static_cast<T>(sy - static_cast<double>(y0));
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      double sx = (static_cast<double>(ox) + 0.5) * static_cast<double>(gw) /
                      static_cast<double>(out_w) -
                  0.5;
      sx = std::clamp(sx, 0.0, static_cast<double>(gw - 1));
      const std::size_t x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, gw - 1);
      const T fx = static_cast<T>(sx - static_cast<double>(x0));
      auto& t = taps[oy * out_w + ox];
      t[0] = {y0 * gw + x0, (T{1} - fy) * (T{1} - fx)};
      t[1] = {y0 * gw + x1, (T{1} - fy) * fx};
      t[2] = {y1 * gw + x0, fy * (T{1} - fx)};
      t[3] = {y1 * gw + x1, fy * fx};
    }
  }
  auto gv = grid.values();
  std::vector<T> buf(out_h * out_w * k, T{0});
  for (std::size_t pix = 0; pix < taps.size(); ++pix) {
    T* orow = buf.data() + pix * k;
    for (const auto& t : taps[pix]) {
      if (t.w == T{0}) continue;
      const T* srow = gv.data() + t.src * k;
      for (std::size_t j = 0; j < k; ++j) orow[j] += t.w * srow[j];
    }
  }
  Tensor<T> out(Shape{out_h * out_w, k}, std::move(buf),
                detail::track(tape, {grid.requires_grad()}));
  if (out.requires_grad()) {
    tape->record([grid, out, taps = std::move(taps), k]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto gg = grid.grad_mut();
      for (std::size_t pix = 0; pix < taps.size(); ++pix) {
        const T* grow = go.data() + pix * k;
        for (const auto& t : taps[pix]) {
          if (t.w == T{0}) continue;
          T* drow = gg.data() + t.src * k;
          for (std::size_t j = 0; j < k; ++j) drow[j] += t.w * grow[j];
        }
      }
    });
  }
  return out;
}

/// Average-pools an (in_h*in_w) x k pixel map down to a (gh*gw) x k grid.
/// in_h/in_w must be exact multiples of gh/gw.
template <typename T>
Tensor<T> avgpool_grid(Tape<T>* tape, const Tensor<T>& pixels, std::size_t in_h,
                       std::size_t in_w, std::size_t gh, std::size_t gw) {
  const std::size_t k = pixels.cols();
  if (pixels.rows() != in_h * in_w) {
    throw shape_error("avgpool_grid: input " + shape_str(pixels.shape()) +
                      " does not match " + std::to_string(in_h) + "x" +
                      std::to_string(in_w));
  }
  if (in_h % gh != 0 || in_w % gw != 0) {
    throw shape_error("avgpool_grid: " + std::to_string(in_h) + "x" +
                      std::to_string(in_w) + " not divisible by " +
                      std::to_string(gh) + "x" + std::to_string(gw));
  }
  const std::size_t bh = in_h / gh, bw = in_w / gw;
  const T inv = T{1} / static_cast<T>(bh * bw);
  auto pv = pixels.values();
  std::vector<T> buf(gh * gw * k, T{0});
  for (std::size_t y = 0; y < in_h; ++y) {
    const std::size_t cy = y / bh;
    for (std::size_t x = 0; x < in_w; ++x) {
      const std::size_t cell = cy * gw + x / bw;
      const T* srow = pv.data() + (y * in_w + x) * k;
      T* drow = buf.data() + cell * k;
      for (std::size_t j = 0; j < k; ++j) drow[j] += srow[j];
    }
  }
  for (auto& v : buf) v *= inv;
  Tensor<T> out(Shape{gh * gw, k}, std::move(buf),
                detail::track(tape, {pixels.requires_grad()}));
  if (out.requires_grad()) {
    tape->record([pixels, out, in_h, in_w, gh, gw, bh, bw, inv, k]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto gp = pixels.grad_mut();
      for (std::size_t y = 0; y < in_h; ++y) {
        const std::size_t cy = y / bh;
        for (std::size_t x = 0; x < in_w; ++x) {
          const std::size_t cell = cy * gw + x / bw;
          const T* grow = go.data() + cell * k;
          T* drow = gp.data() + (y * in_w + x) * k;
          for (std::size_t j = 0; j < k; ++j) drow[j] += inv * grow[j];
        }
      }
    });
  }
  return out;
}

/// Per-row argmax with ties broken toward the lowest index.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& x) {
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<int> idx(m, 0);
  auto xv = x.values();
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = xv.data() + i * n;
    std::size_t best = 0;
    for (std::size_t j = 1; j < n; ++j) {
      if (row[j] > row[best]) best = j;
    }
    idx[i] = static_cast<int>(best);
  }
  return idx;
}

/// Per-column argmax with ties broken toward the lowest index.
template <typename T>
std::vector<int> argmax_cols(const Tensor<T>& x) {
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<int> idx(n, 0);
  auto xv = x.values();
  for (std::size_t j = 0; j < n; ++j) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < m; ++i) {
      if (xv[i * n + j] > xv[best * n + j]) best = i;
    }
    idx[j] = static_cast<int>(best);
  }
  return idx;
}

}  // namespace allspark
