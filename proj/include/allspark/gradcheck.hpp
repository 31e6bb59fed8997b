#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "allspark/tensor.hpp"

namespace allspark {

/// Central-difference gradient of a deterministic scalar function. Runs in
/// f64 only; the implementation never touches a tape, so it stays an
/// independent oracle for the reverse-mode engine.
inline Tensor<double> finite_diff_grad(
    const std::function<double(const Tensor<double>&)>& f,
    const Tensor<double>& x, double h = 1e-5) {
  std::vector<double> base(x.values().begin(), x.values().end());
  std::vector<double> g(base.size(), 0.0);
  for (std::size_t i = 0; i < base.size(); ++i) {
    std::vector<double> plus = base, minus = base;
    plus[i] += h;
    minus[i] -= h;
    const double fp = f(Tensor<double>(x.shape(), std::move(plus)));
    const double fm = f(Tensor<double>(x.shape(), std::move(minus)));
    g[i] = (fp - fm) / (2.0 * h);
  }
  return Tensor<double>(x.shape(), std::move(g));
}

/// Element-wise relative error with an absolute floor so that true-zero
/// gradients compare cleanly against finite-difference noise.
inline double max_relative_error(std::span<const double> a,
                                 std::span<const double> b,
                                 double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

/// Compares the tape gradient of `build` (a scalar-producing forward pass
/// that may consume `x` through any chain of ops) against central
/// differences of the same forward evaluated without a tape.
inline GradCheckResult check_gradient(
    const std::string& name,
    const std::function<Tensor<double>(Tape<double>*, const Tensor<double>&)>&
        build,
    const Tensor<double>& x0, double tolerance = 1e-4, double h = 1e-5) {
  Tensor<double> x = x0.clone(true);
  Tape<double> tape;
  Tensor<double> loss = build(&tape, x);
  tape.backward(loss);
  Tensor<double> fd = finite_diff_grad(
      [&build](const Tensor<double>& probe) {
        Tensor<double> arg = probe.clone(false);
        return build(nullptr, arg).item();
      },
      x0, h);
  GradCheckResult r;
  r.name = name;
  r.tolerance = tolerance;
  if (!x.has_grad()) {
    // Analytic gradient absent: only acceptable when FD agrees it is zero.
    double mag = 0.0;
    for (double v : fd.values()) mag = std::max(mag, std::abs(v));
    r.max_rel_error = mag;
  } else {
    r.max_rel_error = max_relative_error(x.grad(), fd.values());
  }
  r.passed = r.max_rel_error < tolerance;
  return r;
}

}  // namespace allspark
