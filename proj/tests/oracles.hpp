#pragma once

// Independent reference implementations used only by the tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "convshard/rng.hpp"
#include "convshard/tensor.hpp"

namespace oracle {

using convshard::KernelBank;
using convshard::Tensor4;

inline Tensor4 random_tensor(convshard::Rng& rng, std::size_t n, std::size_t c, std::size_t h,
                             std::size_t w, double lo = -1.0, double hi = 1.0) {
  Tensor4 t(n, c, h, w);
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

inline KernelBank random_kernels(convshard::Rng& rng, std::size_t j, std::size_t c, std::size_t kh,
                                 std::size_t kw) {
  KernelBank k(j, c, kh, kw);
  for (auto& v : k.values()) v = rng.uniform(-1.0, 1.0);
  return k;
}

inline Tensor4 naive_conv(const Tensor4& in, const KernelBank& k) {
  Tensor4 out(in.n(), k.out_maps(), in.h() - k.kernel_h() + 1, in.w() - k.kernel_w() + 1);
  for (std::size_t n = 0; n < in.n(); ++n)
    for (std::size_t j = 0; j < k.out_maps(); ++j)
      for (std::size_t y = 0; y < out.h(); ++y)
        for (std::size_t x = 0; x < out.w(); ++x) {
          double s = 0.0;
          for (std::size_t c = 0; c < in.c(); ++c)
            for (std::size_t ky = 0; ky < k.kernel_h(); ++ky)
              for (std::size_t kx = 0; kx < k.kernel_w(); ++kx)
                s += in(n, c, y + ky, x + kx) * k(j, c, ky, kx);
          out(n, j, y, x) = s;
        }
  return out;
}

inline double rel_error(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-4});
}

/// Central difference of f with respect to every entry of x; returns the
/// largest relative error against the analytic gradient.
inline double max_fd_error(std::span<double> x, std::span<const double> analytic,
                           const std::function<double()>& f, double eps = 1e-5) {
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + eps;
    const double up = f();
    x[i] = keep - eps;
    const double down = f();
    x[i] = keep;
    worst = std::max(worst, rel_error(analytic[i], (up - down) / (2.0 * eps)));
  }
  return worst;
}

/// Sum of elementwise products, the scalar loss used for layer checks.
inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// Hands out numK units one at a time to the device furthest below its
/// quota (lowest index on ties). Equivalent to largest remainder.
inline std::vector<std::size_t> largest_remainder(std::size_t numK, std::span<const double> w) {
  std::vector<std::size_t> c(w.size(), 0);
  for (std::size_t unit = 0; unit < numK; ++unit) {
    std::size_t best = 0;
    double bestDeficit = -1e300;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double deficit = w[i] * static_cast<double>(numK) - static_cast<double>(c[i]);
      if (deficit > bestDeficit) best = i, bestDeficit = deficit;
    }
    ++c[best];
  }
  return c;
}

}  // namespace oracle
