#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ngvi/errors.hpp"
#include "ngvi/tensor.hpp"

// Small dense symmetric-matrix helpers for the Kronecker-factored pieces.
// Matrices at desk scale are tiny (layer fan-in/fan-out), so plain loops and
// Jacobi sweeps are the simplest correct tools.

namespace ngvi::linalg {

inline void check_square(const Tensor& a, const char* what) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
    throw std::invalid_argument(std::string(what) + ": square matrix required, got " +
                                a.shape_string());
  }
}

inline Tensor identity(std::int64_t n) {
  Tensor out({n, n});
  for (std::int64_t i = 0; i < n; ++i) out[i * n + i] = 1.0;
  return out;
}

inline double trace(const Tensor& a) {
  check_square(a, "trace");
  double t = 0.0;
  for (std::int64_t i = 0; i < a.dim(0); ++i) t += a[i * a.dim(0) + i];
  return t;
}

// Cholesky factor L (lower) with A = L L^T. Throws NumericError when A is not
// positive definite.
inline Tensor cholesky(const Tensor& a) {
  check_square(a, "cholesky");
  const std::int64_t n = a.dim(0);
  Tensor l({n, n});
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j <= i; ++j) {
      double s = a[i * n + j];
      for (std::int64_t k = 0; k < j; ++k) s -= l[i * n + k] * l[j * n + k];
      if (i == j) {
        if (s <= 0.0 || !std::isfinite(s)) {
          throw NumericError("cholesky: matrix not positive definite (pivot " +
                             std::to_string(i) + ")");
        }
        l[i * n + i] = std::sqrt(s);
      } else {
        l[i * n + j] = s / l[j * n + j];
      }
    }
  }
  return l;
}

inline bool is_spd(const Tensor& a) {
  try {
    cholesky(a);
    return true;
  } catch (const NumericError&) {
    return false;
  }
}

// Solve A x = b for SPD A given its Cholesky factor.
inline std::vector<double> chol_solve(const Tensor& l, std::span<const double> b) {
  const std::int64_t n = l.dim(0);
  std::vector<double> y(b.begin(), b.end());
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t k = 0; k < i; ++k) y[i] -= l[i * n + k] * y[k];
    y[i] /= l[i * n + i];
  }
  for (std::int64_t i = n - 1; i >= 0; --i) {
    for (std::int64_t k = i + 1; k < n; ++k) y[i] -= l[k * n + i] * y[k];
    y[i] /= l[i * n + i];
  }
  return y;
}

inline Tensor spd_inverse(const Tensor& a) {
  check_square(a, "spd_inverse");
  const std::int64_t n = a.dim(0);
  const Tensor l = cholesky(a);
  Tensor inv({n, n});
  std::vector<double> e(n, 0.0);
  for (std::int64_t j = 0; j < n; ++j) {
    e[static_cast<std::size_t>(j)] = 1.0;
    const auto col = chol_solve(l, e);
    for (std::int64_t i = 0; i < n; ++i) inv[i * n + j] = col[static_cast<std::size_t>(i)];
    e[static_cast<std::size_t>(j)] = 0.0;
  }
  return inv;
}

// Cyclic Jacobi eigendecomposition for symmetric matrices.
// Returns (eigenvalues ascending, eigenvectors as columns).
inline std::pair<Tensor, Tensor> sym_eig(const Tensor& a_in) {
  check_square(a_in, "sym_eig");
  const std::int64_t n = a_in.dim(0);
  Tensor a = a_in;
  Tensor v = identity(n);
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = i + 1; j < n; ++j) off += a[i * n + j] * a[i * n + j];
    if (off < 1e-30) break;
    for (std::int64_t p = 0; p < n - 1; ++p) {
      for (std::int64_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (apq == 0.0) continue;
        const double app = a[p * n + p], aqq = a[q * n + q];
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::int64_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::int64_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
        for (std::int64_t k = 0; k < n; ++k) {
          const double vkp = v[k * n + p], vkq = v[k * n + q];
          v[k * n + p] = c * vkp - s * vkq;
          v[k * n + q] = s * vkp + c * vkq;
        }
      }
    }
  }
  // sort ascending by eigenvalue, permuting columns alongside
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::sort(order.begin(), order.end(),
            [&](std::int64_t x, std::int64_t y) { return a[x * n + x] < a[y * n + y]; });
  Tensor vals({n});
  Tensor vecs({n, n});
  for (std::int64_t j = 0; j < n; ++j) {
    const std::int64_t src = order[static_cast<std::size_t>(j)];
    vals[j] = a[src * n + src];
    for (std::int64_t i = 0; i < n; ++i) vecs[i * n + j] = v[i * n + src];
  }
  return {vals, vecs};
}

inline double min_eigenvalue(const Tensor& a) { return sym_eig(a).first[0]; }

// Symmetric PSD square root via eigendecomposition. Slightly negative
// eigenvalues from roundoff are clamped to zero; anything materially negative
// is an error.
inline Tensor sym_sqrt(const Tensor& a) {
  auto [vals, vecs] = sym_eig(a);
  const std::int64_t n = a.dim(0);
  const double floor = -1e-10 * std::max(1.0, std::abs(vals[n - 1]));
  Tensor scaled = vecs;
  for (std::int64_t j = 0; j < n; ++j) {
    if (vals[j] < floor) throw NumericError("sym_sqrt: matrix has negative eigenvalue");
    const double r = std::sqrt(std::max(0.0, vals[j]));
    for (std::int64_t i = 0; i < n; ++i) scaled[i * n + j] *= r;
  }
  return matmul(scaled, transpose(vecs));
}

}  // namespace ngvi::linalg
