#include "baseq/linalg.hpp"

#include <cmath>
#include <utility>

#include "baseq/error.hpp"

namespace baseq {

LuFactors lu_factor(const Tensor& a) {
  const std::size_t n = a.rows();
  if (a.rank() != 2 || a.cols() != n) throw ValidationError("lu_factor: matrix must be square");
  LuFactors f{a, std::vector<std::size_t>(n)};
  Tensor& m = f.lu;
  for (std::size_t i = 0; i < n; ++i) f.perm[i] = i;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t piv = k;
    double best = std::abs(m(k, k));
    for (std::size_t i = k + 1; i < n; ++i) {
      if (std::abs(m(i, k)) > best) {
        best = std::abs(m(i, k));
        piv = i;
      }
    }
    if (!(best > 0.0)) throw NumericalError("lu_factor: singular matrix");
    if (piv != k) {
      for (std::size_t j = 0; j < n; ++j) std::swap(m(k, j), m(piv, j));
      std::swap(f.perm[k], f.perm[piv]);
    }
    const double inv = 1.0 / m(k, k);
    for (std::size_t i = k + 1; i < n; ++i) {
      const double l = m(i, k) * inv;
      m(i, k) = l;
      if (l == 0.0) continue;
      for (std::size_t j = k + 1; j < n; ++j) m(i, j) -= l * m(k, j);
    }
  }
  return f;
}

Tensor lu_solve(const LuFactors& f, const Tensor& b) {
  const std::size_t n = f.perm.size();
  if (b.rows() != n) throw ValidationError("lu_solve: right-hand side has wrong row count");
  const std::size_t m = b.cols();
  Tensor x({n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) x(i, j) = b(f.perm[i], j);
  const Tensor& lu = f.lu;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < i; ++k) {
      const double l = lu(i, k);
      if (l != 0.0)
        for (std::size_t j = 0; j < m; ++j) x(i, j) -= l * x(k, j);
    }
  for (std::size_t ii = n; ii-- > 0;) {
    for (std::size_t k = ii + 1; k < n; ++k) {
      const double u = lu(ii, k);
      if (u != 0.0)
        for (std::size_t j = 0; j < m; ++j) x(ii, j) -= u * x(k, j);
    }
    const double inv = 1.0 / lu(ii, ii);
    for (std::size_t j = 0; j < m; ++j) x(ii, j) *= inv;
  }
  return x;
}

Tensor lu_solve_transposed(const LuFactors& f, const Tensor& b) {
  // Aᵀ = Uᵀ Lᵀ P, so solve Uᵀ y = b, Lᵀ z = y, then x = Pᵀ z.
  const std::size_t n = f.perm.size();
  if (b.rows() != n) throw ValidationError("lu_solve_transposed: right-hand side has wrong row count");
  const std::size_t m = b.cols();
  const Tensor& lu = f.lu;
  Tensor y = b.reshaped({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < i; ++k) {
      const double u = lu(k, i);
      if (u != 0.0)
        for (std::size_t j = 0; j < m; ++j) y(i, j) -= u * y(k, j);
    }
    const double inv = 1.0 / lu(i, i);
    for (std::size_t j = 0; j < m; ++j) y(i, j) *= inv;
  }
  for (std::size_t ii = n; ii-- > 0;) {
    for (std::size_t k = ii + 1; k < n; ++k) {
      const double l = lu(k, ii);
      if (l != 0.0)
        for (std::size_t j = 0; j < m; ++j) y(ii, j) -= l * y(k, j);
    }
  }
  Tensor x({n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) x(f.perm[i], j) = y(i, j);
  return x;
}

Tensor solve(const Tensor& a, const Tensor& b) { return lu_solve(lu_factor(a), b); }

Tensor cholesky(const Tensor& a) {
  const std::size_t n = a.rows();
  if (a.rank() != 2 || a.cols() != n) throw ValidationError("cholesky: matrix must be square");
  Tensor l({n, n});
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0) || !std::isfinite(d)) throw NumericalError("cholesky: matrix is not positive definite");
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return l;
}

Tensor spd_inverse(const Tensor& a) {
  const Tensor l = cholesky(a);
  const std::size_t n = l.rows();
  // Invert L (lower triangular), then A⁻¹ = L⁻ᵀ L⁻¹.
  Tensor linv({n, n});
  for (std::size_t j = 0; j < n; ++j) {
    linv(j, j) = 1.0 / l(j, j);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = 0.0;
      for (std::size_t k = j; k < i; ++k) s -= l(i, k) * linv(k, j);
      linv(i, j) = s / l(i, i);
    }
  }
  Tensor inv({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      double s = 0.0;
      for (std::size_t k = i; k < n; ++k) s += linv(k, i) * linv(k, j);
      inv(i, j) = s;
      inv(j, i) = s;
    }
  return inv;
}

}  // namespace baseq
