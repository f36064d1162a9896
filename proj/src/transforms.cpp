#include "baseq/transforms.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>

#include "baseq/error.hpp"
#include "baseq/linalg.hpp"
#include "baseq/rng.hpp"

namespace baseq {

namespace {

void require_pow2(std::size_t n) {
  if (!is_power_of_two(n)) throw ValidationError("dimension must be 2^k (got " + std::to_string(n) + ")");
}

Tensor mul_signs(const Tensor& x, const std::vector<double>& signs) {
  if (signs.empty()) return x;
  return mul_cols(x, Tensor::vector(signs));
}

}  // namespace

void fwht_inplace(std::span<double> row) {
  const std::size_t n = row.size();
  require_pow2(n);
  for (std::size_t len = 1; len < n; len <<= 1) {
    for (std::size_t i = 0; i < n; i += len << 1) {
      for (std::size_t j = i; j < i + len; ++j) {
        const double a = row[j];
        const double b = row[j + len];
        row[j] = a + b;
        row[j + len] = a - b;
      }
    }
  }
  const double norm = 1.0 / std::sqrt(double(n));
  for (double& v : row) v *= norm;
}

Tensor fwht(const Tensor& x) {
  require_pow2(x.cols());
  Tensor out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) fwht_inplace(out.row(r));
  return out;
}

Tensor hadamard_matrix(std::size_t n) {
  require_pow2(n);
  Tensor h({n, n});
  const double v = 1.0 / std::sqrt(double(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) h(i, j) = (std::popcount(i & j) & 1) ? -v : v;
  return h;
}

double orthogonality_error(const Tensor& q) {
  const Tensor qtq = matmul(transpose(q), q);
  double e = 0.0;
  for (std::size_t i = 0; i < qtq.rows(); ++i)
    for (std::size_t j = 0; j < qtq.cols(); ++j) e = std::max(e, std::abs(qtq(i, j) - (i == j ? 1.0 : 0.0)));
  return e;
}

// ---------------------------------------------------------------------------
// Rotation

Rotation Rotation::hadamard(std::size_t n) {
  require_pow2(n);
  Rotation r;
  r.kind_ = Kind::HadamardFast;
  r.dim_ = n;
  return r;
}

Rotation Rotation::random_hadamard(std::size_t n, std::uint64_t seed) {
  require_pow2(n);
  Rotation r;
  r.kind_ = Kind::HadamardMatrix;
  r.dim_ = n;
  Rng rng(seed);
  r.signs_.resize(n);
  for (double& s : r.signs_) s = rng.sign();
  return r;
}

Rotation Rotation::composed(const Tensor& basis, std::vector<double> signs) {
  Rotation r = compose_rres(basis);
  if (!signs.empty() && signs.size() != r.dim_) throw ValidationError("composed rotation: sign vector size");
  r.signs_ = std::move(signs);
  return r;
}

Rotation Rotation::from_cayley(const Tensor& a, const Tensor& base) {
  Rotation r;
  r.kind_ = Kind::Cayley;
  r.matrix_ = cayley(a, base);
  r.dim_ = r.matrix_.rows();
  return r;
}

Rotation Rotation::explicit_matrix(const Tensor& q) {
  if (q.rank() != 2 || q.rows() != q.cols()) throw ValidationError("rotation matrix must be square");
  if (orthogonality_error(q) > 1e-6) throw ValidationError("rotation matrix is not orthogonal");
  Rotation r;
  r.kind_ = Kind::Explicit;
  r.matrix_ = q;
  r.dim_ = q.rows();
  return r;
}

Tensor Rotation::apply(const Tensor& x) const {
  if (x.cols() != dim_) throw ValidationError("rotation: dimension mismatch");
  switch (kind_) {
    case Kind::HadamardFast:
    case Kind::HadamardMatrix: return fwht(mul_signs(x, signs_));
    case Kind::Composed: return fwht(mul_signs(matmul(x, basis_), signs_));
    case Kind::Cayley:
    case Kind::Explicit: return matmul_nt(x, matrix_);
  }
  return x;
}

Tensor Rotation::apply_inverse(const Tensor& x) const {
  if (x.cols() != dim_) throw ValidationError("rotation: dimension mismatch");
  switch (kind_) {
    case Kind::HadamardFast:
    case Kind::HadamardMatrix: return mul_signs(fwht(x), signs_);
    case Kind::Composed: return matmul_nt(mul_signs(fwht(x), signs_), basis_);
    case Kind::Cayley:
    case Kind::Explicit: return matmul(x, matrix_);
  }
  return x;
}

Tensor Rotation::materialize() const {
  // Row i of apply(I) is Q e_i = column i of Q.
  return transpose(apply(Tensor::identity(dim_)));
}

// ---------------------------------------------------------------------------
// Jacobi eigensolver

SymmetricEigen jacobi_eigen(const Tensor& c) {
  const std::size_t n = c.rows();
  if (c.rank() != 2 || c.cols() != n || n == 0) throw ValidationError("jacobi_eigen: matrix must be square");
  Tensor a = c;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double s = 0.5 * (a(i, j) + a(j, i));
      a(i, j) = a(j, i) = s;
    }
  Tensor v = Tensor::identity(n);
  const double fro = frobenius_norm(a);
  auto off = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) s += a(i, j) * a(i, j);
    return std::sqrt(s);
  };

  SymmetricEigen out;
  constexpr int kMaxSweeps = 100;
  while (off() >= 1e-12 * fro && fro > 0.0) {
    if (out.sweeps == kMaxSweeps) throw NumericalError("jacobi_eigen: no convergence after 100 sweeps");
    ++out.sweeps;
    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double cs = 1.0 / std::sqrt(t * t + 1.0);
        const double sn = t * cs;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = cs * akp - sn * akq;
          a(k, q) = sn * akp + cs * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = cs * apk - sn * aqk;
          a(q, k) = sn * apk + cs * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = cs * vkp - sn * vkq;
          v(k, q) = sn * vkp + cs * vkq;
        }
      }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });
  out.values.resize(n);
  out.vectors = Tensor({n, n});
  for (std::size_t k = 0; k < n; ++k) {
    out.values[k] = a(order[k], order[k]);
    for (std::size_t i = 0; i < n; ++i) out.vectors(i, k) = v(i, order[k]);
  }
  return out;
}

Tensor weight_covariance(const std::vector<Tensor>& weights) {
  if (weights.empty()) throw ValidationError("pca_basis: no weights supplied");
  const std::size_t n = weights.front().cols();
  Tensor c({n, n}, 0.0);
  for (const Tensor& w : weights) {
    if (w.cols() != n) throw ValidationError("pca_basis: weights disagree on input dimension");
    c = add(c, matmul(transpose(w), w));
  }
  return c;
}

Tensor pca_basis(const std::vector<Tensor>& weights) { return jacobi_eigen(weight_covariance(weights)).vectors; }

Rotation compose_rres(const Tensor& basis) {
  if (basis.rank() != 2 || basis.rows() != basis.cols()) throw ValidationError("compose_rres: basis must be square");
  require_pow2(basis.rows());
  if (orthogonality_error(basis) > 1e-6) throw ValidationError("compose_rres: basis is not orthogonal");
  Rotation r;
  r.kind_ = Rotation::Kind::Composed;
  r.dim_ = basis.rows();
  r.basis_ = basis;
  return r;
}

Tensor cayley(const Tensor& a, const Tensor& base) {
  const std::size_t n = a.rows();
  if (a.rank() != 2 || a.cols() != n) throw ValidationError("cayley: parameter must be square");
  if (base.rows() != n || base.cols() != n) throw ValidationError("cayley: base size mismatch");
  if (!a.all_finite()) throw ValidationError("cayley: non-finite parameter");
  Tensor lhs = Tensor::identity(n);
  Tensor rhs = Tensor::identity(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double s = 0.5 * (a(i, j) - a(j, i));
      lhs(i, j) -= s;
      rhs(i, j) += s;
    }
  return matmul(solve(lhs, rhs), base);
}

Tensor rotate_heads(const Tensor& x, const Tensor& rotation) {
  const std::size_t d = rotation.rows();
  if (d == 0 || x.cols() % d != 0) throw ValidationError("rotate_heads: width not divisible by head size");
  const Shape shape = x.shape();
  return matmul_nt(x.reshaped({x.size() / d, d}), rotation).reshaped(shape);
}

namespace ad {

Var cayley(Var a, const Tensor& base) {
  const std::size_t n = a.value().rows();
  if (a.value().rank() != 2 || a.value().cols() != n) throw ValidationError("cayley: parameter must be square");
  Graph& g = a.graph();
  Var eye = g.constant(Tensor::identity(n));
  Var skew = scale(sub(a, transpose(a)), 0.5);
  return matmul(solve(sub(eye, skew), add(eye, skew)), g.constant(base));
}

Var hadamard_rows(Var x) {
  return x.graph().record(fwht(x.value()), {x},
                          [x](Graph& g, const Tensor&, const Tensor& grad) { g.accumulate(x, fwht(grad)); });
}

Var rotate_heads(Var x, Var rotation) {
  const std::size_t d = rotation.value().rows();
  if (d == 0 || x.value().cols() % d != 0) throw ValidationError("rotate_heads: width not divisible by head size");
  const Shape shape = x.shape();
  return reshape(matmul_nt(reshape(x, {x.value().size() / d, d}), rotation), shape);
}

}  // namespace ad

}  // namespace baseq
