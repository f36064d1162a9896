#pragma once

#include <cstddef>
#include <vector>

#include "baseq/tensor.hpp"

namespace baseq {

/// LU factorization with partial pivoting of a square matrix, PA = LU.
struct LuFactors {
  Tensor lu;                       ///< L below the diagonal (unit), U on and above
  std::vector<std::size_t> perm;   ///< row permutation
};

/// Throws NumericalError when a pivot vanishes.
LuFactors lu_factor(const Tensor& a);
/// Solves A X = B for X given A's factors; B may have several columns.
Tensor lu_solve(const LuFactors& f, const Tensor& b);
/// Solves Aᵀ X = B.
Tensor lu_solve_transposed(const LuFactors& f, const Tensor& b);
Tensor solve(const Tensor& a, const Tensor& b);

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
/// Throws NumericalError when the matrix is not positive definite.
Tensor cholesky(const Tensor& a);
/// Inverse of an SPD matrix via its Cholesky factor.
Tensor spd_inverse(const Tensor& a);

}  // namespace baseq
