#pragma once

#include <cstdint>
#include <vector>

#include "baseq/autodiff.hpp"
#include "baseq/tensor.hpp"

namespace baseq {

/// Normalized Sylvester–Hadamard transform of every row (last axis), O(n log n).
/// Throws ValidationError("dimension must be 2^k") otherwise.
Tensor fwht(const Tensor& x);
void fwht_inplace(std::span<double> row);
/// Dense normalized Sylvester–Hadamard matrix, entries ±n^{-1/2}.
Tensor hadamard_matrix(std::size_t n);

/// Orthogonal transform acting on the last axis: each row v ↦ Q v.
class Rotation;
Rotation compose_rres(const Tensor& basis);

class Rotation {
 public:
  enum class Kind { HadamardFast, HadamardMatrix, Composed, Cayley, Explicit };

  /// Plain Sylvester Hadamard applied with the fast transform.
  static Rotation hadamard(std::size_t n);
  /// H·D with D a seeded random ±1 diagonal.
  static Rotation random_hadamard(std::size_t n, std::uint64_t seed);
  /// Applies Uᵀ then a Hadamard (optionally with random signs, H·D).
  static Rotation composed(const Tensor& basis, std::vector<double> signs = {});
  /// cayley(A) · base, materialized.
  static Rotation from_cayley(const Tensor& a, const Tensor& base);
  /// Any orthogonal matrix. Orthogonality is checked to 1e-6.
  static Rotation explicit_matrix(const Tensor& q);

  Kind kind() const { return kind_; }
  std::size_t dim() const { return dim_; }
  const std::vector<double>& signs() const { return signs_; }

  Tensor apply(const Tensor& x) const;
  Tensor apply_inverse(const Tensor& x) const;
  /// Dense Q with apply(v) = Q v.
  Tensor materialize() const;

 private:
  friend Rotation compose_rres(const Tensor& basis);

  Kind kind_ = Kind::HadamardFast;
  std::size_t dim_ = 0;
  std::vector<double> signs_;  // empty = all +1
  Tensor basis_;               // Composed: U
  Tensor matrix_;              // Cayley / Explicit: Q
};

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
struct SymmetricEigen {
  std::vector<double> values;  ///< descending
  Tensor vectors;              ///< column k pairs with values[k]
  int sweeps = 0;
};

/// Stops when off(C) < 1e-12·‖C‖_F; throws NumericalError after 100 sweeps.
SymmetricEigen jacobi_eigen(const Tensor& c);

/// Σ_k W_kᵀW_k over weights sharing an input dimension.
Tensor weight_covariance(const std::vector<Tensor>& weights);
/// Eigenvector basis of weight_covariance(weights), eigenvalues descending.
Tensor pca_basis(const std::vector<Tensor>& weights);

/// Residual rotation applying Uᵀ then H. Rejects non-orthogonal U
/// (‖UᵀU − I‖∞ > 1e-6) and non power-of-two sizes.
Rotation compose_rres(const Tensor& basis);

/// (I − S)⁻¹(I + S)·base, S = (A − Aᵀ)/2.
Tensor cayley(const Tensor& a, const Tensor& base);

/// Largest |QᵀQ − I| entry.
double orthogonality_error(const Tensor& q);

namespace ad {
/// Differentiable Cayley map of an unconstrained square parameter.
Var cayley(Var a, const Tensor& base);
/// Differentiable fast Hadamard transform along rows.
Var hadamard_rows(Var x);
/// Applies a [d × d] rotation to each contiguous head block of width d: v_h ↦ R v_h.
Var rotate_heads(Var x, Var rotation);
}  // namespace ad

/// Non-differentiable counterpart of ad::rotate_heads.
Tensor rotate_heads(const Tensor& x, const Tensor& rotation);

}  // namespace baseq
