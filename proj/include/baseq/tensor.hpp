#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace baseq {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of doubles.
///
/// Most operations view a tensor as a matrix whose columns are the last axis
/// and whose rows are everything before it; a rank-1 tensor is a single row.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  /// Same as the (shape, data) constructor but additionally rejects NaN/Inf.
  /// Used for anything read from outside the process.
  static Tensor from_external(Shape shape, std::vector<double> data);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor vector(std::vector<double> values);
  static Tensor scalar(double v) { return Tensor({1, 1}, {v}); }
  static Tensor identity(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

  Tensor reshaped(Shape shape) const;
  /// Reshape that steals the storage.
  Tensor reshaped_to(Shape shape) &&;
  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Dense helpers on the matrix view. All of them validate shapes and throw
// ValidationError on mismatch.
Tensor matmul(const Tensor& a, const Tensor& b);
/// a · bᵀ, the natural form for `x Wᵀ` with W stored [out × in].
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double k);
/// Adds a length-cols vector to every row.
Tensor add_row(const Tensor& a, const Tensor& v);
/// Multiplies column j of every row by v[j].
Tensor mul_cols(const Tensor& a, const Tensor& v);
/// Divides column j of every row by v[j].
Tensor div_cols(const Tensor& a, const Tensor& v);
/// Matrix-vector product W v for W [out × in].
Tensor matvec(const Tensor& w, const Tensor& v);

double max_abs_diff(const Tensor& a, const Tensor& b);
double frobenius_norm(const Tensor& a);
double mean_squared(const Tensor& a);
double mse(const Tensor& a, const Tensor& b);
/// ‖a − b‖_F / max(‖b‖_F, tiny).
double relative_error(const Tensor& a, const Tensor& b);

bool is_power_of_two(std::size_t n);

}  // namespace baseq
