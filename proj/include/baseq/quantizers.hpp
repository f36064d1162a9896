#pragma once

#include <cstddef>
#include <string>

#include "baseq/autodiff.hpp"
#include "baseq/tensor.hpp"

namespace baseq {

enum class Scheme { Symmetric, Asymmetric };
enum class Granularity { PerTensor, PerChannel, PerToken, PerHead };

std::string to_string(Scheme s);
std::string to_string(Granularity g);

/// Quantizer configuration. bits >= 16 means "disabled" (identity).
struct QuantSpec {
  int bits = 4;
  Scheme scheme = Scheme::Asymmetric;
  Granularity granularity = Granularity::PerToken;
  double clip = 1.0;          ///< α ∈ (0, 1], multiplies the observed range
  std::size_t head_dim = 0;   ///< group width for PerHead

  static constexpr int kPassthroughBits = 16;

  bool enabled() const { return bits < kPassthroughBits; }
  /// Largest integer code, 2^b − 1.
  double max_code() const { return double((1 << bits) - 1); }
  /// Throws ValidationError for bits outside {2..8} (or passthrough) and α ∉ (0, 1].
  void validate() const;

  static QuantSpec passthrough();
  static QuantSpec weight(int bits);              ///< per-channel symmetric
  static QuantSpec activation(int bits);          ///< per-token asymmetric
  static QuantSpec kv_cache(int bits, std::size_t head_dim);  ///< per-head asymmetric
};

/// Resolved per-group step sizes and lower bounds. Groups are the rows of
/// the grouped view of the tensor (see group_shape()).
struct QuantParams {
  Tensor scale;  ///< s > 0
  Tensor zero;   ///< z: lower bound (asymmetric) or −s·2^{b−1} (symmetric)
};

/// [groups × group_size] view used for a given granularity. Per-channel and
/// per-token both group the rows of the matrix view (weights are [out × in],
/// activations are [tokens × channels]); per-head splits every row into
/// contiguous head_dim blocks.
Shape group_shape(const Tensor& x, const QuantSpec& spec);

/// Degenerate (all-equal) groups get s = 1e-12 and z = min so they reproduce
/// exactly. Throws ValidationError("empty group") for empty input.
QuantParams resolve_params(const Tensor& x, const QuantSpec& spec);
Tensor fake_quantize(const Tensor& x, const QuantParams& params, const QuantSpec& spec);
/// Dynamic quantization: resolve on x itself, then fake-quantize.
Tensor fake_quantize(const Tensor& x, const QuantSpec& spec);

namespace ad {
/// Differentiable dynamic fake quantization. `clip` is a [1 × 1] node holding
/// α; gradients reach x (straight-through) and α.
Var fake_quantize(Var x, Var clip, const QuantSpec& spec);
}  // namespace ad

/// Mean squared error of the symmetric clip-θ quantizer (levels span
/// [center − θ, center + θ], step 2θ/(2^b − 1)).
double clip_mse(const Tensor& samples, double center, double theta, int bits);

/// Grid search for the MSE-optimal clip threshold over
/// θ ∈ [0.5σ̂, 4σ̂] in 128 steps (inclusive), centered at the sample mean.
/// Requires >= 1000 samples and nonzero variance.
double search_clip(const Tensor& samples, int bits);
/// Same objective over an arbitrary inclusive grid; exposed for oracles.
double search_clip_grid(const Tensor& samples, int bits, double lo, double hi, int steps);

/// α ∈ [0.5, 1] (51 steps) minimizing the dynamic fake-quantization MSE of x.
double search_clip_factor(const Tensor& x, QuantSpec spec);

/// XᵀX.
Tensor gptq_hessian(const Tensor& x_calib);
/// tr((W − Ŵ) H (W − Ŵ)ᵀ).
double gptq_proxy_loss(const Tensor& w, const Tensor& w_hat, const Tensor& hessian);
/// Round-to-nearest weight quantization (per-channel symmetric).
Tensor rtn_quantize(const Tensor& w, const QuantSpec& spec);
/// Greedy column-by-column rounding with inverse-Hessian error feedback.
/// `damp` is relative to the mean Hessian diagonal. Columns are visited in
/// natural order. Throws NumericalError("ill-conditioned Hessian").
Tensor gptq_quantize(const Tensor& w, const Tensor& x_calib, const QuantSpec& spec, double damp = 0.01);

}  // namespace baseq
