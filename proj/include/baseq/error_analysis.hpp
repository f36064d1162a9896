#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "baseq/tensor.hpp"

namespace baseq {

/// Σ x²·1{x < lo or x > hi} / Σ x². Throws ValidationError("zero energy")
/// for all-zero samples and for lo >= hi.
double clipping_energy(const Tensor& samples, double lo, double hi);

double normal_pdf(double x);
double normal_cdf(double x);
/// Fraction of a standard normal's second moment outside ±t:
/// 2·(t·φ(t) + 1 − Φ(t)). Requires t > 0.
double gaussian_clip_energy(double t);

struct VarianceSplit {
  double mean_channel_var = 0.0;
  double var_of_means = 0.0;
  double total_var = 0.0;
  /// var_of_means / total_var, 0 when total_var is 0.
  double fraction = 0.0;
};

/// Needs at least two channels (columns).
VarianceSplit variance_decomposition(const Tensor& x);

struct NoiseVariance {
  double predicted = 0.0;
  double empirical = 0.0;
};

/// Output-noise variance of y = a·wᵀ when w and a carry independent uniform
/// noise of step s_w and s_a. w is [out × n], a is [tokens × n]; vectors are
/// single rows. The prediction is per output element, summed over the n
/// input channels:
///   Σ_j E_o[w_oj²]·s_a²/12 + E_t[a_tj²]·s_w²/12 + s_w²s_a²/144.
double predicted_noise_variance(const Tensor& w, const Tensor& a, double s_w, double s_a);
/// Adds the Monte Carlo estimate over `trials` independent noise draws.
NoiseVariance noise_propagation(const Tensor& w, const Tensor& a, double s_w, double s_a,
                                std::size_t trials = 100000, std::uint64_t seed = 0);

/// Per-channel s with s² = RMS(w_:j)/RMS(a_:j). Applied as w/s and a·s it
/// balances the two first-order noise terms. Throws ValidationError
/// ("degenerate channel") when a channel of a or w is all zero.
Tensor optimal_scale(const Tensor& w, const Tensor& a);

/// One quantizer site to analyze: its input activations and, when it feeds
/// a linear layer, that layer's weight [out × in].
struct SiteInput {
  std::string name;
  Tensor activation;
  Tensor weight;  ///< may be empty
  int bits = 4;
};

struct SiteRecord {
  std::string name;
  std::size_t tokens = 0;
  std::size_t channels = 0;
  double rounding_energy = 0.0;           ///< mean per-element s²/12, per-token asymmetric
  double clipping_energy_fraction = 0.0;  ///< centred samples outside ±2.2σ̂
  double var_of_means_fraction = 0.0;
  double total_var = 0.0;
  double var_of_means = 0.0;
  double mean_channel_var = 0.0;
  double predicted_noise_var = 0.0;  ///< 0 when the site has no weight
  double empirical_noise_var = 0.0;
  std::vector<double> channel_means;
  std::vector<double> channel_vars;

  friend bool operator==(const SiteRecord&, const SiteRecord&) = default;
};

struct ErrorReport {
  std::vector<SiteRecord> sites;

  friend bool operator==(const ErrorReport&, const ErrorReport&) = default;
};

/// Threshold used for the per-site clipping-energy column, in σ̂ units.
inline constexpr double kReportClipSigma = 2.2;

/// Throws ValidationError when `sites` is empty.
ErrorReport emit_report(const std::vector<SiteInput>& sites, std::uint64_t seed = 0);

}  // namespace baseq
