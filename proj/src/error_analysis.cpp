#include "baseq/error_analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "baseq/error.hpp"
#include "baseq/quantizers.hpp"
#include "baseq/rng.hpp"
#include "baseq/stats.hpp"

namespace baseq {

double clipping_energy(const Tensor& samples, double lo, double hi) {
  if (samples.empty()) throw ValidationError("clipping_energy: no samples");
  if (!(lo < hi)) throw ValidationError("clipping_energy: need lo < hi");
  double total = 0.0;
  double outside = 0.0;
  for (double v : samples.data()) {
    const double e = v * v;
    total += e;
    if (v < lo || v > hi) outside += e;
  }
  if (total == 0.0) throw ValidationError("zero energy");
  return outside / total;
}

double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double gaussian_clip_energy(double t) {
  if (!(t > 0.0)) throw ValidationError("gaussian_clip_energy: t must be positive");
  // 1 − Φ(t) through erfc keeps precision in the far tail.
  const double tail = 0.5 * std::erfc(t / std::numbers::sqrt2);
  return 2.0 * (t * normal_pdf(t) + tail);
}

VarianceSplit variance_decomposition(const Tensor& x) {
  if (x.empty() || x.rows() == 0) throw ValidationError("empty input");
  if (x.cols() < 2) throw ValidationError("variance_decomposition: need at least two channels");
  const ChannelStats st = channel_stats(x);
  VarianceSplit out;
  out.mean_channel_var = st.mean_channel_var();
  out.var_of_means = st.var_of_means;
  out.total_var = st.total_var;
  out.fraction = st.total_var > 0.0 ? std::clamp(st.var_of_means / st.total_var, 0.0, 1.0) : 0.0;
  return out;
}

namespace {

struct Conformed {
  Tensor w;  // [out × n]
  Tensor a;  // [tokens × n]
};

Conformed conform(const Tensor& w, const Tensor& a) {
  if (w.empty() || a.empty()) throw ValidationError("noise_propagation: empty operand");
  if (w.cols() != a.cols())
    throw ValidationError("noise_propagation: inner dimensions differ (" + shape_str(w.shape()) + " vs " +
                          shape_str(a.shape()) + ")");
  return {w.reshaped({w.rows(), w.cols()}), a.reshaped({a.rows(), a.cols()})};
}

std::vector<double> column_mean_square(const Tensor& m) {
  std::vector<double> out(m.cols(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) out[c] += m(r, c) * m(r, c);
  for (double& v : out) v /= double(m.rows());
  return out;
}

}  // namespace

double predicted_noise_variance(const Tensor& w, const Tensor& a, double s_w, double s_a) {
  const Conformed c = conform(w, a);
  if (s_w < 0.0 || s_a < 0.0) throw ValidationError("noise_propagation: negative step");
  const auto ew = column_mean_square(c.w);
  const auto ea = column_mean_square(c.a);
  const double vw = s_w * s_w / 12.0;
  const double va = s_a * s_a / 12.0;
  double total = 0.0;
  for (std::size_t j = 0; j < ew.size(); ++j) total += ew[j] * va + ea[j] * vw + vw * va;
  return total;
}

NoiseVariance noise_propagation(const Tensor& w, const Tensor& a, double s_w, double s_a, std::size_t trials,
                                std::uint64_t seed) {
  const Conformed c = conform(w, a);
  NoiseVariance out;
  out.predicted = predicted_noise_variance(c.w, c.a, s_w, s_a);
  if (trials < 2) throw ValidationError("noise_propagation: need at least two trials");
  if (s_w == 0.0 && s_a == 0.0) return out;

  Rng rng(seed);
  const std::size_t outs = c.w.rows();
  const std::size_t toks = c.a.rows();
  // Running mean/variance of every output element's error, pooled.
  double sum = 0.0;
  double sum_sq = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    const Tensor ew = s_w > 0.0 ? rng.uniform_tensor(c.w.shape(), -s_w / 2, s_w / 2) : Tensor(c.w.shape());
    const Tensor ea = s_a > 0.0 ? rng.uniform_tensor(c.a.shape(), -s_a / 2, s_a / 2) : Tensor(c.a.shape());
    // (a + e_a)(w + e_w)ᵀ − a wᵀ
    const Tensor err = add(matmul_nt(add(c.a, ea), ew), matmul_nt(ea, c.w));
    for (double v : err.data()) {
      sum += v;
      sum_sq += v * v;
    }
  }
  const double n = double(trials * outs * toks);
  const double mean = sum / n;
  out.empirical = sum_sq / n - mean * mean;
  return out;
}

Tensor optimal_scale(const Tensor& w, const Tensor& a) {
  const Conformed c = conform(w, a);
  const auto ew = column_mean_square(c.w);
  const auto ea = column_mean_square(c.a);
  Tensor s({ew.size()});
  for (std::size_t j = 0; j < ew.size(); ++j) {
    if (ew[j] == 0.0 || ea[j] == 0.0) throw ValidationError("degenerate channel");
    s[j] = std::sqrt(std::sqrt(ew[j]) / std::sqrt(ea[j]));
  }
  return s;
}

namespace {

double mean_rounding_energy(const Tensor& x, int bits) {
  const QuantSpec spec = QuantSpec::activation(bits);
  if (!spec.enabled()) return 0.0;
  double acc = 0.0;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto row = x.row(r);
    const auto [mn, mx] = std::minmax_element(row.begin(), row.end());
    if (!(*mx > *mn)) continue;  // degenerate group reproduces exactly
    const double s = (*mx - *mn) / spec.max_code();
    acc += s * s / 12.0;
  }
  return acc / double(x.rows());
}

double centred_clip_fraction(const Tensor& x) {
  const double mu = mean_of(x);
  const double sd = std::sqrt(variance_of(x));
  if (!(sd > 0.0)) return 0.0;
  Tensor centred = x;
  for (double& v : centred.data()) v -= mu;
  return clipping_energy(centred, -kReportClipSigma * sd, kReportClipSigma * sd);
}

Tensor leading_rows(const Tensor& m, std::size_t k) {
  const std::size_t n = std::min(k, m.rows());
  Tensor out({n, m.cols()});
  std::copy_n(m.storage().begin(), n * m.cols(), out.storage().begin());
  return out;
}

}  // namespace

ErrorReport emit_report(const std::vector<SiteInput>& sites, std::uint64_t seed) {
  if (sites.empty()) throw ValidationError("emit_report: no sites");
  constexpr std::size_t kNoiseRows = 32;
  constexpr std::size_t kNoiseTrials = 200;
  ErrorReport report;
  std::uint64_t salt = 0;
  for (const SiteInput& in : sites) {
    const Tensor x = in.activation.reshaped({in.activation.rows(), in.activation.cols()});
    if (x.empty()) throw ValidationError("emit_report: site '" + in.name + "' has no activations");
    SiteRecord rec;
    rec.name = in.name;
    rec.tokens = x.rows();
    rec.channels = x.cols();
    const ChannelStats st = channel_stats(x);
    rec.channel_means = st.means;
    rec.channel_vars = st.vars;
    rec.total_var = st.total_var;
    rec.var_of_means = st.var_of_means;
    rec.mean_channel_var = st.mean_channel_var();
    rec.var_of_means_fraction = st.total_var > 0.0 ? std::clamp(st.var_of_means / st.total_var, 0.0, 1.0) : 0.0;
    rec.rounding_energy = mean_rounding_energy(x, in.bits);
    rec.clipping_energy_fraction = centred_clip_fraction(x);
    if (!in.weight.empty() && QuantSpec::activation(in.bits).enabled()) {
      const Tensor ws = leading_rows(in.weight, kNoiseRows);
      const Tensor as = leading_rows(x, kNoiseRows);
      const QuantParams pw = resolve_params(ws, QuantSpec::weight(in.bits));
      double s_w = 0.0;
      for (double v : pw.scale.data()) s_w += v;
      s_w /= double(pw.scale.size());
      const double s_a = std::sqrt(12.0 * mean_rounding_energy(as, in.bits));
      const NoiseVariance nv = noise_propagation(ws, as, s_w, s_a, kNoiseTrials, mix_seed(seed, ++salt));
      rec.predicted_noise_var = nv.predicted;
      rec.empirical_noise_var = nv.empirical;
    }
    report.sites.push_back(std::move(rec));
  }
  return report;
}

}  // namespace baseq
