#include "baseq/quantizers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "baseq/error.hpp"
#include "baseq/linalg.hpp"
#include "baseq/stats.hpp"

namespace baseq {

namespace {
constexpr double kScaleFloor = 1e-12;
}

std::string to_string(Scheme s) { return s == Scheme::Symmetric ? "symmetric" : "asymmetric"; }

std::string to_string(Granularity g) {
  switch (g) {
    case Granularity::PerTensor: return "per-tensor";
    case Granularity::PerChannel: return "per-channel";
    case Granularity::PerToken: return "per-token";
    case Granularity::PerHead: return "per-head";
  }
  return "?";
}

void QuantSpec::validate() const {
  if (enabled() && (bits < 2 || bits > 8))
    throw ValidationError("bits must be in 2..8 or >= 16 for passthrough (got " + std::to_string(bits) + ")");
  if (!(clip > 0.0 && clip <= 1.0)) throw ValidationError("clip factor must lie in (0, 1]");
  if (granularity == Granularity::PerHead && head_dim == 0) throw ValidationError("per-head quantizer needs head_dim");
}

QuantSpec QuantSpec::passthrough() { return QuantSpec{kPassthroughBits, Scheme::Asymmetric, Granularity::PerToken}; }

QuantSpec QuantSpec::weight(int bits) { return QuantSpec{bits, Scheme::Symmetric, Granularity::PerChannel}; }

QuantSpec QuantSpec::activation(int bits) { return QuantSpec{bits, Scheme::Asymmetric, Granularity::PerToken}; }

QuantSpec QuantSpec::kv_cache(int bits, std::size_t head_dim) {
  return QuantSpec{bits, Scheme::Asymmetric, Granularity::PerHead, 1.0, head_dim};
}

Shape group_shape(const Tensor& x, const QuantSpec& spec) {
  if (x.empty()) throw ValidationError("empty group");
  switch (spec.granularity) {
    case Granularity::PerTensor: return {1, x.size()};
    case Granularity::PerChannel:
    case Granularity::PerToken: return {x.rows(), x.cols()};
    case Granularity::PerHead:
      if (spec.head_dim == 0 || x.cols() % spec.head_dim != 0)
        throw ValidationError("per-head grouping: width " + std::to_string(x.cols()) + " not divisible by head_dim");
      return {x.size() / spec.head_dim, spec.head_dim};
  }
  return {};
}

QuantParams resolve_params(const Tensor& x, const QuantSpec& spec) {
  const Shape gs = group_shape(x, spec);
  const Tensor g = x.reshaped(gs);
  const std::size_t groups = gs[0];
  QuantParams p{Tensor({groups}), Tensor({groups})};
  const double alpha = spec.clip;
  for (std::size_t r = 0; r < groups; ++r) {
    auto row = g.row(r);
    if (spec.scheme == Scheme::Asymmetric) {
      const auto [mn_it, mx_it] = std::minmax_element(row.begin(), row.end());
      const double mn = *mn_it;
      const double mx = *mx_it;
      const bool degenerate = !(mx > mn);
      p.scale[r] = std::max(alpha * (mx - mn) / spec.max_code(), kScaleFloor);
      p.zero[r] = degenerate ? mn : alpha * mn;
    } else {
      double amax = 0.0;
      for (double v : row) amax = std::max(amax, std::abs(v));
      const double half = double(1 << (spec.bits - 1));
      p.scale[r] = std::max(alpha * amax / (half - 1.0), kScaleFloor);
      p.zero[r] = -p.scale[r] * half;
    }
  }
  return p;
}

Tensor fake_quantize(const Tensor& x, const QuantParams& params, const QuantSpec& spec) {
  if (!spec.enabled()) return x;
  const Shape gs = group_shape(x, spec);
  if (params.scale.size() != gs[0] || params.zero.size() != gs[0])
    throw ValidationError("fake_quantize: params resolved for a different grouping");
  Tensor out = x.reshaped(gs);
  const double top = spec.max_code();
  for (std::size_t r = 0; r < gs[0]; ++r) {
    const double s = params.scale[r];
    const double z = params.zero[r];
    for (double& v : out.row(r)) v = std::clamp(ad::round_half_away((v - z) / s), 0.0, top) * s + z;
  }
  return out.reshaped(x.shape());
}

Tensor fake_quantize(const Tensor& x, const QuantSpec& spec) {
  if (!spec.enabled()) return x;
  return fake_quantize(x, resolve_params(x, spec), spec);
}

namespace ad {

Var fake_quantize(Var x, Var clip, const QuantSpec& spec) {
  if (!spec.enabled()) return x;
  Graph& g = x.graph();
  const Shape original = x.shape();
  const Shape gs = group_shape(x.value(), spec);
  Var grouped = reshape(x, gs);
  const double top = spec.max_code();
  Var s, z;
  if (spec.scheme == Scheme::Asymmetric) {
    Var mn = row_min(grouped);
    Var mx = row_max(grouped);
    // Degenerate groups keep z = min so they reproduce exactly.
    Tensor keep({gs[0], 1});
    Tensor scaled({gs[0], 1});
    for (std::size_t r = 0; r < gs[0]; ++r) {
      const bool degenerate = !(mx.value()[r] > mn.value()[r]);
      keep[r] = degenerate ? 1.0 : 0.0;
      scaled[r] = degenerate ? 0.0 : 1.0;
    }
    Var coef = add(g.constant(std::move(keep)), mul(clip, g.constant(std::move(scaled))));
    s = maximum(scale(mul(sub(mx, mn), clip), 1.0 / top), kScaleFloor);
    z = mul(mn, coef);
  } else {
    const double half = double(1 << (spec.bits - 1));
    Var amax = row_max(abs(grouped));
    s = maximum(scale(mul(amax, clip), 1.0 / (half - 1.0)), kScaleFloor);
    z = scale(s, -half);
  }
  Var q = clamp_ste(round_ste(div(sub(grouped, z), s)), 0.0, top);
  return reshape(add(mul(q, s), z), original);
}

}  // namespace ad

// ---------------------------------------------------------------------------
// Clip search

double clip_mse(const Tensor& samples, double center, double theta, int bits) {
  const double top = double((1 << bits) - 1);
  const double s = 2.0 * theta / top;
  const double z = center - theta;
  double acc = 0.0;
  for (double v : samples.data()) {
    const double q = std::clamp(ad::round_half_away((v - z) / s), 0.0, top) * s + z;
    acc += (v - q) * (v - q);
  }
  return acc / double(samples.size());
}

namespace {
void check_clip_samples(const Tensor& samples, int bits) {
  if (samples.size() < 1000) throw ValidationError("search_clip: need at least 1000 samples");
  if (bits < 2 || bits > 8) throw ValidationError("search_clip: bits must be in 2..8");
}
}  // namespace

double search_clip_grid(const Tensor& samples, int bits, double lo, double hi, int steps) {
  check_clip_samples(samples, bits);
  if (steps < 2 || !(hi > lo) || !(lo > 0.0)) throw ValidationError("search_clip: bad grid");
  const double center = mean_of(samples);
  double best_theta = lo;
  double best = std::numeric_limits<double>::infinity();
  for (int k = 0; k < steps; ++k) {
    const double theta = lo + (hi - lo) * double(k) / double(steps - 1);
    const double e = clip_mse(samples, center, theta, bits);
    if (e < best) {
      best = e;
      best_theta = theta;
    }
  }
  return best_theta;
}

double search_clip(const Tensor& samples, int bits) {
  check_clip_samples(samples, bits);
  const double sd = std::sqrt(variance_of(samples));
  if (!(sd > 0.0)) throw ValidationError("search_clip: zero-variance samples");
  return search_clip_grid(samples, bits, 0.5 * sd, 4.0 * sd, 128);
}

double search_clip_factor(const Tensor& x, QuantSpec spec) {
  if (!spec.enabled()) return 1.0;
  double best_alpha = 1.0;
  double best = std::numeric_limits<double>::infinity();
  for (int k = 0; k <= 50; ++k) {
    spec.clip = 0.5 + 0.01 * k;
    const double e = mse(fake_quantize(x, spec), x);
    if (e < best) {
      best = e;
      best_alpha = spec.clip;
    }
  }
  return best_alpha;
}

// ---------------------------------------------------------------------------
// GPTQ

Tensor gptq_hessian(const Tensor& x_calib) { return matmul(transpose(x_calib), x_calib); }

double gptq_proxy_loss(const Tensor& w, const Tensor& w_hat, const Tensor& hessian) {
  const Tensor d = sub(w, w_hat);
  const Tensor dh = matmul(d, hessian);
  double tr = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) tr += dh[i] * d[i];
  return tr;
}

Tensor rtn_quantize(const Tensor& w, const QuantSpec& spec) { return fake_quantize(w, spec); }

Tensor gptq_quantize(const Tensor& w, const Tensor& x_calib, const QuantSpec& spec, double damp) {
  if (!spec.enabled()) return w;
  if (spec.scheme != Scheme::Symmetric || spec.granularity != Granularity::PerChannel)
    throw ValidationError("gptq_quantize: weights use per-channel symmetric quantization");
  if (x_calib.rows() == 0) throw ValidationError("gptq_quantize: empty calibration set");
  if (x_calib.cols() != w.cols()) throw ValidationError("gptq_quantize: calibration width differs from weight input");
  if (damp < 0.0) throw ValidationError("gptq_quantize: negative damping");

  const std::size_t rows = w.rows();
  const std::size_t n = w.cols();
  Tensor work = w;
  Tensor h = gptq_hessian(x_calib);
  for (std::size_t i = 0; i < n; ++i) {
    if (h(i, i) == 0.0) {  // input never active: weight column is irrelevant
      h(i, i) = 1.0;
      for (std::size_t r = 0; r < rows; ++r) work(r, i) = 0.0;
    }
  }
  double mean_diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean_diag += h(i, i);
  mean_diag /= double(n);
  for (std::size_t i = 0; i < n; ++i) h(i, i) += damp * mean_diag;

  Tensor upper;
  try {
    upper = transpose(cholesky(spd_inverse(h)));
  } catch (const NumericalError&) {
    throw NumericalError("ill-conditioned Hessian");
  }

  const QuantParams params = resolve_params(work, spec);
  const double top = spec.max_code();
  Tensor out({rows, n});
  for (std::size_t i = 0; i < n; ++i) {
    const double d = upper(i, i);
    for (std::size_t r = 0; r < rows; ++r) {
      const double s = params.scale[r];
      const double z = params.zero[r];
      const double v = work(r, i);
      const double q = std::clamp(ad::round_half_away((v - z) / s), 0.0, top) * s + z;
      out(r, i) = q;
      const double err = (v - q) / d;
      for (std::size_t j = i + 1; j < n; ++j) work(r, j) -= err * upper(i, j);
    }
  }
  return out;
}

}  // namespace baseq
