#include <cmath>

#include "baseq/error.hpp"
#include "baseq/error_analysis.hpp"
#include "baseq/rng.hpp"
#include "baseq/stats.hpp"
#include "baseq/transforms.hpp"
#include "doctest.h"

using namespace baseq;

TEST_CASE("clipping_energy") {
  CHECK(clipping_energy(Tensor::vector({0.5, -1.0, 1.9}), -2, 2) == 0.0);
  CHECK(clipping_energy(Tensor::vector({-3, -1, 1, 3}), -2, 2) == doctest::Approx(0.9));
  CHECK_THROWS_WITH_AS(clipping_energy(Tensor({4}), -1, 1), "zero energy", ValidationError);
  CHECK_THROWS_AS(clipping_energy(Tensor::vector({1}), 1, 1), ValidationError);
}

TEST_CASE("gaussian clip energy: closed form and Monte Carlo") {
  CHECK(gaussian_clip_energy(10.0) < 1e-20);
  CHECK(gaussian_clip_energy(1e-6) == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(std::abs(gaussian_clip_energy(2.2) - 0.1838) < 0.0005);
  CHECK_THROWS_AS(gaussian_clip_energy(0.0), ValidationError);
  // Independent oracle: trapezoidal integration of 2∫_t^∞ x²φ(x)dx.
  for (double t : {0.5, 1.0, 2.2, 3.0}) {
    double acc = 0.0;
    const double h = 1e-4;
    for (double x = t; x < 12.0; x += h) acc += 0.5 * h * (x * x * normal_pdf(x) + (x + h) * (x + h) * normal_pdf(x + h));
    CHECK(std::abs(gaussian_clip_energy(t) - 2 * acc) < 1e-7);
  }
  Rng rng(1);
  const Tensor g = rng.normal_tensor({1000000});
  for (double t : {1.0, 1.5, 2.0, 2.2, 3.0}) CHECK(std::abs(clipping_energy(g, -t, t) - gaussian_clip_energy(t)) < 0.005);
}

TEST_CASE("variance_decomposition") {
  SUBCASE("zero channel means") {
    const Tensor x = Tensor::matrix(2, 3, {1, -2, 3, -1, 2, -3});
    CHECK(variance_decomposition(x).fraction == 0.0);
  }
  SUBCASE("two-channel example") {
    CHECK(variance_decomposition(Tensor::matrix(2, 2, {-1, 1, 1, 3})).fraction == doctest::Approx(0.5));
  }
  SUBCASE("offsets N(0,9) on unit channels") {
    Rng rng(2);
    const std::size_t n = 64, t = 100000;
    Tensor x({t, n});
    std::vector<double> mu(n);
    for (double& m : mu) m = rng.normal(0, 3);
    for (std::size_t r = 0; r < t; ++r)
      for (std::size_t c = 0; c < n; ++c) x(r, c) = mu[c] + rng.normal();
    // Oracle: the realised offsets' population variance over (itself + 1).
    double mm = 0, vm = 0;
    for (double m : mu) mm += m;
    mm /= double(n);
    for (double m : mu) vm += (m - mm) * (m - mm);
    vm /= double(n);
    const double f = variance_decomposition(x).fraction;
    CHECK(std::abs(f - vm / (vm + 1)) < 0.01);
    CHECK(std::abs(f - 0.9) < 0.05 * 0.9 * 2);  // expectation 9/10; 64 channels add sampling spread
    Tensor shifted = x;
    for (double& v : shifted.data()) v += 17.0;
    CHECK(variance_decomposition(shifted).fraction == doctest::Approx(f).epsilon(1e-9));
  }
  CHECK_THROWS_AS(variance_decomposition(Tensor({3, 1})), ValidationError);
  CHECK_THROWS_AS(variance_decomposition(Tensor({0, 3})), ValidationError);
}

TEST_CASE("orthogonal rotations keep total variance") {
  Rng rng(3);
  for (int i = 0; i < 10; ++i) {
    Tensor x = rng.normal_tensor({32, 16});
    for (std::size_t r = 0; r < 32; ++r) x(r, 3) += 5.0;
    const Tensor y = Rotation::random_hadamard(16, std::uint64_t(i)).apply(x);
    // The pooled variance moves with the grand mean, which a rotation does not keep;
    // the covariance trace (sum of channel variances) is what stays fixed.
    const auto sx = channel_stats(x);
    const auto sy = channel_stats(y);
    double trx = 0, tr_y = 0;
    for (double v : sx.vars) trx += v;
    for (double v : sy.vars) tr_y += v;
    CHECK(std::abs(trx - tr_y) <= 1e-9 * trx);
  }
}

TEST_CASE("noise propagation") {
  Rng rng(4);
  const Tensor w = rng.normal_tensor({1, 64});
  const Tensor a = rng.normal_tensor({1, 64}, 0.0, 2.0);
  SUBCASE("both steps zero") {
    const NoiseVariance nv = noise_propagation(w, a, 0, 0, 100);
    CHECK(nv.predicted == 0.0);
    CHECK(nv.empirical == 0.0);
  }
  SUBCASE("weight exact: one-sided noise") {
    const NoiseVariance nv = noise_propagation(w, a, 0.0, 0.1, 20000, 1);
    double ew = 0;
    for (double v : w.data()) ew += v * v;
    CHECK(nv.predicted == doctest::Approx(ew * 0.01 / 12));
    CHECK(std::abs(nv.empirical / nv.predicted - 1) < 0.03);
  }
  SUBCASE("both noisy, 1e5 trials") {
    const NoiseVariance nv = noise_propagation(w, a, 0.1, 0.1, 100000, 2);
    CHECK(std::abs(nv.empirical / nv.predicted - 1) < 0.05);
  }
  SUBCASE("matrix operands") {
    const NoiseVariance nv = noise_propagation(rng.normal_tensor({8, 16}), rng.normal_tensor({6, 16}), 0.2, 0.3, 5000, 3);
    CHECK(std::abs(nv.empirical / nv.predicted - 1) < 0.05);
  }
  CHECK_THROWS_AS(noise_propagation(w, Tensor({1, 3}, 1.0), 0.1, 0.1), ValidationError);
}

TEST_CASE("optimal_scale") {
  // Channel RMS(w) = 4, RMS(a) = 1.
  const Tensor w = Tensor::matrix(2, 1, {4, -4});
  const Tensor a = Tensor::matrix(2, 1, {1, -1});
  CHECK(optimal_scale(w, a)[0] == doctest::Approx(2.0));
  CHECK(optimal_scale(a, a)[0] == doctest::Approx(1.0));
  CHECK(optimal_scale(a, w)[0] == doctest::Approx(0.5));
  CHECK_THROWS_WITH_AS(optimal_scale(w, Tensor({2, 1})), "degenerate channel", ValidationError);

  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor wm = rng.normal_tensor({16, 8}, 0.0, 0.2);
    Tensor am = rng.normal_tensor({32, 8});
    for (std::size_t r = 0; r < 32; ++r) am(r, std::size_t(trial % 8)) *= 10.0;
    const Tensor s = optimal_scale(wm, am);
    const Tensor inv_s = optimal_scale(am, wm);
    for (std::size_t j = 0; j < 8; ++j) CHECK(s[j] * inv_s[j] == doctest::Approx(1.0));
    auto cost = [&](const Tensor& sc) { return predicted_noise_variance(div_cols(wm, sc), mul_cols(am, sc), 0.1, 0.1); };
    const double best = cost(s);
    for (double f : {0.9, 1.1}) {
      CHECK(cost(scale(s, f)) >= best);
      for (std::size_t j = 0; j < 8; ++j) {
        Tensor p = s;
        p[j] *= f;
        CHECK(cost(p) >= best);
      }
    }
  }
}

TEST_CASE("emit_report") {
  SUBCASE("constant layer") {
    const ErrorReport r = emit_report({{"const", Tensor({8, 4}, 3.0), Tensor({2, 4}, 1.0), 4}});
    REQUIRE(r.sites.size() == 1);
    CHECK(r.sites[0].rounding_energy == 0.0);
    CHECK(r.sites[0].clipping_energy_fraction == 0.0);
    CHECK(r.sites[0].var_of_means_fraction == 0.0);
  }
  SUBCASE("misaligned means") {
    Rng rng(6);
    Tensor x = rng.normal_tensor({512, 16});
    for (std::size_t r = 0; r < 512; ++r)
      for (std::size_t c = 0; c < 16; ++c) x(r, c) += 3.0 * double(c % 4) - 4.5;
    const ErrorReport r = emit_report({{"x", x, rng.normal_tensor({8, 16}), 4}});
    CHECK(r.sites[0].var_of_means_fraction > 0.5);
    CHECK(r.sites[0].rounding_energy > 0.0);
    CHECK(r.sites[0].predicted_noise_var > 0.0);
    CHECK(std::abs(r.sites[0].empirical_noise_var / r.sites[0].predicted_noise_var - 1) < 0.2);
    for (const auto& s : r.sites) {
      CHECK(s.clipping_energy_fraction >= 0.0);
      CHECK(s.clipping_energy_fraction <= 1.0);
      CHECK(s.var_of_means_fraction == doctest::Approx(s.var_of_means / s.total_var).epsilon(1e-10));
    }
  }
  CHECK_THROWS_AS(emit_report({}), ValidationError);
}
