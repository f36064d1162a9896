#include <cmath>

#include "baseq/error.hpp"
#include "baseq/error_analysis.hpp"
#include "baseq/model_sim.hpp"
#include "baseq/rng.hpp"
#include "baseq/stats.hpp"
#include "doctest.h"

using namespace baseq;

namespace {
ModelConfig small_config() {
  ModelConfig c;
  c.hidden = 32;
  c.heads = 2;
  c.mlp_dim = 64;
  c.n_blocks = 2;
  c.seq_len = 8;
  return c;
}

BlockParams random_params(const ModelConfig& cfg, Rng& rng) {
  BlockParams p = BlockParams::identity(cfg);
  for (Tensor* t : {&p.bc_qkv, &p.bc_o, &p.bc_up, &p.bc_down}) *t = rng.normal_tensor(t->shape());
  for (Tensor* t : {&p.s_o, &p.s_down, &p.sa_o, &p.sa_down}) *t = rng.uniform_tensor(t->shape(), 0.5, 2.0);
  for (Tensor* t : {&p.alpha_qkv, &p.alpha_o, &p.alpha_up, &p.alpha_down, &p.alpha_k, &p.alpha_v})
    *t = Tensor::scalar(rng.uniform(0.6, 1.0));
  p.rv_a = rng.normal_tensor(p.rv_a.shape(), 0.0, 0.5);
  return p;
}
}  // namespace

TEST_CASE("gen_synthetic") {
  SUBCASE("plain Gaussian") {
    SynthSpec s;
    s.channels = 32;
    s.tokens = 10000;
    s.seed = 1;
    const auto st = channel_stats(gen_synthetic(s));
    for (double m : st.means) CHECK(std::abs(m) < 4.0 / 100.0);
  }
  SUBCASE("one outlier channel") {
    SynthSpec s;
    s.channels = 64;
    s.tokens = 10000;
    s.outlier_channels = {3};
    s.amplitudes = {20.0};
    const auto st = channel_stats(gen_synthetic(s));
    CHECK(st.means[3] > 19.0);
    CHECK(st.means[3] < 21.0);
  }
  SUBCASE("validation") {
    SynthSpec s;
    s.channels = 64;
    s.outlier_channels = {64};
    s.amplitudes = {5};
    CHECK_THROWS_AS(s.validate(), ValidationError);
    s.outlier_channels = {1, 2, 3, 4, 5};
    s.amplitudes.assign(5, 5.0);
    CHECK_THROWS_AS(s.validate(), ValidationError);
    s.outlier_channels = {1};
    s.amplitudes = {0.5};
    CHECK_THROWS_AS(s.validate(), ValidationError);
  }
  SUBCASE("determinism") {
    const SynthSpec s = default_synth_spec(64, 32, 5);
    CHECK(gen_synthetic(s) == gen_synthetic(s));
    CHECK_FALSE(gen_synthetic(s) == gen_synthetic(default_synth_spec(64, 32, 6)));
  }
}

TEST_CASE("build_toy_model") {
  const ModelConfig cfg;
  CHECK(build_toy_model(cfg, 3) == build_toy_model(cfg, 3));
  CHECK_FALSE(build_toy_model(cfg, 3) == build_toy_model(cfg, 4));
  ModelConfig bad = cfg;
  bad.hidden = 48;
  bad.heads = 3;
  CHECK_THROWS_WITH_AS(build_toy_model(bad, 1), doctest::Contains("dimension must be 2^k"), ValidationError);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const ModelBundle b = build_toy_model(cfg, seed);
    b.validate();
    const Tensor x = gen_synthetic(default_synth_spec(cfg.hidden, 256, seed));
    const Tensor y = forward_fp(b, x);
    const double ratio = variance_of(y) / variance_of(x);
    CHECK(ratio > 0.1);
    CHECK(ratio < 10.0);
  }
}

TEST_CASE("norm folding and R_res fusion") {
  const ModelConfig cfg = small_config();
  Rng rng(2);
  const ModelBundle raw = build_toy_model(cfg, 7);
  const Tensor x = rng.normal_tensor({64, cfg.hidden}, 0.5, 2.0);
  CHECK_THROWS_WITH_AS(fuse_rres(raw, Rotation::hadamard(cfg.hidden)), "fold norms first", ValidationError);
  const ModelBundle folded = fold_norms(raw);
  CHECK(relative_error(forward_fp(folded, x), forward_fp(raw, x)) < 1e-12);

  CHECK(fuse_rres(folded, Rotation::explicit_matrix(Tensor::identity(cfg.hidden))) == folded);

  // Any orthogonal R, not only Hadamard.
  const Tensor q = cayley(rng.normal_tensor({cfg.hidden, cfg.hidden}), Tensor::identity(cfg.hidden));
  for (const Rotation& r : {Rotation::random_hadamard(cfg.hidden, 1), Rotation::explicit_matrix(q)}) {
    const ModelBundle fused = fuse_rres(folded, r);
    // Oracle: unfused model with the rotation applied online on the way in and undone on the way out.
    const Tensor want = forward_fp(folded, x);
    const Tensor got = r.apply_inverse(forward_fp(fused, r.apply(x)));
    CHECK(relative_error(got, want) < 1e-6);
    const ModelBundle back = fuse_rres(fused, Rotation::explicit_matrix(transpose(r.materialize())));
    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
      CHECK(max_abs_diff(back.blocks[b].wq, folded.blocks[b].wq) < 1e-9);
      CHECK(max_abs_diff(back.blocks[b].wdown, folded.blocks[b].wdown) < 1e-9);
    }
  }
}

TEST_CASE("value rotation fusion keeps the FP function") {
  const ModelConfig cfg = small_config();
  Rng rng(3);
  const ModelBundle b = fold_norms(build_toy_model(cfg, 9));
  const Tensor x = rng.normal_tensor({32, cfg.hidden});
  const Tensor rv = cayley(rng.normal_tensor({cfg.head_dim(), cfg.head_dim()}), hadamard_matrix(cfg.head_dim()));
  const ModelBundle fused = fuse_value_rotation(b, 1, rv);
  CHECK(relative_error(forward_fp(fused, x), forward_fp(b, x)) < 1e-10);
  CHECK_FALSE(fused.blocks[1].wv == b.blocks[1].wv);
}

TEST_CASE("quantized forward with quantizers disabled equals FP forward") {
  const ModelConfig cfg = small_config();
  const QuantSpecSet off = QuantSpecSet::passthrough(cfg.head_dim());
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const ModelBundle b = fold_norms(build_toy_model(cfg, seed));
    const Tensor x = gen_synthetic(default_synth_spec(cfg.hidden, 64, seed));
    std::vector<BlockParams> ps{random_params(cfg, rng), random_params(cfg, rng)};
    CHECK(relative_error(forward_quant_model(b, ps, off, x), forward_fp(b, x)) < 1e-6);
    // Same through the frozen-weight path.
    std::vector<FrozenWeights> fr{effective_weights(b.blocks[0], ps[0]), effective_weights(b.blocks[1], ps[1])};
    CHECK(relative_error(forward_quant_model(b, ps, off, x, fr), forward_fp(b, x)) < 1e-6);
  }
  // Unfolded gains are honoured too.
  const ModelBundle raw = build_toy_model(cfg, 1);
  const Tensor x = Rng(1).normal_tensor({16, cfg.hidden});
  const std::vector<BlockParams> ids(2, BlockParams::identity(cfg));
  CHECK(relative_error(forward_quant_model(raw, ids, off, x), forward_fp(raw, x)) < 1e-10);
}

TEST_CASE("identity parameters reduce to the plain rotated-quantized path") {
  const ModelConfig cfg = small_config();
  const ModelBundle b = fold_norms(build_toy_model(cfg, 4));
  const Tensor x = gen_synthetic(default_synth_spec(cfg.hidden, 32, 4));
  const QuantSpecSet specs = QuantSpecSet::from_bits(4, 4, 4, cfg.head_dim());
  const BlockWeights& w = b.blocks[0];
  const BlockParams id = BlockParams::identity(cfg);

  // Reference written out directly: fake-quantize, multiply by fake-quantized weights.
  auto fq = [](const Tensor& t, const QuantSpec& s) { return fake_quantize(t, s); };
  const Tensor h = hadamard_matrix(cfg.head_dim());
  const Tensor a1 = fq(ad::rmsnorm(x, cfg.norm_eps), specs.activation);
  const Tensor wv = transpose(rotate_heads(transpose(w.wv), h));
  const Tensor bv = rotate_heads(w.bv.reshaped({1, cfg.hidden}), h).reshaped({cfg.hidden});
  const Tensor q = rotate_heads(add_row(matmul_nt(a1, fq(w.wq, specs.weight)), w.bq), h);
  const Tensor k = fq(rotate_heads(add_row(matmul_nt(a1, fq(w.wk, specs.weight)), w.bk), h), specs.kv);
  const Tensor v = fq(add_row(matmul_nt(a1, fq(wv, specs.weight)), bv), specs.kv);
  const Tensor att = fq(ad::attention(q, k, v, cfg.heads, cfg.seq_len, true), specs.activation);
  const Tensor hres = add(x, matmul_nt(att, fq(rotate_heads(w.wo, h), specs.weight)));
  const Tensor a2 = fq(ad::rmsnorm(hres, cfg.norm_eps), specs.activation);
  const Tensor m = hadamard(ad::silu(matmul_nt(a2, fq(w.wgate, specs.weight))), matmul_nt(a2, fq(w.wup, specs.weight)));
  const Tensor y = add(hres, matmul_nt(fq(fwht(m), specs.activation), fq(fwht(w.wdown), specs.weight)));

  CHECK(max_abs_diff(forward_quant(w, cfg, true, id, specs, x), y) < 1e-10);
}

TEST_CASE("bias calibration removes channel-mean misalignment at every site") {
  ModelConfig cfg = small_config();
  cfg.n_blocks = 1;
  const ModelBundle b = fold_norms(build_toy_model(cfg, 5));
  const QuantSpecSet specs = QuantSpecSet::from_bits(4, 4, 4, cfg.head_dim());
  const Tensor calib = gen_synthetic(default_synth_spec(cfg.hidden, 1024, 5));
  // Held-out tokens from the same distribution (same offsets and outliers, fresh noise).
  SynthSpec held_spec = default_synth_spec(cfg.hidden, 1024, 5);
  held_spec.seed = 77;
  const Tensor held = gen_synthetic(held_spec);
  BlockParams p = BlockParams::identity(cfg);
  SiteTrace before;
  forward_quant(b.blocks[0], cfg, true, p, specs, held, nullptr, &before);
  p = calibrate_bias(b.blocks[0], cfg, true, p, specs, calib);
  SiteTrace after;
  forward_quant(b.blocks[0], cfg, true, p, specs, held, nullptr, &after);
  auto frac = [](const Tensor& pre, const Tensor& bc) { return variance_decomposition(add_row(pre, scale(bc, -1.0))).fraction; };
  CHECK(variance_decomposition(before.qkv_pre).fraction > 0.1);
  CHECK(frac(after.qkv_pre, p.bc_qkv) < 0.01);
  CHECK(frac(after.o_pre, p.bc_o) < 0.01);
  CHECK(frac(after.up_pre, p.bc_up) < 0.01);
  CHECK(frac(after.down_pre, p.bc_down) < 0.01);
}

TEST_CASE("kv cache site: passthrough is bit-identical, quantized differs") {
  const ModelConfig cfg = small_config();
  const ModelBundle b = fold_norms(build_toy_model(cfg, 6));
  const Tensor x = gen_synthetic(default_synth_spec(cfg.hidden, 32, 6));
  const BlockParams id = BlockParams::identity(cfg);
  QuantSpecSet a = QuantSpecSet::passthrough(cfg.head_dim());
  QuantSpecSet kvq = a;
  kvq.kv = QuantSpec::kv_cache(4, cfg.head_dim());
  const Tensor y0 = forward_quant(b.blocks[0], cfg, true, id, a, x);
  CHECK(forward_quant(b.blocks[0], cfg, true, id, a, x) == y0);
  CHECK(max_abs_diff(forward_quant(b.blocks[0], cfg, true, id, kvq, x), y0) > 0.0);
}

TEST_CASE("block parameter overhead") {
  const ModelConfig cfg;
  CHECK(BlockParams::identity(cfg).count() == BlockParams::count_for(cfg));
  // At 7B-like width the learnable overhead is far below 0.1% of the block's weights.
  ModelConfig big;
  big.hidden = 4096;
  big.heads = 32;
  big.mlp_dim = 16384;
  CHECK(parameter_overhead(big) < 1e-3);
  // At desk width the O(n) parameters are not negligible against O(n²) weights.
  CHECK(parameter_overhead(cfg) > 1e-3);
}

TEST_CASE("forward input validation") {
  const ModelConfig cfg = small_config();
  const ModelBundle b = build_toy_model(cfg, 1);
  CHECK_THROWS_AS(forward_fp(b, Tensor({8, 16})), ValidationError);
  CHECK_THROWS_AS(forward_fp(b, Tensor({7, cfg.hidden})), ValidationError);
}
