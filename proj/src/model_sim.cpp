#include "baseq/model_sim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "baseq/error.hpp"
#include "baseq/rng.hpp"
#include "baseq/stats.hpp"

namespace baseq {

namespace {

void require_pow2(std::size_t n, const char* what) {
  if (!is_power_of_two(n))
    throw ValidationError(std::string(what) + ": dimension must be 2^k (got " + std::to_string(n) + ")");
}

Tensor row_of(const Tensor& v) { return v.reshaped({1, v.size()}); }

}  // namespace

void ModelConfig::validate() const {
  if (hidden == 0 || heads == 0 || mlp_dim == 0 || n_blocks == 0 || seq_len == 0)
    throw ValidationError("model config: sizes must be positive");
  if (hidden % heads != 0) throw ValidationError("model config: hidden must equal heads * head_dim");
  require_pow2(hidden, "hidden");
  require_pow2(head_dim(), "head_dim");
  require_pow2(mlp_dim, "mlp_dim");
  if (!(norm_eps > 0.0)) throw ValidationError("model config: norm_eps must be positive");
}

std::size_t ModelConfig::weights_per_block() const {
  return 4 * hidden * hidden + 3 * hidden * mlp_dim + (qkv_bias ? 3 * hidden : 0) + 2 * hidden;
}

void ModelBundle::validate() const {
  config.validate();
  if (blocks.size() != config.n_blocks)
    throw ValidationError("bundle: expected " + std::to_string(config.n_blocks) + " blocks, found " +
                          std::to_string(blocks.size()));
  const std::size_t n = config.hidden;
  const std::size_t m = config.mlp_dim;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const BlockWeights& w = blocks[b];
    auto check = [&](const Tensor& t, Shape want, const char* name) {
      if (t.shape() != want)
        throw ValidationError("bundle: block " + std::to_string(b) + " " + name + " has shape " +
                              shape_str(t.shape()) + ", expected " + shape_str(want));
      if (!t.all_finite()) throw ValidationError("bundle: block " + std::to_string(b) + " " + name + " not finite");
    };
    check(w.wq, {n, n}, "wq");
    check(w.wk, {n, n}, "wk");
    check(w.wv, {n, n}, "wv");
    check(w.wo, {n, n}, "wo");
    check(w.wgate, {m, n}, "wgate");
    check(w.wup, {m, n}, "wup");
    check(w.wdown, {n, m}, "wdown");
    check(w.norm1, {n}, "norm1");
    check(w.norm2, {n}, "norm2");
    if (config.qkv_bias) {
      check(w.bq, {n}, "bq");
      check(w.bk, {n}, "bk");
      check(w.bv, {n}, "bv");
    } else if (!w.bq.empty() || !w.bk.empty() || !w.bv.empty()) {
      throw ValidationError("bundle: biases present but qkv_bias is off");
    }
  }
}

// ---------------------------------------------------------------------------
// Synthetic data

void SynthSpec::validate() const {
  if (channels == 0 || tokens == 0) throw ValidationError("synth: channels and tokens must be positive");
  if (!(base_std > 0.0)) throw ValidationError("synth: base_std must be positive");
  if (outlier_channels.size() != amplitudes.size())
    throw ValidationError("synth: one amplitude per outlier channel");
  if (outlier_channels.size() > channels / 16)
    throw ValidationError("synth: at most channels/16 outlier channels (" + std::to_string(channels / 16) + ")");
  for (std::size_t c : outlier_channels)
    if (c >= channels) throw ValidationError("synth: outlier channel index " + std::to_string(c) + " >= " +
                                             std::to_string(channels));
  for (double a : amplitudes)
    if (!(a > 1.0)) throw ValidationError("synth: outlier amplitudes must exceed 1");
  if (!offsets.empty() && offsets.size() != channels) throw ValidationError("synth: offsets must have one entry per channel");
}

SynthSpec default_synth_spec(std::size_t channels, std::size_t tokens, std::uint64_t seed, double offset_std,
                             std::size_t outliers, double amplitude) {
  SynthSpec s;
  s.channels = channels;
  s.tokens = tokens;
  s.seed = seed;
  Rng rng(mix_seed(seed, 0x5eed0ff5));
  const std::size_t k = std::min<std::size_t>(outliers, channels / 16);
  while (s.outlier_channels.size() < k) {
    const std::size_t c = std::size_t(rng.next() % channels);
    if (std::find(s.outlier_channels.begin(), s.outlier_channels.end(), c) == s.outlier_channels.end())
      s.outlier_channels.push_back(c);
  }
  s.amplitudes.assign(k, amplitude);
  s.offsets.resize(channels);
  for (double& o : s.offsets) o = offset_std > 0.0 ? rng.normal(0.0, offset_std) : 0.0;
  return s;
}

Tensor gen_synthetic(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  Tensor x = rng.normal_tensor({spec.tokens, spec.channels}, 0.0, spec.base_std);
  for (std::size_t t = 0; t < spec.tokens; ++t) {
    auto row = x.row(t);
    if (!spec.offsets.empty())
      for (std::size_t c = 0; c < spec.channels; ++c) row[c] += spec.offsets[c];
    for (std::size_t i = 0; i < spec.outlier_channels.size(); ++i)
      row[spec.outlier_channels[i]] += spec.amplitudes[i] * spec.base_std;
  }
  return x;
}

ModelBundle build_toy_model(const ModelConfig& config, std::uint64_t seed, std::size_t outlier_columns) {
  config.validate();
  ModelBundle b;
  b.config = config;
  const std::size_t n = config.hidden;
  const std::size_t m = config.mlp_dim;
  for (std::size_t k = 0; k < config.n_blocks; ++k) {
    Rng rng(mix_seed(seed, 1000 + k));
    auto lin = [&](std::size_t out, std::size_t in) {
      Tensor w = rng.normal_tensor({out, in}, 0.0, std::sqrt(2.0 / double(in + out)));
      for (std::size_t c = 0; c < std::min(outlier_columns, in); ++c)
        for (std::size_t r = 0; r < out; ++r) w(r, c) *= 8.0;
      return w;
    };
    BlockWeights w;
    w.wq = lin(n, n);
    w.wk = lin(n, n);
    w.wv = lin(n, n);
    w.wo = lin(n, n);
    w.wgate = lin(m, n);
    w.wup = lin(m, n);
    w.wdown = lin(n, m);
    if (config.qkv_bias) {
      w.bq = rng.normal_tensor({n}, 0.0, 0.1);
      w.bk = rng.normal_tensor({n}, 0.0, 0.1);
      w.bv = rng.normal_tensor({n}, 0.0, 0.1);
    }
    w.norm1 = rng.normal_tensor({n}, 1.0, 0.1);
    w.norm2 = rng.normal_tensor({n}, 1.0, 0.1);
    b.blocks.push_back(std::move(w));
  }
  return b;
}

ModelBundle fold_norms(const ModelBundle& bundle) {
  if (bundle.norms_folded) return bundle;
  ModelBundle out = bundle;
  for (BlockWeights& w : out.blocks) {
    w.wq = mul_cols(w.wq, w.norm1);
    w.wk = mul_cols(w.wk, w.norm1);
    w.wv = mul_cols(w.wv, w.norm1);
    w.wgate = mul_cols(w.wgate, w.norm2);
    w.wup = mul_cols(w.wup, w.norm2);
    w.norm1 = Tensor(w.norm1.shape(), 1.0);
    w.norm2 = Tensor(w.norm2.shape(), 1.0);
  }
  out.norms_folded = true;
  return out;
}

ModelBundle fuse_rres(const ModelBundle& bundle, const Rotation& r) {
  if (!bundle.norms_folded) throw ValidationError("fold norms first");
  if (r.dim() != bundle.config.hidden)
    throw ValidationError("fuse_rres: rotation size " + std::to_string(r.dim()) + " != hidden " +
                          std::to_string(bundle.config.hidden));
  ModelBundle out = bundle;
  // Output side: rows of Wᵀ are the output vectors of each input channel.
  auto out_side = [&](const Tensor& w) { return transpose(r.apply(transpose(w))); };
  for (BlockWeights& w : out.blocks) {
    w.wq = r.apply(w.wq);
    w.wk = r.apply(w.wk);
    w.wv = r.apply(w.wv);
    w.wgate = r.apply(w.wgate);
    w.wup = r.apply(w.wup);
    w.wo = out_side(w.wo);
    w.wdown = out_side(w.wdown);
  }
  return out;
}

ModelBundle fuse_value_rotation(const ModelBundle& bundle, std::size_t block, const Tensor& r) {
  if (block >= bundle.blocks.size()) throw ValidationError("fuse_value_rotation: no block " + std::to_string(block));
  if (r.rows() != bundle.config.head_dim() || r.cols() != bundle.config.head_dim())
    throw ValidationError("fuse_value_rotation: rotation must be head_dim x head_dim");
  ModelBundle out = bundle;
  BlockWeights& w = out.blocks[block];
  w.wv = transpose(rotate_heads(transpose(w.wv), r));
  if (!w.bv.empty()) w.bv = rotate_heads(row_of(w.bv), r).reshaped(w.bv.shape());
  w.wo = rotate_heads(w.wo, r);
  return out;
}

// ---------------------------------------------------------------------------
// FP forward

namespace {

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul_nt(x, w);
  return b.empty() ? y : add_row(y, b);
}

void check_input(const ModelConfig& cfg, const Tensor& x) {
  if (x.rank() != 2 || x.cols() != cfg.hidden)
    throw ValidationError("forward: input must be [tokens x " + std::to_string(cfg.hidden) + "], got " +
                          shape_str(x.shape()));
  if (x.rows() == 0 || x.rows() % cfg.seq_len != 0)
    throw ValidationError("forward: token count " + std::to_string(x.rows()) + " is not a multiple of seq_len " +
                          std::to_string(cfg.seq_len));
}

}  // namespace

Tensor forward_block_fp(const BlockWeights& w, const ModelConfig& cfg, bool norms_folded, const Tensor& x) {
  check_input(cfg, x);
  Tensor a1 = ad::rmsnorm(x, cfg.norm_eps);
  if (!norms_folded) a1 = mul_cols(a1, w.norm1);
  const Tensor q = linear(a1, w.wq, w.bq);
  const Tensor k = linear(a1, w.wk, w.bk);
  const Tensor v = linear(a1, w.wv, w.bv);
  const Tensor att = ad::attention(q, k, v, cfg.heads, cfg.seq_len, cfg.causal);
  const Tensor h = add(x, matmul_nt(att, w.wo));
  Tensor a2 = ad::rmsnorm(h, cfg.norm_eps);
  if (!norms_folded) a2 = mul_cols(a2, w.norm2);
  const Tensor m = hadamard(ad::silu(matmul_nt(a2, w.wgate)), matmul_nt(a2, w.wup));
  return add(h, matmul_nt(m, w.wdown));
}

std::vector<Tensor> forward_fp_trace(const ModelBundle& bundle, const Tensor& x) {
  std::vector<Tensor> out{x};
  for (const BlockWeights& w : bundle.blocks)
    out.push_back(forward_block_fp(w, bundle.config, bundle.norms_folded, out.back()));
  return out;
}

Tensor forward_fp(const ModelBundle& bundle, const Tensor& x) { return forward_fp_trace(bundle, x).back(); }

// ---------------------------------------------------------------------------
// Quantized block

QuantSpecSet QuantSpecSet::from_bits(int w, int a, int kv, std::size_t head_dim) {
  QuantSpecSet s;
  s.weight = QuantSpec::weight(w);
  s.activation = QuantSpec::activation(a);
  s.kv = QuantSpec::kv_cache(kv, head_dim);
  return s;
}

void QuantSpecSet::validate() const {
  weight.validate();
  activation.validate();
  kv.validate();
  if (weight.scheme != Scheme::Symmetric || weight.granularity != Granularity::PerChannel)
    throw ValidationError("weights must be per-channel symmetric");
}

BlockParams BlockParams::identity(const ModelConfig& cfg) {
  const std::size_t n = cfg.hidden;
  const std::size_t m = cfg.mlp_dim;
  const std::size_t d = cfg.head_dim();
  BlockParams p;
  p.bc_qkv = Tensor({1, n});
  p.bc_o = Tensor({1, n});
  p.bc_up = Tensor({1, n});
  p.bc_down = Tensor({1, m});
  p.s_o = Tensor({1, n}, 1.0);
  p.s_down = Tensor({1, m}, 1.0);
  p.sa_o = Tensor({1, n}, 1.0);
  p.sa_down = Tensor({1, m}, 1.0);
  for (Tensor* a : {&p.alpha_qkv, &p.alpha_o, &p.alpha_up, &p.alpha_down, &p.alpha_k, &p.alpha_v})
    *a = Tensor::scalar(1.0);
  p.rv_a = Tensor({d, d});
  return p;
}

const std::vector<std::string>& BlockParams::names() {
  static const std::vector<std::string> k{"bc_qkv",    "bc_o",    "bc_up",      "bc_down",    "s_o",
                                          "s_down",    "sa_o",    "sa_down",    "alpha_qkv",  "alpha_o",
                                          "alpha_up",  "alpha_down", "alpha_k", "alpha_v",    "rv_a"};
  return k;
}

Tensor& BlockParams::field(const std::string& name) {
  return const_cast<Tensor&>(static_cast<const BlockParams&>(*this).field(name));
}

const Tensor& BlockParams::field(const std::string& name) const {
  if (name == "bc_qkv") return bc_qkv;
  if (name == "bc_o") return bc_o;
  if (name == "bc_up") return bc_up;
  if (name == "bc_down") return bc_down;
  if (name == "s_o") return s_o;
  if (name == "s_down") return s_down;
  if (name == "sa_o") return sa_o;
  if (name == "sa_down") return sa_down;
  if (name == "alpha_qkv") return alpha_qkv;
  if (name == "alpha_o") return alpha_o;
  if (name == "alpha_up") return alpha_up;
  if (name == "alpha_down") return alpha_down;
  if (name == "alpha_k") return alpha_k;
  if (name == "alpha_v") return alpha_v;
  if (name == "rv_a") return rv_a;
  throw ValidationError("unknown block parameter '" + name + "'");
}

std::size_t BlockParams::count() const {
  std::size_t total = 0;
  for (const std::string& n : names()) total += field(n).size();
  return total;
}

std::size_t BlockParams::count_for(const ModelConfig& cfg) {
  const std::size_t n = cfg.hidden;
  const std::size_t m = cfg.mlp_dim;
  const std::size_t d = cfg.head_dim();
  return 3 * n + m + 2 * (n + m) + 6 + d * d;
}

double parameter_overhead(const ModelConfig& cfg) {
  return double(BlockParams::count_for(cfg)) / double(cfg.weights_per_block());
}

BlockVars bind_params(ad::Graph& g, const BlockParams& p, const std::vector<std::string>& trainable,
                      const std::vector<ad::Var>& vars) {
  if (trainable.size() != vars.size()) throw ValidationError("bind_params: names and vars differ in length");
  auto get = [&](const std::string& name) {
    for (std::size_t i = 0; i < trainable.size(); ++i)
      if (trainable[i] == name) return vars[i];
    return g.constant(p.field(name));
  };
  BlockVars v;
  v.bc_qkv = get("bc_qkv");
  v.bc_o = get("bc_o");
  v.bc_up = get("bc_up");
  v.bc_down = get("bc_down");
  v.s_o = get("s_o");
  v.s_down = get("s_down");
  v.sa_o = get("sa_o");
  v.sa_down = get("sa_down");
  v.alpha_qkv = get("alpha_qkv");
  v.alpha_o = get("alpha_o");
  v.alpha_up = get("alpha_up");
  v.alpha_down = get("alpha_down");
  v.alpha_k = get("alpha_k");
  v.alpha_v = get("alpha_v");
  v.rv_a = get("rv_a");
  return v;
}

namespace {

using ad::Var;

Var quant_act(Var x, Var alpha, const QuantSpec& spec) { return spec.enabled() ? ad::fake_quantize(x, alpha, spec) : x; }

Var quant_weight(ad::Graph& g, Var w, const QuantSpec& spec) {
  return spec.enabled() ? ad::fake_quantize(w, g.constant(Tensor::scalar(1.0)), spec) : w;
}

/// x·Wᵀ + W·b^c (+ b): the linear after a bias-corrected quantizer.
Var corrected_linear(Var u, Var w, Var bc, const Tensor& bias) {
  Var fused = ad::matmul_nt(bc, w);
  if (!bias.empty()) fused = ad::add(fused, u.graph().constant(row_of(bias)));
  return ad::add(ad::matmul_nt(u, w), fused);
}

struct WeightVars {
  Var wq, wk, wv, wo, wgate, wup, wdown, bv;
};

WeightVars weight_vars(ad::Graph& g, const BlockWeights& w, const ModelConfig& cfg, const BlockVars& p,
                       const QuantSpecSet& specs, const FrozenWeights* frozen) {
  WeightVars v;
  if (frozen) {
    v.wq = g.constant(frozen->wq);
    v.wk = g.constant(frozen->wk);
    v.wv = g.constant(frozen->wv);
    v.wo = g.constant(frozen->wo);
    v.wgate = g.constant(frozen->wgate);
    v.wup = g.constant(frozen->wup);
    v.wdown = g.constant(frozen->wdown);
    if (!frozen->bv.empty()) v.bv = g.constant(row_of(frozen->bv));
    return v;
  }
  const QuantSpec& ws = specs.weight;
  Var rv = ad::cayley(p.rv_a, hadamard_matrix(cfg.head_dim()));
  v.wq = quant_weight(g, g.constant(w.wq), ws);
  v.wk = quant_weight(g, g.constant(w.wk), ws);
  v.wv = quant_weight(g, ad::transpose(ad::rotate_heads(g.constant(transpose(w.wv)), rv)), ws);
  if (!w.bv.empty()) v.bv = ad::rotate_heads(g.constant(row_of(w.bv)), rv);
  v.wo = quant_weight(g, ad::mul(ad::rotate_heads(g.constant(w.wo), rv), p.s_o), ws);
  v.wgate = quant_weight(g, g.constant(w.wgate), ws);
  v.wup = quant_weight(g, g.constant(w.wup), ws);
  v.wdown = quant_weight(g, ad::hadamard_rows(ad::mul(g.constant(w.wdown), p.s_down)), ws);
  return v;
}

}  // namespace

ad::Var forward_quant_graph(ad::Graph& g, const BlockWeights& w, const ModelConfig& cfg, bool norms_folded,
                            const BlockVars& p, const QuantSpecSet& specs, Var x, const FrozenWeights* frozen,
                            SiteTrace* trace) {
  using ad::Var;
  check_input(cfg, x.value());
  const QuantSpec& act = specs.activation;
  const WeightVars wv = weight_vars(g, w, cfg, p, specs, frozen);
  const Tensor empty;

  // Attention input: RMSNorm, bias-corrected quantizer, q/k/v projections.
  Var a1 = ad::rmsnorm(x, cfg.norm_eps);
  if (!norms_folded) a1 = ad::mul(a1, g.constant(row_of(w.norm1)));
  Var u1 = quant_act(ad::sub(a1, p.bc_qkv), p.alpha_qkv, act);
  Var q = corrected_linear(u1, wv.wq, p.bc_qkv, w.bq);
  Var k = corrected_linear(u1, wv.wk, p.bc_qkv, w.bk);
  Var v = corrected_linear(u1, wv.wv, p.bc_qkv, empty);
  if (wv.bv.valid()) v = ad::add(v, wv.bv);

  // R_qk is an online per-head Hadamard on Q and K; K and V go through the KV-cache quantizer.
  Var hqk = g.constant(hadamard_matrix(cfg.head_dim()));
  q = ad::rotate_heads(q, hqk);
  k = ad::rotate_heads(k, hqk);
  if (trace) {
    trace->k_pre = k.value();
    trace->v_pre = v.value();
  }
  k = quant_act(k, p.alpha_k, specs.kv);
  v = quant_act(v, p.alpha_v, specs.kv);
  Var att = ad::attention(q, k, v, cfg.heads, cfg.seq_len, cfg.causal);

  // o projection: s⁻¹ (paired with W·s), unpaired s^a, bias correction.
  Var z2 = ad::div(att, p.s_o);
  if (act.enabled()) z2 = ad::mul(z2, p.sa_o);
  Var u2 = quant_act(ad::sub(z2, p.bc_o), p.alpha_o, act);
  Var h = ad::add(x, corrected_linear(u2, wv.wo, p.bc_o, empty));

  // MLP.
  Var a2 = ad::rmsnorm(h, cfg.norm_eps);
  if (!norms_folded) a2 = ad::mul(a2, g.constant(row_of(w.norm2)));
  Var u3 = quant_act(ad::sub(a2, p.bc_up), p.alpha_up, act);
  Var gate = corrected_linear(u3, wv.wgate, p.bc_up, empty);
  Var up = corrected_linear(u3, wv.wup, p.bc_up, empty);
  Var m = ad::mul(ad::silu(gate), up);
  Var z4 = ad::hadamard_rows(ad::div(m, p.s_down));
  if (act.enabled()) z4 = ad::mul(z4, p.sa_down);
  Var u4 = quant_act(ad::sub(z4, p.bc_down), p.alpha_down, act);
  Var y = ad::add(h, corrected_linear(u4, wv.wdown, p.bc_down, empty));

  if (trace) {
    trace->qkv_pre = a1.value();
    trace->o_pre = z2.value();
    trace->up_pre = a2.value();
    trace->down_pre = z4.value();
    trace->qkv_lin = add_row(u1.value(), p.bc_qkv.value());
    trace->o_lin = add_row(u2.value(), p.bc_o.value());
    trace->up_lin = add_row(u3.value(), p.bc_up.value());
    trace->down_lin = add_row(u4.value(), p.bc_down.value());
  }
  return y;
}

Tensor forward_quant(const BlockWeights& w, const ModelConfig& cfg, bool norms_folded, const BlockParams& p,
                     const QuantSpecSet& specs, const Tensor& x, const FrozenWeights* frozen, SiteTrace* trace) {
  ad::Graph g;
  const BlockVars v = bind_params(g, p);
  return forward_quant_graph(g, w, cfg, norms_folded, v, specs, g.constant(x), frozen, trace).value();
}

Tensor forward_quant_model(const ModelBundle& bundle, const std::vector<BlockParams>& params,
                           const QuantSpecSet& specs, const Tensor& x, const std::vector<FrozenWeights>& frozen) {
  if (params.size() != bundle.blocks.size()) throw ValidationError("forward_quant: one BlockParams per block");
  if (!frozen.empty() && frozen.size() != bundle.blocks.size())
    throw ValidationError("forward_quant: one FrozenWeights per block");
  Tensor cur = x;
  for (std::size_t b = 0; b < bundle.blocks.size(); ++b)
    cur = forward_quant(bundle.blocks[b], bundle.config, bundle.norms_folded, params[b], specs, cur,
                        frozen.empty() ? nullptr : &frozen[b]);
  return cur;
}

Tensor value_rotation(const BlockParams& p) { return cayley(p.rv_a, hadamard_matrix(p.rv_a.rows())); }

FrozenWeights effective_weights(const BlockWeights& w, const BlockParams& p) {
  const Tensor rv = value_rotation(p);
  FrozenWeights f;
  f.wq = w.wq;
  f.wk = w.wk;
  f.wv = transpose(rotate_heads(transpose(w.wv), rv));
  if (!w.bv.empty()) f.bv = rotate_heads(row_of(w.bv), rv).reshaped(w.bv.shape());
  f.wo = mul_cols(rotate_heads(w.wo, rv), p.s_o);
  f.wgate = w.wgate;
  f.wup = w.wup;
  f.wdown = fwht(mul_cols(w.wdown, p.s_down));
  return f;
}

BlockParams calibrate_bias(const BlockWeights& w, const ModelConfig& cfg, bool norms_folded, BlockParams p,
                           const QuantSpecSet& specs, const Tensor& x, const FrozenWeights* frozen) {
  auto means = [](const Tensor& t) { return row_of(Tensor::vector(channel_stats(t).means)); };
  SiteTrace tr;
  forward_quant(w, cfg, norms_folded, p, specs, x, frozen, &tr);
  p.bc_qkv = means(tr.qkv_pre);
  forward_quant(w, cfg, norms_folded, p, specs, x, frozen, &tr);
  p.bc_o = means(tr.o_pre);
  forward_quant(w, cfg, norms_folded, p, specs, x, frozen, &tr);
  p.bc_up = means(tr.up_pre);
  forward_quant(w, cfg, norms_folded, p, specs, x, frozen, &tr);
  p.bc_down = means(tr.down_pre);
  return p;
}

}  // namespace baseq
