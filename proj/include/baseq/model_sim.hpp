#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "baseq/autodiff.hpp"
#include "baseq/quantizers.hpp"
#include "baseq/tensor.hpp"
#include "baseq/transforms.hpp"

namespace baseq {

struct ModelConfig {
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t mlp_dim = 256;
  std::size_t n_blocks = 2;
  std::size_t seq_len = 16;  ///< tokens per attention sequence
  bool qkv_bias = true;
  bool causal = true;
  double norm_eps = 1e-6;

  std::size_t head_dim() const { return heads ? hidden / heads : 0; }
  /// hidden == heads·head_dim; hidden, head_dim and mlp_dim powers of two.
  void validate() const;
  std::size_t weights_per_block() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// One decoder block. Linear weights are [out × in].
struct BlockWeights {
  Tensor wq, wk, wv, wo, wgate, wup, wdown;
  Tensor bq, bk, bv;     ///< [hidden] or empty
  Tensor norm1, norm2;   ///< RMSNorm gains, [hidden]

  friend bool operator==(const BlockWeights&, const BlockWeights&) = default;
};

struct ModelBundle {
  ModelConfig config;
  std::vector<BlockWeights> blocks;
  bool norms_folded = false;

  void validate() const;
  friend bool operator==(const ModelBundle&, const ModelBundle&) = default;
};

/// Synthetic residual-stream activations: x = μ + g + Σ_i a_i·δ·e_i per token,
/// g ~ N(0, δ²I).
struct SynthSpec {
  std::size_t channels = 64;
  std::size_t tokens = 2048;
  double base_std = 1.0;                   ///< δ
  std::vector<std::size_t> outlier_channels;
  std::vector<double> amplitudes;          ///< a_i, one per outlier channel
  std::vector<double> offsets;             ///< μ per channel; empty = zeros
  std::uint64_t seed = 0;

  /// |O| ≤ channels/16, a_i > 1, indices < channels, offsets sized right.
  void validate() const;
};

/// The default misaligned-mean setup: 2 outlier channels of amplitude 20,
/// offsets drawn from N(0, offset_std²), all seeded. The outlier count is
/// capped at channels/16.
SynthSpec default_synth_spec(std::size_t channels, std::size_t tokens, std::uint64_t seed,
                             double offset_std = 3.0, std::size_t outliers = 2, double amplitude = 20.0);

Tensor gen_synthetic(const SynthSpec& spec);

/// Weights N(0, 2/(fan_in + fan_out)); qkv biases N(0, 0.1²); gains 1 + N(0, 0.1²).
/// `outlier_columns` input columns of every weight get scaled by 8 to give
/// GPTQ something to correct.
ModelBundle build_toy_model(const ModelConfig& config, std::uint64_t seed, std::size_t outlier_columns = 0);

/// Scales weight input columns by the RMSNorm gain that precedes them and
/// resets the gains to 1.
ModelBundle fold_norms(const ModelBundle& bundle);

/// Residual-stream rotation: rows v ↦ Q v. Input-side weights become W·Qᵀ,
/// output-side weights Q·W. Throws ValidationError("fold norms first").
ModelBundle fuse_rres(const ModelBundle& bundle, const Rotation& r);

/// Per-head value rotation R [d × d] in block `block`: W_v ← B·W_v,
/// b_v ← B·b_v, W_o ← W_o·Bᵀ with B = blockdiag(R).
ModelBundle fuse_value_rotation(const ModelBundle& bundle, std::size_t block, const Tensor& r);

/// Plain floating-point forward of one block / the whole model.
Tensor forward_block_fp(const BlockWeights& w, const ModelConfig& cfg, bool norms_folded, const Tensor& x);
Tensor forward_fp(const ModelBundle& bundle, const Tensor& x);
/// Inputs of every block followed by the final output (n_blocks + 1 entries).
std::vector<Tensor> forward_fp_trace(const ModelBundle& bundle, const Tensor& x);

// ---------------------------------------------------------------------------
// Quantized block

struct QuantSpecSet {
  QuantSpec weight = QuantSpec::weight(4);
  QuantSpec activation = QuantSpec::activation(4);
  QuantSpec kv = QuantSpec::kv_cache(4, 16);

  static QuantSpecSet from_bits(int w, int a, int kv, std::size_t head_dim);
  static QuantSpecSet passthrough(std::size_t head_dim) { return from_bits(16, 16, 16, head_dim); }
  void validate() const;
};

/// Learnable per-block quantities.
struct BlockParams {
  Tensor bc_qkv, bc_o, bc_up, bc_down;  ///< bias corrections, [1 × dim]
  Tensor s_o, s_down;                   ///< paired scales (weights ·s, activations /s)
  Tensor sa_o, sa_down;                 ///< unpaired activation scales
  Tensor alpha_qkv, alpha_o, alpha_up, alpha_down, alpha_k, alpha_v;  ///< clip factors, [1 × 1]
  Tensor rv_a;                          ///< Cayley parameter for R_v, [d × d]

  /// b^c = 0, s = s^a = 1, α = 1, A = 0.
  static BlockParams identity(const ModelConfig& cfg);
  static const std::vector<std::string>& names();
  Tensor& field(const std::string& name);
  const Tensor& field(const std::string& name) const;
  std::size_t count() const;
  /// Same as identity(cfg).count() without allocating.
  static std::size_t count_for(const ModelConfig& cfg);

  friend bool operator==(const BlockParams&, const BlockParams&) = default;
};

/// count_for(cfg) / weights_per_block().
double parameter_overhead(const ModelConfig& cfg);

/// Weights after absorbing R_v and s, quantized. bv is the rotated value bias.
struct FrozenWeights {
  Tensor wq, wk, wv, wo, wgate, wup, wdown, bv;
  friend bool operator==(const FrozenWeights&, const FrozenWeights&) = default;
};

/// Values seen at the four activation quantizer sites. `*_pre` is the input
/// before b^c is subtracted; `*_lin` is what the following linear layer
/// effectively multiplies (Q_a(·) + b^c).
struct SiteTrace {
  Tensor qkv_pre, o_pre, up_pre, down_pre;
  Tensor qkv_lin, o_lin, up_lin, down_lin;
  Tensor k_pre, v_pre;  ///< KV-cache quantizer inputs (after R_qk / R_v)
};

/// Graph-side handles for BlockParams.
struct BlockVars {
  ad::Var bc_qkv, bc_o, bc_up, bc_down, s_o, s_down, sa_o, sa_down;
  ad::Var alpha_qkv, alpha_o, alpha_up, alpha_down, alpha_k, alpha_v, rv_a;
};

/// Binds every field as a constant except those named in `trainable`, which
/// take the matching entry of `vars`.
BlockVars bind_params(ad::Graph& g, const BlockParams& p, const std::vector<std::string>& trainable = {},
                      const std::vector<ad::Var>& vars = {});

/// Builds the quantized block on `g`. Without `frozen`, weights are derived
/// from `w` (R_v and s absorbed) and fake-quantized with straight-through
/// gradients; with `frozen` they are used as given.
ad::Var forward_quant_graph(ad::Graph& g, const BlockWeights& w, const ModelConfig& cfg, bool norms_folded,
                            const BlockVars& p, const QuantSpecSet& specs, ad::Var x,
                            const FrozenWeights* frozen = nullptr, SiteTrace* trace = nullptr);

Tensor forward_quant(const BlockWeights& w, const ModelConfig& cfg, bool norms_folded, const BlockParams& p,
                     const QuantSpecSet& specs, const Tensor& x, const FrozenWeights* frozen = nullptr,
                     SiteTrace* trace = nullptr);

/// Whole model. `frozen` may be empty (derive from the bundle) or one per block.
Tensor forward_quant_model(const ModelBundle& bundle, const std::vector<BlockParams>& params,
                           const QuantSpecSet& specs, const Tensor& x,
                           const std::vector<FrozenWeights>& frozen = {});

/// R_v = cayley(A)·H_d and the effective (unquantized) weights it implies.
Tensor value_rotation(const BlockParams& p);
FrozenWeights effective_weights(const BlockWeights& w, const BlockParams& p);

/// Sets b^c at each site, in forward order, to the channel means of that
/// site's pre-subtraction input (which depends on earlier corrections).
BlockParams calibrate_bias(const BlockWeights& w, const ModelConfig& cfg, bool norms_folded, BlockParams p,
                           const QuantSpecSet& specs, const Tensor& x, const FrozenWeights* frozen = nullptr);

}  // namespace baseq
