#include "baseq/pipeline.hpp"

#include <algorithm>
#include <cmath>

#include "baseq/error.hpp"
#include "baseq/optim.hpp"
#include "baseq/quantizers.hpp"
#include "baseq/rng.hpp"

namespace baseq {

std::string to_string(RresKind k) {
  switch (k) {
    case RresKind::PcaHadamard: return "pca_hadamard";
    case RresKind::PcaRandomHadamard: return "pca_random_hadamard";
    case RresKind::Hadamard: return "hadamard";
    case RresKind::RandomHadamard: return "random_hadamard";
  }
  return "?";
}

RresKind rres_kind_from_string(const std::string& s) {
  for (RresKind k : {RresKind::PcaHadamard, RresKind::PcaRandomHadamard, RresKind::Hadamard, RresKind::RandomHadamard})
    if (to_string(k) == s) return k;
  throw ValidationError("unknown rres kind '" + s + "'");
}

Rotation compute_rres(const ModelBundle& bundle, RresKind kind, std::uint64_t seed) {
  if (!bundle.norms_folded) throw ValidationError("fold norms first");
  const std::size_t n = bundle.config.hidden;
  const std::uint64_t sign_seed = mix_seed(seed, 0x7e5);
  if (kind == RresKind::Hadamard) return Rotation::hadamard(n);
  if (kind == RresKind::RandomHadamard) return Rotation::random_hadamard(n, sign_seed);
  std::vector<Tensor> ws;
  for (const BlockWeights& w : bundle.blocks)
    for (const Tensor* t : {&w.wq, &w.wk, &w.wv, &w.wgate, &w.wup}) ws.push_back(*t);
  const Tensor u = pca_basis(ws);
  if (kind == RresKind::PcaHadamard) return compose_rres(u);
  return Rotation::composed(u, Rotation::random_hadamard(n, sign_seed).signs());
}

std::string to_string(AblationMode m) {
  switch (m) {
    case AblationMode::RotationOnly: return "rotation_only";
    case AblationMode::LearnedRv: return "learned_rv";
    case AblationMode::Bias: return "bias";
    case AblationMode::UnpairedScale: return "unpaired_scale";
    case AblationMode::Scale: return "scale";
    case AblationMode::LearnedRres: return "learned_rres";
  }
  return "?";
}

AblationMode ablation_mode_from_string(const std::string& s) {
  for (AblationMode m : {AblationMode::RotationOnly, AblationMode::LearnedRv, AblationMode::Bias,
                         AblationMode::UnpairedScale, AblationMode::Scale, AblationMode::LearnedRres})
    if (to_string(m) == s) return m;
  throw ValidationError("unknown ablation mode '" + s + "'");
}

const std::vector<AblationMode>& ablation_ladder() {
  static const std::vector<AblationMode> k{AblationMode::RotationOnly, AblationMode::LearnedRv, AblationMode::Bias,
                                           AblationMode::UnpairedScale, AblationMode::Scale};
  return k;
}

Features features_for(AblationMode m) {
  if (m == AblationMode::LearnedRres) throw ValidationError("learned_rres: unsupported");
  const int level = int(m);
  Features f;
  f.learn_rv = level >= int(AblationMode::LearnedRv);
  f.bias = level >= int(AblationMode::Bias);
  f.unpaired_scale = level >= int(AblationMode::UnpairedScale);
  f.scale = level >= int(AblationMode::Scale);
  return f;
}

void PipelineConfig::validate(const ModelConfig& model) const {
  model.validate();
  specs.validate();
  if (specs.kv.head_dim != model.head_dim())
    throw ValidationError("kv quantizer head_dim " + std::to_string(specs.kv.head_dim) + " != model head_dim " +
                          std::to_string(model.head_dim()));
  if (stage1_epochs < 0 || stage2_epochs < 0) throw ValidationError("epochs must be non-negative");
  if (steps_per_epoch < 1) throw ValidationError("steps_per_epoch must be positive");
  for (double lr : {lr_scale, lr_clip, lr_bias, lr_rotation})
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ValidationError("learning rates must be positive");
  if (!(gptq_damp >= 0.0)) throw ValidationError("gptq_damp must be non-negative");
}

namespace {

constexpr double kScaleFloor = 1e-4;
constexpr double kClipFloor = 0.05;

const std::vector<std::string> kActAlphas{"alpha_qkv", "alpha_o", "alpha_up", "alpha_down"};

Tensor centred(const Tensor& pre, const Tensor& bc) { return add_row(pre, scale(bc, -1.0)); }

struct BlockContext {
  const BlockWeights& w;
  const ModelConfig& cfg;
  const QuantSpecSet& specs;
  const Tensor& x;       // quantized-chain input
  const Tensor& target;  // FP block output
};

double block_loss(const BlockContext& c, const BlockParams& p, const FrozenWeights* frozen) {
  return mse(forward_quant(c.w, c.cfg, true, p, c.specs, c.x, frozen), c.target);
}

Parameter make_param(const BlockParams& p, const std::string& name, const PipelineConfig& cfg) {
  Parameter out{name, p.field(name)};
  if (name.rfind("bc_", 0) == 0) {
    out.lr = cfg.lr_bias;
  } else if (name.rfind("alpha_", 0) == 0) {
    out.lr = cfg.lr_clip;
    out.lower = kClipFloor;
    out.upper = 1.0;
  } else if (name == "rv_a") {
    out.lr = cfg.lr_rotation;
  } else {
    out.lr = cfg.lr_scale;
    out.lower = kScaleFloor;
  }
  return out;
}

/// Trains `names` on the block objective; returns the best-seen loss trajectory.
std::vector<double> train(const BlockContext& c, BlockParams& p, const std::vector<std::string>& names,
                          const FrozenWeights* frozen, int steps, const PipelineConfig& cfg) {
  if (names.empty() || steps == 0) return {block_loss(c, p, frozen)};
  ParameterSet ps;
  for (const std::string& n : names) ps.push_back(make_param(p, n, cfg));
  const BlockParams base = p;
  Objective obj = [&](ad::Graph& g, const std::vector<ad::Var>& vars) {
    const BlockVars bv = bind_params(g, base, names, vars);
    ad::Var y = forward_quant_graph(g, c.w, c.cfg, true, bv, c.specs, g.constant(c.x), frozen);
    return ad::mse(y, c.target);
  };
  OptimSchedule sched;
  sched.steps = steps;
  const OptimResult r = optimize(obj, ps, sched);
  for (const Parameter& q : r.params) p.field(q.name) = q.value;
  return r.losses;
}

/// Seeds every activation and KV clip factor by grid search on its current input.
void seed_clip_factors(const BlockContext& c, BlockParams& p) {
  const QuantSpec& act = c.specs.activation;
  SiteTrace tr;
  forward_quant(c.w, c.cfg, true, p, c.specs, c.x, nullptr, &tr);
  if (act.enabled()) {
    p.alpha_qkv = Tensor::scalar(search_clip_factor(centred(tr.qkv_pre, p.bc_qkv), act));
    p.alpha_o = Tensor::scalar(search_clip_factor(centred(tr.o_pre, p.bc_o), act));
    p.alpha_up = Tensor::scalar(search_clip_factor(centred(tr.up_pre, p.bc_up), act));
    p.alpha_down = Tensor::scalar(search_clip_factor(centred(tr.down_pre, p.bc_down), act));
  }
  if (c.specs.kv.enabled()) {
    p.alpha_k = Tensor::scalar(search_clip_factor(tr.k_pre, c.specs.kv));
    p.alpha_v = Tensor::scalar(search_clip_factor(tr.v_pre, c.specs.kv));
  }
}

FrozenWeights quantize_weights(const BlockContext& c, const BlockParams& p, const PipelineConfig& cfg) {
  FrozenWeights eff = effective_weights(c.w, p);
  const QuantSpec& ws = c.specs.weight;
  if (!ws.enabled()) return eff;
  SiteTrace tr;
  forward_quant(c.w, c.cfg, true, p, c.specs, c.x, nullptr, &tr);
  auto q = [&](const Tensor& w, const Tensor& x) {
    return cfg.gptq ? gptq_quantize(w, x, ws, cfg.gptq_damp) : rtn_quantize(w, ws);
  };
  FrozenWeights out;
  out.wq = q(eff.wq, tr.qkv_lin);
  out.wk = q(eff.wk, tr.qkv_lin);
  out.wv = q(eff.wv, tr.qkv_lin);
  out.wo = q(eff.wo, tr.o_lin);
  out.wgate = q(eff.wgate, tr.up_lin);
  out.wup = q(eff.wup, tr.up_lin);
  out.wdown = q(eff.wdown, tr.down_lin);
  out.bv = eff.bv;
  return out;
}

std::vector<std::string> stage1_names(const Features& f) {
  std::vector<std::string> n;
  if (f.scale) n.insert(n.end(), {"s_o", "s_down"});
  if (f.learn_rv) n.push_back("rv_a");
  return n;
}

std::vector<std::string> stage2_names(const Features& f, const QuantSpecSet& specs) {
  std::vector<std::string> n;
  const bool act = specs.activation.enabled();
  if (f.bias && act) n.insert(n.end(), {"bc_qkv", "bc_o", "bc_up", "bc_down"});
  if (f.unpaired_scale && act) n.insert(n.end(), {"sa_o", "sa_down"});
  if (act) n.insert(n.end(), kActAlphas.begin(), kActAlphas.end());
  if (specs.kv.enabled()) n.insert(n.end(), {"alpha_k", "alpha_v"});
  return n;
}

std::string stage_error(std::size_t block, const char* stage, const std::exception& e) {
  return "block " + std::to_string(block) + " " + stage + ": " + e.what();
}

}  // namespace

QuantizeResult quantize_blockwise(const ModelBundle& bundle, const Tensor& calib, const PipelineConfig& cfg,
                                  const BlockObserver& observer) {
  bundle.validate();
  cfg.validate(bundle.config);
  if (calib.rank() != 2 || calib.cols() != bundle.config.hidden)
    throw ValidationError("calibration must be [tokens x " + std::to_string(bundle.config.hidden) + "], got " +
                          shape_str(calib.shape()));
  if (calib.rows() == 0 || calib.rows() % bundle.config.seq_len != 0)
    throw ValidationError("calibration token count must be a positive multiple of seq_len");
  if (!calib.all_finite()) throw ValidationError("calibration contains non-finite values");

  ad::Footprint::reset();
  const std::size_t grads_before = ad::Footprint::live_param_grads();

  QuantizeResult res;
  const ModelBundle folded = fold_norms(bundle);
  const Rotation rres = compute_rres(folded, cfg.rres, cfg.seed);
  res.rres = rres.materialize();
  res.bundle = fuse_rres(folded, rres);
  const ModelConfig& mc = res.bundle.config;

  const std::vector<Tensor> fp = forward_fp_trace(res.bundle, rres.apply(calib));
  Tensor x = fp.front();
  const int steps1 = cfg.stage1_epochs * cfg.steps_per_epoch;
  const int steps2 = cfg.stage2_epochs * cfg.steps_per_epoch;

  for (std::size_t b = 0; b < mc.n_blocks; ++b) {
    const BlockContext ctx{res.bundle.blocks[b], mc, cfg.specs, x, fp[b + 1]};
    BlockReport rep;
    rep.index = b;
    BlockParams p = BlockParams::identity(mc);
    {
      const FrozenWeights rtn = [&] {
        FrozenWeights f = effective_weights(ctx.w, p);
        if (cfg.specs.weight.enabled())
          for (Tensor* t : {&f.wq, &f.wk, &f.wv, &f.wo, &f.wgate, &f.wup, &f.wdown})
            *t = rtn_quantize(*t, cfg.specs.weight);
        return f;
      }();
      rep.mse_initial = block_loss(ctx, p, &rtn);
    }

    try {
      seed_clip_factors(ctx, p);
      if (cfg.features.scale && cfg.features.learn_rv) {
        // R_v alone first, then s and R_v together from that point.
        rep.stage1_losses = train(ctx, p, {"rv_a"}, nullptr, steps1, cfg);
        const std::vector<double> joint = train(ctx, p, stage1_names(cfg.features), nullptr, steps1, cfg);
        rep.stage1_losses.insert(rep.stage1_losses.end(), joint.begin(), joint.end());
      } else {
        rep.stage1_losses = train(ctx, p, stage1_names(cfg.features), nullptr, steps1, cfg);
      }
    } catch (const NumericalError& e) {
      throw NumericalError(stage_error(b, "stage 1", e));
    }
    rep.mse_stage1 = *std::min_element(rep.stage1_losses.begin(), rep.stage1_losses.end());

    FrozenWeights frozen;
    try {
      frozen = quantize_weights(ctx, p, cfg);
    } catch (const NumericalError& e) {
      throw NumericalError(stage_error(b, "gptq", e));
    }
    rep.mse_gptq = block_loss(ctx, p, &frozen);

    try {
      if (cfg.features.bias && cfg.specs.activation.enabled()) {
        // Start from the channel means unless zero correction is already better.
        BlockParams with_means = calibrate_bias(ctx.w, mc, true, p, cfg.specs, x, &frozen);
        if (block_loss(ctx, with_means, &frozen) < rep.mse_gptq) p = with_means;
      }
      rep.stage2_losses = train(ctx, p, stage2_names(cfg.features, cfg.specs), &frozen, steps2, cfg);
    } catch (const NumericalError& e) {
      throw NumericalError(stage_error(b, "stage 2", e));
    }
    rep.mse_final = block_loss(ctx, p, &frozen);

    SiteTrace tr;
    const Tensor y = forward_quant(ctx.w, mc, true, p, cfg.specs, x, &frozen, &tr);
    const int abits = cfg.specs.activation.bits;
    for (SiteInput s : std::vector<SiteInput>{{"qkv", centred(tr.qkv_pre, p.bc_qkv), frozen.wq, abits},
                                              {"o", centred(tr.o_pre, p.bc_o), frozen.wo, abits},
                                              {"up", centred(tr.up_pre, p.bc_up), frozen.wgate, abits},
                                              {"down", centred(tr.down_pre, p.bc_down), frozen.wdown, abits}}) {
      s.name = "block" + std::to_string(b) + "." + s.name;
      res.sites.sites.push_back(emit_report({s}, mix_seed(cfg.seed, b)).sites.front());
    }

    x = y;
    res.params.push_back(std::move(p));
    res.frozen.push_back(std::move(frozen));
    res.blocks.push_back(std::move(rep));
    if (observer) observer(b, res);
  }
  res.total_mse = mse(x, fp.back());
  res.peak_param_grads = ad::Footprint::peak_param_grads() - grads_before;
  return res;
}

ErrorReport analyze_model(const ModelBundle& bundle, const Tensor& calib, int bits, bool rotate, RresKind kind,
                          std::uint64_t seed) {
  bundle.validate();
  if (calib.rank() != 2 || calib.cols() != bundle.config.hidden || calib.rows() == 0 ||
      calib.rows() % bundle.config.seq_len != 0)
    throw ValidationError("calibration must be [k*seq_len x " + std::to_string(bundle.config.hidden) + "], got " +
                          shape_str(calib.shape()));
  ModelBundle m = fold_norms(bundle);
  Tensor x = calib;
  if (rotate) {
    const Rotation r = compute_rres(m, kind, seed);
    m = fuse_rres(m, r);
    x = r.apply(calib);
  }
  const ModelConfig& mc = m.config;
  const QuantSpecSet off = QuantSpecSet::passthrough(mc.head_dim());
  ErrorReport rep;
  for (std::size_t b = 0; b < mc.n_blocks; ++b) {
    const BlockParams p = BlockParams::identity(mc);
    const BlockWeights& w = m.blocks[b];
    SiteTrace tr;
    const Tensor y = forward_quant(w, mc, true, p, off, x, nullptr, &tr);
    for (SiteInput s : std::vector<SiteInput>{{"qkv", tr.qkv_pre, w.wq, bits},
                                              {"o", tr.o_pre, w.wo, bits},
                                              {"up", tr.up_pre, w.wgate, bits},
                                              {"down", tr.down_pre, fwht(w.wdown), bits}}) {
      s.name = "block" + std::to_string(b) + "." + s.name;
      rep.sites.push_back(emit_report({s}, mix_seed(seed, b)).sites.front());
    }
    x = y;
  }
  return rep;
}

Tensor run_quantized(const QuantizeResult& result, const QuantSpecSet& specs, const Tensor& x) {
  const Rotation r = Rotation::explicit_matrix(result.rres);
  return r.apply_inverse(forward_quant_model(result.bundle, result.params, specs, r.apply(x), result.frozen));
}

std::vector<AblationRow> ablate(const ModelBundle& bundle, const Tensor& calib, const PipelineConfig& base,
                                const std::vector<AblationMode>& modes) {
  if (modes.empty()) throw ValidationError("ablate: no modes");
  std::vector<AblationRow> rows;
  for (AblationMode m : modes) {
    AblationRow row{m, std::nullopt, {}};
    if (m != AblationMode::LearnedRres) {
      PipelineConfig cfg = base;
      cfg.features = features_for(m);
      const QuantizeResult r = quantize_blockwise(bundle, calib, cfg);
      row.total_mse = r.total_mse;
      for (const BlockReport& br : r.blocks) row.block_mse.push_back(br.mse_final);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace baseq
