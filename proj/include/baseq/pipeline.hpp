#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "baseq/error_analysis.hpp"
#include "baseq/model_sim.hpp"
#include "baseq/transforms.hpp"

namespace baseq {

enum class RresKind { PcaHadamard, PcaRandomHadamard, Hadamard, RandomHadamard };
std::string to_string(RresKind k);
RresKind rres_kind_from_string(const std::string& s);

/// Collects every residual-reading weight (q, k, v, gate, up) of every block
/// and builds the residual rotation. Requires folded norms.
Rotation compute_rres(const ModelBundle& bundle, RresKind kind = RresKind::PcaHadamard, std::uint64_t seed = 0);

/// Which learnable pieces are active. Clip factors are always trained.
struct Features {
  bool learn_rv = true;
  bool bias = true;
  bool unpaired_scale = true;
  bool scale = true;

  friend bool operator==(const Features&, const Features&) = default;
};

/// Cumulative ablation ladder; LearnedRres is accepted but unsupported.
enum class AblationMode { RotationOnly, LearnedRv, Bias, UnpairedScale, Scale, LearnedRres };
std::string to_string(AblationMode m);
AblationMode ablation_mode_from_string(const std::string& s);
const std::vector<AblationMode>& ablation_ladder();
/// Throws ValidationError for LearnedRres.
Features features_for(AblationMode m);

struct PipelineConfig {
  QuantSpecSet specs;
  int stage1_epochs = 3;
  int stage2_epochs = 5;
  int steps_per_epoch = 16;  ///< full-batch Adam steps per epoch
  double lr_scale = 1e-2;
  double lr_clip = 1e-2;
  double lr_bias = 1e-3;
  double lr_rotation = 1e-2;
  double gptq_damp = 0.01;
  bool gptq = true;  ///< false: round-to-nearest weights
  RresKind rres = RresKind::PcaHadamard;
  std::uint64_t seed = 0;
  Features features;

  void validate(const ModelConfig& model) const;
};

struct QuantizeResult;
/// Called after each block finishes, with the partial result so far.
using BlockObserver = std::function<void(std::size_t block, const QuantizeResult& partial)>;

struct BlockReport {
  std::size_t index = 0;
  double mse_initial = 0.0;  ///< identity parameters, α = 1, round-to-nearest weights
  double mse_stage1 = 0.0;   ///< after s / R_v training
  double mse_gptq = 0.0;     ///< after weight quantization
  double mse_final = 0.0;    ///< after b^c / s^a / α training
  std::vector<double> stage1_losses;
  std::vector<double> stage2_losses;
};

struct QuantizeResult {
  ModelBundle bundle;  ///< folded and R_res-fused, before per-block quantization
  Tensor rres;         ///< materialized residual rotation
  std::vector<BlockParams> params;
  std::vector<FrozenWeights> frozen;
  std::vector<BlockReport> blocks;
  double total_mse = 0.0;  ///< last block output against the FP model
  ErrorReport sites;       ///< quantizer inputs of the final model
  std::size_t peak_param_grads = 0;
};

/// Staged block-wise calibration. `calib` is [tokens × hidden] in the
/// bundle's original (unrotated) residual basis.
QuantizeResult quantize_blockwise(const ModelBundle& bundle, const Tensor& calib, const PipelineConfig& cfg,
                                  const BlockObserver& observer = {});

/// Per-site activation statistics of the FP model (optionally R_res-rotated),
/// reported at `bits`.
ErrorReport analyze_model(const ModelBundle& bundle, const Tensor& calib, int bits, bool rotate = true,
                          RresKind kind = RresKind::PcaHadamard, std::uint64_t seed = 0);

/// Runs the quantized model of `result` on residual-basis inputs.
Tensor run_quantized(const QuantizeResult& result, const QuantSpecSet& specs, const Tensor& x);

struct AblationRow {
  AblationMode mode;
  std::optional<double> total_mse;  ///< empty when the mode is unsupported
  std::vector<double> block_mse;
};

std::vector<AblationRow> ablate(const ModelBundle& bundle, const Tensor& calib, const PipelineConfig& base,
                                const std::vector<AblationMode>& modes);

}  // namespace baseq
