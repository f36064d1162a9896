#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "baseq/model_sim.hpp"
#include "baseq/pipeline.hpp"

namespace baseq {

/// Everything a CLI run needs. Missing keys keep their defaults; unknown
/// keys are rejected.
struct RunConfig {
  std::uint64_t seed = 0;

  ModelConfig model;
  std::size_t outlier_columns = 0;

  struct Synth {
    std::size_t sequences = 128;
    double base_std = 1.0;
    std::size_t outlier_channels = 2;
    double amplitude = 20.0;
    double offset_std = 3.0;
  } synth;

  int bits_w = 4, bits_a = 4, bits_kv = 4;
  Granularity gran_w = Granularity::PerChannel;
  Granularity gran_a = Granularity::PerToken;
  Granularity gran_kv = Granularity::PerHead;

  int stage1_epochs = 3;
  int stage2_epochs = 5;
  int steps_per_epoch = 16;
  double lr_scale = 1e-2, lr_clip = 1e-2, lr_bias = 1e-3, lr_rotation = 1e-2;
  bool gptq = true;
  double gptq_damp = 0.01;
  RresKind rres = RresKind::PcaHadamard;
  AblationMode mode = AblationMode::Scale;

  /// ValidationError messages start with the offending field path.
  void validate() const;

  QuantSpecSet specs() const;
  PipelineConfig pipeline() const;
  SynthSpec synth_spec() const;
};

RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& c);
RunConfig load_run_config(const std::string& path);

/// "4,4,4" → bits (w, a, kv).
void parse_bits(const std::string& s, RunConfig& c);

Granularity granularity_from_string(const std::string& s);

}  // namespace baseq
