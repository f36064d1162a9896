#include "baseq/config.hpp"

#include <cmath>
#include <set>
#include <sstream>

#include "baseq/error.hpp"
#include "baseq/io.hpp"

namespace baseq {

using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& msg) { throw ValidationError(path + ": " + msg); }

/// Walks one JSON object, reading known keys and rejecting the rest.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_.empty() ? "config" : path_, "expected an object");
  }
  ~Section() noexcept(false) {
    if (std::uncaught_exceptions()) return;
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) fail(key(k), "unknown key");
  }

  std::string key(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }
  bool has(const std::string& k) {
    seen_.insert(k);
    return j_.contains(k);
  }
  const json& sub(const std::string& k) { return j_.at(k); }

  void get(const std::string& k, std::size_t& out) {
    if (!has(k)) return;
    const json& v = j_.at(k);
    if (!v.is_number_unsigned()) fail(key(k), "expected a non-negative integer");
    out = v.get<std::size_t>();
  }
  void get(const std::string& k, std::uint64_t& out, int) {
    std::size_t tmp = out;
    get(k, tmp);
    out = tmp;
  }
  void get(const std::string& k, int& out) {
    if (!has(k)) return;
    const json& v = j_.at(k);
    if (!v.is_number_integer()) fail(key(k), "expected an integer");
    out = v.get<int>();
  }
  void get(const std::string& k, double& out) {
    if (!has(k)) return;
    const json& v = j_.at(k);
    if (!v.is_number()) fail(key(k), "expected a number");
    out = v.get<double>();
  }
  void get(const std::string& k, bool& out) {
    if (!has(k)) return;
    const json& v = j_.at(k);
    if (!v.is_boolean()) fail(key(k), "expected true or false");
    out = v.get<bool>();
  }
  template <class E, class F>
  void get_enum(const std::string& k, E& out, F parse) {
    if (!has(k)) return;
    const json& v = j_.at(k);
    if (!v.is_string()) fail(key(k), "expected a string");
    try {
      out = parse(v.get<std::string>());
    } catch (const ValidationError& e) {
      fail(key(k), e.what());
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void check_bits(int b, const std::string& path) {
  if (!((b >= 2 && b <= 8) || b >= QuantSpec::kPassthroughBits))
    fail(path, "bits must be in 2..8 or >= 16 for passthrough (got " + std::to_string(b) + ")");
}

void check_pow2(std::size_t v, const std::string& path) {
  if (v == 0 || (v & (v - 1)) != 0) fail(path, "dimension must be 2^k (got " + std::to_string(v) + ")");
}

void check_lr(double v, const std::string& path) {
  if (!(v > 0.0) || !std::isfinite(v)) fail(path, "learning rate must be positive");
}

}  // namespace

Granularity granularity_from_string(const std::string& s) {
  for (Granularity g : {Granularity::PerTensor, Granularity::PerChannel, Granularity::PerToken, Granularity::PerHead})
    if (to_string(g) == s) return g;
  throw ValidationError("unknown granularity '" + s + "'");
}

void RunConfig::validate() const {
  if (model.hidden == 0) fail("model.hidden", "must be positive");
  check_pow2(model.hidden, "model.hidden");
  if (model.heads == 0 || model.hidden % model.heads != 0) fail("model.heads", "must divide model.hidden");
  check_pow2(model.head_dim(), "model.heads");
  check_pow2(model.mlp_dim, "model.mlp_dim");
  if (model.n_blocks == 0) fail("model.n_blocks", "must be positive");
  if (model.seq_len == 0) fail("model.seq_len", "must be positive");
  if (!(model.norm_eps > 0.0)) fail("model.norm_eps", "must be positive");
  if (outlier_columns > model.hidden) fail("model.outlier_columns", "exceeds model.hidden");

  if (synth.sequences == 0) fail("synth.sequences", "must be positive");
  if (!(synth.base_std > 0.0) || !std::isfinite(synth.base_std)) fail("synth.base_std", "must be positive");
  if (synth.outlier_channels > model.hidden / 16)
    fail("synth.outlier_channels", "at most model.hidden/16 (" + std::to_string(model.hidden / 16) + ")");
  if (synth.outlier_channels > 0 && !(synth.amplitude > 1.0)) fail("synth.amplitude", "must exceed 1");
  if (!(synth.offset_std >= 0.0) || !std::isfinite(synth.offset_std)) fail("synth.offset_std", "must be >= 0");

  check_bits(bits_w, "bits.w");
  check_bits(bits_a, "bits.a");
  check_bits(bits_kv, "bits.kv");
  if (gran_w != Granularity::PerChannel && gran_w != Granularity::PerTensor)
    fail("granularity.w", "weights support per-channel or per-tensor");
  if (gran_a != Granularity::PerToken && gran_a != Granularity::PerTensor)
    fail("granularity.a", "activations support per-token or per-tensor");
  if (gran_kv == Granularity::PerChannel) fail("granularity.kv", "kv cache supports per-head, per-token or per-tensor");

  if (stage1_epochs < 0) fail("schedule.stage1_epochs", "must be >= 0");
  if (stage2_epochs < 0) fail("schedule.stage2_epochs", "must be >= 0");
  if (steps_per_epoch < 1) fail("schedule.steps_per_epoch", "must be positive");
  check_lr(lr_scale, "schedule.lr_scale");
  check_lr(lr_clip, "schedule.lr_clip");
  check_lr(lr_bias, "schedule.lr_bias");
  check_lr(lr_rotation, "schedule.lr_rotation");
  if (!(gptq_damp >= 0.0) || !std::isfinite(gptq_damp)) fail("schedule.gptq_damp", "must be >= 0");
  if (mode == AblationMode::LearnedRres) fail("mode", "learned_rres is unsupported");
}

QuantSpecSet RunConfig::specs() const {
  QuantSpecSet s = QuantSpecSet::from_bits(bits_w, bits_a, bits_kv, model.head_dim());
  s.weight.granularity = gran_w;
  s.activation.granularity = gran_a;
  s.kv.granularity = gran_kv;
  return s;
}

PipelineConfig RunConfig::pipeline() const {
  PipelineConfig p;
  p.specs = specs();
  p.stage1_epochs = stage1_epochs;
  p.stage2_epochs = stage2_epochs;
  p.steps_per_epoch = steps_per_epoch;
  p.lr_scale = lr_scale;
  p.lr_clip = lr_clip;
  p.lr_bias = lr_bias;
  p.lr_rotation = lr_rotation;
  p.gptq = gptq;
  p.gptq_damp = gptq_damp;
  p.rres = rres;
  p.seed = seed;
  p.features = features_for(mode);
  return p;
}

SynthSpec RunConfig::synth_spec() const {
  SynthSpec s = default_synth_spec(model.hidden, synth.sequences * model.seq_len, seed, synth.offset_std,
                                   synth.outlier_channels, synth.amplitude);
  s.base_std = synth.base_std;
  return s;
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  Section top(j, "");
  top.get("seed", c.seed, 0);
  if (top.has("model")) {
    Section s(top.sub("model"), "model");
    s.get("hidden", c.model.hidden);
    s.get("heads", c.model.heads);
    s.get("mlp_dim", c.model.mlp_dim);
    s.get("n_blocks", c.model.n_blocks);
    s.get("seq_len", c.model.seq_len);
    s.get("qkv_bias", c.model.qkv_bias);
    s.get("causal", c.model.causal);
    s.get("norm_eps", c.model.norm_eps);
    s.get("outlier_columns", c.outlier_columns);
  }
  if (top.has("synth")) {
    Section s(top.sub("synth"), "synth");
    s.get("sequences", c.synth.sequences);
    s.get("base_std", c.synth.base_std);
    s.get("outlier_channels", c.synth.outlier_channels);
    s.get("amplitude", c.synth.amplitude);
    s.get("offset_std", c.synth.offset_std);
  }
  if (top.has("bits")) {
    Section s(top.sub("bits"), "bits");
    s.get("w", c.bits_w);
    s.get("a", c.bits_a);
    s.get("kv", c.bits_kv);
  }
  if (top.has("granularity")) {
    Section s(top.sub("granularity"), "granularity");
    s.get_enum("w", c.gran_w, granularity_from_string);
    s.get_enum("a", c.gran_a, granularity_from_string);
    s.get_enum("kv", c.gran_kv, granularity_from_string);
  }
  if (top.has("schedule")) {
    Section s(top.sub("schedule"), "schedule");
    s.get("stage1_epochs", c.stage1_epochs);
    s.get("stage2_epochs", c.stage2_epochs);
    s.get("steps_per_epoch", c.steps_per_epoch);
    s.get("lr_scale", c.lr_scale);
    s.get("lr_clip", c.lr_clip);
    s.get("lr_bias", c.lr_bias);
    s.get("lr_rotation", c.lr_rotation);
    s.get("gptq", c.gptq);
    s.get("gptq_damp", c.gptq_damp);
  }
  top.get_enum("rres", c.rres, rres_kind_from_string);
  top.get_enum("mode", c.mode, ablation_mode_from_string);
  return c;
}

json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"model",
           {{"hidden", c.model.hidden},
            {"heads", c.model.heads},
            {"mlp_dim", c.model.mlp_dim},
            {"n_blocks", c.model.n_blocks},
            {"seq_len", c.model.seq_len},
            {"qkv_bias", c.model.qkv_bias},
            {"causal", c.model.causal},
            {"norm_eps", c.model.norm_eps},
            {"outlier_columns", c.outlier_columns}}},
          {"synth",
           {{"sequences", c.synth.sequences},
            {"base_std", c.synth.base_std},
            {"outlier_channels", c.synth.outlier_channels},
            {"amplitude", c.synth.amplitude},
            {"offset_std", c.synth.offset_std}}},
          {"bits", {{"w", c.bits_w}, {"a", c.bits_a}, {"kv", c.bits_kv}}},
          {"granularity", {{"w", to_string(c.gran_w)}, {"a", to_string(c.gran_a)}, {"kv", to_string(c.gran_kv)}}},
          {"schedule",
           {{"stage1_epochs", c.stage1_epochs},
            {"stage2_epochs", c.stage2_epochs},
            {"steps_per_epoch", c.steps_per_epoch},
            {"lr_scale", c.lr_scale},
            {"lr_clip", c.lr_clip},
            {"lr_bias", c.lr_bias},
            {"lr_rotation", c.lr_rotation},
            {"gptq", c.gptq},
            {"gptq_damp", c.gptq_damp}}},
          {"rres", to_string(c.rres)},
          {"mode", to_string(c.mode)}};
}

RunConfig load_run_config(const std::string& path) {
  const std::string text = read_text(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(path + ": offset " + std::to_string(e.byte) + ": not valid JSON");
  }
  return run_config_from_json(j);
}

void parse_bits(const std::string& s, RunConfig& c) {
  std::stringstream ss(s);
  std::string part;
  std::vector<int> v;
  while (std::getline(ss, part, ',')) {
    try {
      std::size_t used = 0;
      v.push_back(std::stoi(part, &used));
      if (used != part.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      fail("--bits", "expected W,A,KV integers, got '" + s + "'");
    }
  }
  if (v.size() != 3) fail("--bits", "expected W,A,KV integers, got '" + s + "'");
  c.bits_w = v[0];
  c.bits_a = v[1];
  c.bits_kv = v[2];
}

}  // namespace baseq
