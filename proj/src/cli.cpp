#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "baseq/cli.hpp"
#include "baseq/config.hpp"
#include "baseq/error.hpp"
#include "baseq/io.hpp"
#include "baseq/pipeline.hpp"
#include "baseq/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
namespace baseq {

namespace {

enum Exit { kOk = 0, kInvalid = 1, kRuntime = 2, kVerifyFailed = 3 };

std::string fmt(const char* s) { return s; }

template <class A0, class... A>
std::string fmt(const char* f, A0 a0, A... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, a0, args...);
  return buf;
}

struct Options {
  std::ostream* out_stream = &std::cout;
  std::ostream* err_stream = &std::cerr;
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string bits;
  std::string out = ".";
  std::string mode;
  std::string model_path;
  std::string calib_path;
  std::string inject_failure;
  std::vector<std::string> reports;
  bool no_rotate = false;
};

RunConfig resolve_config(const Options& o) {
  RunConfig c = o.config_path.empty() ? RunConfig{} : load_run_config(o.config_path);
  if (o.seed) c.seed = *o.seed;
  if (!o.bits.empty()) parse_bits(o.bits, c);
  if (!o.mode.empty() && o.mode.find(',') == std::string::npos && o.mode != "ladder") {
    try {
      c.mode = ablation_mode_from_string(o.mode);
    } catch (const ValidationError& e) {
      throw ValidationError(std::string("--mode: ") + e.what());
    }
  }
  return c;
}

fs::path out_dir(const Options& o) {
  fs::path d(o.out);
  std::error_code ec;
  fs::create_directories(d, ec);
  if (!fs::is_directory(d)) throw ValidationError("--out: cannot create directory " + o.out);
  return d;
}

/// Model and calibration from files when given, else generated from the config.
std::pair<ModelBundle, Tensor> inputs(const Options& o, RunConfig& c) {
  if (o.model_path.empty() != o.calib_path.empty()) throw ValidationError("--model and --calib go together");
  if (o.model_path.empty()) {
    return {build_toy_model(c.model, c.seed, c.outlier_columns), gen_synthetic(c.synth_spec())};
  }
  ModelBundle b = load_bundle(o.model_path);
  const TensorFile cf = read_tensor_file(o.calib_path);
  Tensor calib = calib_from_file(cf);
  // The bundle is the authority on model shape.
  c.model = b.config;
  c.validate();
  if (calib.cols() != b.config.hidden)
    throw ValidationError("--calib: width " + std::to_string(calib.cols()) + " does not match model hidden " +
                          std::to_string(b.config.hidden));
  return {std::move(b), std::move(calib)};
}

json overhead_json(const ModelConfig& m) {
  const double frac = parameter_overhead(m);
  return {{"params_per_block", BlockParams::count_for(m)},
          {"weights_per_block", m.weights_per_block()},
          {"fraction", frac},
          {"below_0_1_percent", frac < 1e-3}};
}

json block_json(const BlockReport& b) {
  return {{"index", b.index},           {"mse_initial", b.mse_initial},     {"mse_stage1", b.mse_stage1},
          {"mse_gptq", b.mse_gptq},     {"mse_final", b.mse_final},         {"stage1_losses", b.stage1_losses},
          {"stage2_losses", b.stage2_losses}};
}

int cmd_gen(const Options& o) {
  RunConfig c = resolve_config(o);
  c.validate();
  const fs::path d = out_dir(o);
  const ModelBundle b = build_toy_model(c.model, c.seed, c.outlier_columns);
  const Tensor calib = gen_synthetic(c.synth_spec());
  save_bundle((d / "model.bqb").string(), b);
  write_tensor_file((d / "calib.bqb").string(), calib_to_file(calib, c.model.seq_len));
  write_text((d / "config.json").string(), dump_json(to_json(c)));
  *o.out_stream << "wrote " << (d / "model.bqb").string() << " and " << (d / "calib.bqb").string() << " ("
                << calib.rows() << " tokens)\n";
  return kOk;
}

int cmd_quantize(const Options& o) {
  RunConfig c = resolve_config(o);
  c.validate();
  const fs::path d = out_dir(o);
  auto [bundle, calib] = inputs(o, c);
  const PipelineConfig pc = c.pipeline();
  pc.validate(bundle.config);

  const json overhead = overhead_json(bundle.config);
  if (!overhead["below_0_1_percent"].get<bool>())
    *o.err_stream << "note: learnable parameters are " << overhead["fraction"].get<double>() * 100.0
                  << "% of block weights (above 0.1% at this model size)\n";

  const QuantizeResult r = quantize_blockwise(bundle, calib, pc);

  json blocks = json::array();
  for (const BlockReport& b : r.blocks) blocks.push_back(block_json(b));
  const json report = {{"schema_version", kReportSchemaVersion},
                       {"kind", "quantize"},
                       {"config", to_json(c)},
                       {"calib_tokens", calib.rows()},
                       {"parameter_overhead", overhead},
                       {"total_mse", r.total_mse},
                       {"peak_param_grads", r.peak_param_grads},
                       {"blocks", blocks},
                       {"sites", to_json(r.sites)}};

  write_tensor_file((d / "quantized.bqb").string(), quantized_to_file(r));
  write_tensor_file((d / "params.bqb").string(), params_to_file(r.params));
  write_text((d / "report.json").string(), dump_json(report));
  write_text((d / "report_blocks.csv").string(), blocks_csv(r.blocks));
  write_text((d / "report_sites.csv").string(), sites_csv(r.sites));
  write_text((d / "report_channels.csv").string(), channels_csv(r.sites));

  for (const BlockReport& b : r.blocks)
    *o.out_stream << fmt("block %zu  mse initial %.6g  stage1 %.6g  gptq %.6g  final %.6g\n", b.index, b.mse_initial,
                b.mse_stage1, b.mse_gptq, b.mse_final);
  *o.out_stream << fmt("total mse %.6g (mode %s)\n", r.total_mse, to_string(c.mode).c_str());
  return kOk;
}

int cmd_analyze(const Options& o) {
  RunConfig c = resolve_config(o);
  c.validate();
  const fs::path d = out_dir(o);
  auto [bundle, calib] = inputs(o, c);
  const ErrorReport rep = analyze_model(bundle, calib, c.bits_a, !o.no_rotate, c.rres, c.seed);
  const json report = {{"schema_version", kReportSchemaVersion},
                       {"kind", "analyze"},
                       {"bits", c.bits_a},
                       {"rotated", !o.no_rotate},
                       {"clip_sigma", kReportClipSigma},
                       {"calib_tokens", calib.rows()},
                       {"sites", to_json(rep)}};
  write_text((d / "analysis.json").string(), dump_json(report));
  write_text((d / "analysis_sites.csv").string(), sites_csv(rep));
  write_text((d / "analysis_channels.csv").string(), channels_csv(rep));
  for (const SiteRecord& s : rep.sites)
    *o.out_stream << fmt("%-12s var_of_means_fraction %.4f  clipping_energy %.4f  rounding_energy %.4g\n", s.name.c_str(),
                s.var_of_means_fraction, s.clipping_energy_fraction, s.rounding_energy);
  return kOk;
}

std::vector<AblationMode> parse_modes(const std::string& s) {
  if (s.empty() || s == "ladder") return ablation_ladder();
  std::vector<AblationMode> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      out.push_back(ablation_mode_from_string(part));
    } catch (const ValidationError& e) {
      throw ValidationError(std::string("--mode: ") + e.what());
    }
  }
  return out;
}

int cmd_ablate(const Options& o) {
  const std::vector<AblationMode> modes = parse_modes(o.mode);
  Options base = o;
  base.mode.clear();
  RunConfig c = resolve_config(base);
  c.validate();
  const fs::path d = out_dir(o);
  auto [bundle, calib] = inputs(o, c);
  const PipelineConfig pc = c.pipeline();
  pc.validate(bundle.config);
  const std::vector<AblationRow> rows = ablate(bundle, calib, pc, modes);
  json jr = json::array();
  for (const AblationRow& r : rows) {
    jr.push_back({{"mode", to_string(r.mode)},
                  {"total_mse", r.total_mse ? json(*r.total_mse) : json("unsupported")},
                  {"block_mse", r.block_mse}});
    if (r.total_mse)
      *o.out_stream << fmt("%-15s total mse %.6g\n", to_string(r.mode).c_str(), *r.total_mse);
    else
      *o.out_stream << fmt("%-15s unsupported\n", to_string(r.mode).c_str());
  }
  const json report = {{"schema_version", kReportSchemaVersion}, {"kind", "ablate"}, {"config", to_json(c)},
                       {"rows", jr}};
  write_text((d / "ablation.json").string(), dump_json(report));
  write_text((d / "ablation.csv").string(), ablation_csv(rows));
  return kOk;
}

int cmd_verify(const Options& o) {
  bool ok = true;
  for (const std::string& path : o.reports) {
    json j;
    try {
      j = json::parse(read_text(path));
    } catch (const json::parse_error& e) {
      throw FormatError(path + ": offset " + std::to_string(e.byte) + ": not valid JSON");
    }
    check_report(j);
    *o.out_stream << fmt("PASS  report %s (%s)\n", path.c_str(), j["kind"].get<std::string>().c_str());
  }
  if (!o.reports.empty()) return kOk;
  const auto t0 = std::chrono::steady_clock::now();
  for (const CheckResult& r : run_verify_suite(o.inject_failure)) {
    *o.out_stream << fmt("%s  %-20s %s\n", r.pass ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str());
    ok = ok && r.pass;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (secs > 60.0) *o.err_stream << fmt("warning: verify suite took %.1f s (budget 60 s)\n", secs);
  if (!ok) {
    *o.err_stream << fmt("verify: one or more checks failed\n");
    return kVerifyFailed;
  }
  return kOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {

  CLI::App app{"baseq: block-wise post-training quantization on a toy transformer", "baseq"};
  app.require_subcommand(1);
  Options o;
  o.out_stream = &out;
  o.err_stream = &err;
  auto common = [&](CLI::App* s) {
    s->add_option("--config", o.config_path, "JSON run configuration");
    s->add_option("--seed", o.seed, "overrides config seed");
    s->add_option("--bits", o.bits, "W,A,KV bit widths, e.g. 4,4,4 (16 = off)");
    s->add_option("--out", o.out, "output directory");
  };
  auto files = [&](CLI::App* s) {
    s->add_option("--model", o.model_path, "model bundle (.bqb)");
    s->add_option("--calib", o.calib_path, "calibration bundle (.bqb)");
  };

  CLI::App* gen = app.add_subcommand("gen", "write a seeded toy model and calibration set");
  common(gen);
  CLI::App* quant = app.add_subcommand("quantize", "run the block-wise pipeline");
  common(quant);
  files(quant);
  quant->add_option("--mode", o.mode, "feature set: rotation_only, learned_rv, bias, unpaired_scale, scale");
  CLI::App* analyze = app.add_subcommand("analyze", "per-site activation error report");
  common(analyze);
  files(analyze);
  analyze->add_flag("--no-rotate", o.no_rotate, "analyze the unrotated model");
  CLI::App* abl = app.add_subcommand("ablate", "run the pipeline once per feature set");
  common(abl);
  files(abl);
  abl->add_option("--mode", o.mode, "comma-separated modes, or 'ladder' (default)");
  CLI::App* ver = app.add_subcommand("verify", "built-in oracle checks");
  ver->add_option("--report", o.reports, "validate these report files instead of running the suite");
  ver->add_option("--inject-failure", o.inject_failure)->group("");

  std::vector<std::string> rev(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kInvalid;
  }

  try {
    if (gen->parsed()) return cmd_gen(o);
    if (quant->parsed()) return cmd_quantize(o);
    if (analyze->parsed()) return cmd_analyze(o);
    if (abl->parsed()) return cmd_ablate(o);
    if (ver->parsed()) return cmd_verify(o);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kInvalid;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  } catch (const NumericalError& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kInvalid;
}

}  // namespace baseq
