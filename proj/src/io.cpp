#include "baseq/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "baseq/error.hpp"

namespace baseq {

using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little, "bundle I/O assumes a little-endian host");

std::string at(std::size_t offset) { return "offset " + std::to_string(offset) + ": "; }

std::size_t align_up(std::size_t x) { return (x + kTensorAlign - 1) / kTensorAlign * kTensorAlign; }

void put_u64(std::string& out, std::uint64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.append(buf, 8);
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

const Tensor& TensorFile::get(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw FormatError("bundle: missing tensor '" + name + "'");
}

bool TensorFile::has(const std::string& name) const {
  return std::any_of(tensors.begin(), tensors.end(), [&](const auto& p) { return p.first == name; });
}

std::string encode_tensor_file(const TensorFile& f) {
  // Offsets depend on the header length, which depends on the offsets;
  // iterate until the layout is stable (two passes in practice).
  json entries = json::array();
  for (const auto& [name, t] : f.tensors) {
    if (!t.all_finite()) throw ValidationError("bundle: tensor '" + name + "' has non-finite values");
    entries.push_back({{"name", name}, {"dtype", "f32"}, {"shape", t.shape()}, {"offset", 0},
                       {"nbytes", t.size() * 4}});
  }
  json header = {{"format", "baseq-bundle"}, {"version", kFileFormatVersion}, {"kind", f.kind},
                 {"meta", f.meta}, {"tensors", entries}};
  std::string text;
  for (int pass = 0; pass < 8; ++pass) {
    text = header.dump();
    std::size_t pos = align_up(16 + text.size());
    bool changed = false;
    for (auto& e : header["tensors"]) {
      if (e["offset"].get<std::size_t>() != pos) changed = true;
      e["offset"] = pos;
      pos = align_up(pos + e["nbytes"].get<std::size_t>());
    }
    if (!changed) break;
  }
  text = header.dump();

  std::string out(kBundleMagic, 8);
  put_u64(out, text.size());
  out += text;
  std::size_t i = 0;
  for (const auto& [name, t] : f.tensors) {
    const std::size_t off = header["tensors"][i++]["offset"].get<std::size_t>();
    out.resize(off, '\0');
    for (double v : t.storage()) {
      const float x = static_cast<float>(v);
      char buf[4];
      std::memcpy(buf, &x, 4);
      out.append(buf, 4);
    }
  }
  return out;
}

TensorFile decode_tensor_file(const std::string& bytes) {
  if (bytes.size() < 16) throw FormatError(at(0) + "file too short for a bundle header (" +
                                           std::to_string(bytes.size()) + " bytes)");
  if (std::memcmp(bytes.data(), kBundleMagic, 8) != 0) throw FormatError(at(0) + "bad magic, not a baseq bundle");
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, bytes.data() + 8, 8);
  if (hlen > bytes.size() - 16)
    throw FormatError(at(8) + "header length " + std::to_string(hlen) + " runs past end of file (" +
                      std::to_string(bytes.size()) + " bytes)");
  json header;
  try {
    header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + std::ptrdiff_t(hlen));
  } catch (const json::parse_error& e) {
    throw FormatError(at(16 + e.byte - 1) + "header is not valid JSON");
  }
  const std::size_t data_start = 16 + std::size_t(hlen);
  TensorFile f;
  try {
    if (header.value("format", "") != "baseq-bundle") throw FormatError(at(16) + "header format is not baseq-bundle");
    if (header.value("version", 0) != kFileFormatVersion)
      throw FormatError(at(16) + "unsupported version " + header.value("version", json()).dump());
    f.kind = header.at("kind").get<std::string>();
    f.meta = header.value("meta", json::object());
    std::size_t prev_end = data_start;
    for (const auto& e : header.at("tensors")) {
      const std::string name = e.at("name").get<std::string>();
      const std::size_t off = e.at("offset").get<std::size_t>();
      const std::size_t nbytes = e.at("nbytes").get<std::size_t>();
      const Shape shape = e.at("shape").get<Shape>();
      const std::string where = at(off) + "tensor '" + name + "': ";
      if (e.at("dtype") != "f32") throw FormatError(where + "dtype must be f32");
      if (shape_numel(shape) * 4 != nbytes)
        throw FormatError(where + "shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape) * 4) +
                          " bytes, header says " + std::to_string(nbytes));
      if (off % kTensorAlign != 0) throw FormatError(where + "not 64-byte aligned");
      if (off < prev_end) throw FormatError(where + "overlaps the header or the previous tensor");
      if (off > bytes.size() || nbytes > bytes.size() - off)
        throw FormatError(where + "data runs past end of file (" + std::to_string(bytes.size()) + " bytes)");
      std::vector<double> data(nbytes / 4);
      for (std::size_t i = 0; i < data.size(); ++i) {
        float x;
        std::memcpy(&x, bytes.data() + off + 4 * i, 4);
        if (!std::isfinite(x)) throw FormatError(at(off + 4 * i) + "tensor '" + name + "' has a non-finite value");
        data[i] = x;
      }
      f.tensors.emplace_back(name, Tensor(shape, std::move(data)));
      prev_end = off + nbytes;
    }
  } catch (const json::exception& e) {
    throw FormatError(at(16) + "malformed header: " + e.what());
  }
  return f;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ValidationError("cannot write " + path);
  os.write(text.data(), std::streamsize(text.size()));
  if (!os) throw ValidationError("cannot write " + path);
}

std::string read_text(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot read " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_tensor_file(const std::string& path, const TensorFile& f) { write_text(path, encode_tensor_file(f)); }

TensorFile read_tensor_file(const std::string& path) {
  try {
    return decode_tensor_file(read_text(path));
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Model bundles

json to_json(const ModelConfig& c) {
  return {{"hidden", c.hidden}, {"heads", c.heads},       {"mlp_dim", c.mlp_dim},     {"n_blocks", c.n_blocks},
          {"seq_len", c.seq_len}, {"qkv_bias", c.qkv_bias}, {"causal", c.causal}, {"norm_eps", c.norm_eps}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.hidden = j.at("hidden").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.mlp_dim = j.at("mlp_dim").get<std::size_t>();
  c.n_blocks = j.at("n_blocks").get<std::size_t>();
  c.seq_len = j.at("seq_len").get<std::size_t>();
  c.qkv_bias = j.at("qkv_bias").get<bool>();
  c.causal = j.at("causal").get<bool>();
  c.norm_eps = j.at("norm_eps").get<double>();
  return c;
}

namespace {

const char* const kWeightNames[] = {"wq", "wk", "wv", "wo", "wgate", "wup", "wdown",
                                    "bq", "bk", "bv", "norm1", "norm2"};

Tensor& weight_field(BlockWeights& w, const std::string& n) {
  if (n == "wq") return w.wq;
  if (n == "wk") return w.wk;
  if (n == "wv") return w.wv;
  if (n == "wo") return w.wo;
  if (n == "wgate") return w.wgate;
  if (n == "wup") return w.wup;
  if (n == "wdown") return w.wdown;
  if (n == "bq") return w.bq;
  if (n == "bk") return w.bk;
  if (n == "bv") return w.bv;
  if (n == "norm1") return w.norm1;
  return w.norm2;
}

std::string block_key(std::size_t b, const std::string& n) { return "blocks." + std::to_string(b) + "." + n; }

template <class F>
TensorFile parse_meta(const TensorFile& f, const std::string& kind, F fn) {
  if (f.kind != kind) throw FormatError("expected a '" + kind + "' file, got '" + f.kind + "'");
  try {
    fn();
  } catch (const json::exception& e) {
    throw FormatError("malformed " + kind + " metadata: " + std::string(e.what()));
  }
  return f;
}

}  // namespace

TensorFile bundle_to_file(const ModelBundle& b) {
  b.validate();
  TensorFile f;
  f.kind = "model";
  f.meta = {{"config", to_json(b.config)}, {"norms_folded", b.norms_folded}};
  for (std::size_t k = 0; k < b.blocks.size(); ++k) {
    BlockWeights w = b.blocks[k];
    for (const char* n : kWeightNames) {
      const Tensor& t = weight_field(w, n);
      if (!t.empty()) f.tensors.emplace_back(block_key(k, n), t);
    }
  }
  return f;
}

ModelBundle bundle_from_file(const TensorFile& f) {
  ModelBundle b;
  parse_meta(f, "model", [&] {
    b.config = model_config_from_json(f.meta.at("config"));
    b.norms_folded = f.meta.at("norms_folded").get<bool>();
  });
  b.blocks.resize(b.config.n_blocks);
  for (std::size_t k = 0; k < b.blocks.size(); ++k)
    for (const char* n : kWeightNames)
      if (f.has(block_key(k, n))) weight_field(b.blocks[k], n) = f.get(block_key(k, n));
  try {
    b.validate();
  } catch (const ValidationError& e) {
    throw FormatError(std::string("bundle contents invalid: ") + e.what());
  }
  return b;
}

void save_bundle(const std::string& path, const ModelBundle& b) { write_tensor_file(path, bundle_to_file(b)); }

ModelBundle load_bundle(const std::string& path) {
  const TensorFile f = read_tensor_file(path);
  try {
    return bundle_from_file(f);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

TensorFile calib_to_file(const Tensor& calib, std::size_t seq_len) {
  TensorFile f;
  f.kind = "calib";
  f.meta = {{"seq_len", seq_len}};
  f.tensors.emplace_back("calib", calib);
  return f;
}

Tensor calib_from_file(const TensorFile& f) {
  parse_meta(f, "calib", [] {});
  const Tensor& c = f.get("calib");
  if (c.rank() != 2) throw FormatError("calibration tensor must be 2-D, got " + shape_str(c.shape()));
  return c;
}

TensorFile quantized_to_file(const QuantizeResult& r) {
  TensorFile f;
  f.kind = "quantized";
  f.meta = {{"config", to_json(r.bundle.config)}, {"norms_folded", r.bundle.norms_folded}};
  f.tensors.emplace_back("rres", r.rres);
  for (std::size_t k = 0; k < r.frozen.size(); ++k) {
    const FrozenWeights& q = r.frozen[k];
    const BlockWeights& w = r.bundle.blocks[k];
    const std::pair<const char*, const Tensor*> items[] = {
        {"wq", &q.wq}, {"wk", &q.wk},       {"wv", &q.wv},   {"wo", &q.wo}, {"wgate", &q.wgate},
        {"wup", &q.wup}, {"wdown", &q.wdown}, {"bq", &w.bq}, {"bk", &w.bk}, {"bv", &q.bv}};
    for (const auto& [n, t] : items)
      if (!t->empty()) f.tensors.emplace_back(block_key(k, n), *t);
  }
  return f;
}

TensorFile params_to_file(const std::vector<BlockParams>& params) {
  TensorFile f;
  f.kind = "params";
  f.meta = {{"blocks", params.size()}};
  for (std::size_t k = 0; k < params.size(); ++k)
    for (const std::string& n : BlockParams::names()) f.tensors.emplace_back(block_key(k, n), params[k].field(n));
  return f;
}

std::vector<BlockParams> params_from_file(const TensorFile& f) {
  std::size_t n = 0;
  parse_meta(f, "params", [&] { n = f.meta.at("blocks").get<std::size_t>(); });
  std::vector<BlockParams> out(n);
  for (std::size_t k = 0; k < n; ++k)
    for (const std::string& name : BlockParams::names()) out[k].field(name) = f.get(block_key(k, name));
  return out;
}

// ---------------------------------------------------------------------------
// Reports

json to_json(const SiteRecord& r) {
  return {{"name", r.name},
          {"tokens", r.tokens},
          {"channels", r.channels},
          {"rounding_energy", r.rounding_energy},
          {"clipping_energy_fraction", r.clipping_energy_fraction},
          {"var_of_means_fraction", r.var_of_means_fraction},
          {"total_var", r.total_var},
          {"var_of_means", r.var_of_means},
          {"mean_channel_var", r.mean_channel_var},
          {"predicted_noise_var", r.predicted_noise_var},
          {"empirical_noise_var", r.empirical_noise_var},
          {"channel_means", r.channel_means},
          {"channel_vars", r.channel_vars}};
}

SiteRecord site_record_from_json(const json& j) {
  SiteRecord r;
  r.name = j.at("name").get<std::string>();
  r.tokens = j.at("tokens").get<std::size_t>();
  r.channels = j.at("channels").get<std::size_t>();
  r.rounding_energy = j.at("rounding_energy").get<double>();
  r.clipping_energy_fraction = j.at("clipping_energy_fraction").get<double>();
  r.var_of_means_fraction = j.at("var_of_means_fraction").get<double>();
  r.total_var = j.at("total_var").get<double>();
  r.var_of_means = j.at("var_of_means").get<double>();
  r.mean_channel_var = j.at("mean_channel_var").get<double>();
  r.predicted_noise_var = j.at("predicted_noise_var").get<double>();
  r.empirical_noise_var = j.at("empirical_noise_var").get<double>();
  r.channel_means = j.at("channel_means").get<std::vector<double>>();
  r.channel_vars = j.at("channel_vars").get<std::vector<double>>();
  return r;
}

json to_json(const ErrorReport& r) {
  json sites = json::array();
  for (const SiteRecord& s : r.sites) sites.push_back(to_json(s));
  return sites;
}

ErrorReport error_report_from_json(const json& j) {
  ErrorReport r;
  try {
    for (const json& s : j) r.sites.push_back(site_record_from_json(s));
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed site record: ") + e.what());
  }
  return r;
}

std::string sites_csv(const ErrorReport& r) {
  std::ostringstream os;
  os << "site,tokens,channels,rounding_energy,clipping_energy_fraction,var_of_means_fraction,total_var,"
        "var_of_means,mean_channel_var,predicted_noise_var,empirical_noise_var\n";
  for (const SiteRecord& s : r.sites)
    os << s.name << ',' << s.tokens << ',' << s.channels << ',' << fmt_double(s.rounding_energy) << ','
       << fmt_double(s.clipping_energy_fraction) << ',' << fmt_double(s.var_of_means_fraction) << ','
       << fmt_double(s.total_var) << ',' << fmt_double(s.var_of_means) << ',' << fmt_double(s.mean_channel_var)
       << ',' << fmt_double(s.predicted_noise_var) << ',' << fmt_double(s.empirical_noise_var) << '\n';
  return os.str();
}

std::string channels_csv(const ErrorReport& r) {
  std::ostringstream os;
  os << "site,channel,mean,var\n";
  for (const SiteRecord& s : r.sites)
    for (std::size_t j = 0; j < s.channel_means.size(); ++j)
      os << s.name << ',' << j << ',' << fmt_double(s.channel_means[j]) << ',' << fmt_double(s.channel_vars[j])
         << '\n';
  return os.str();
}

std::string blocks_csv(const std::vector<BlockReport>& blocks) {
  std::ostringstream os;
  os << "block,mse_initial,mse_stage1,mse_gptq,mse_final\n";
  for (const BlockReport& b : blocks)
    os << b.index << ',' << fmt_double(b.mse_initial) << ',' << fmt_double(b.mse_stage1) << ','
       << fmt_double(b.mse_gptq) << ',' << fmt_double(b.mse_final) << '\n';
  return os.str();
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "mode,total_mse\n";
  for (const AblationRow& r : rows)
    os << to_string(r.mode) << ',' << (r.total_mse ? fmt_double(*r.total_mse) : "unsupported") << '\n';
  return os.str();
}

void check_report(const json& j) {
  if (!j.is_object()) throw FormatError("report: top level must be an object");
  if (!j.contains("schema_version")) throw FormatError("report: missing schema_version");
  if (j["schema_version"] != kReportSchemaVersion)
    throw FormatError("report: unsupported schema_version " + j["schema_version"].dump());
  if (!j.contains("kind") || !j["kind"].is_string()) throw FormatError("report: missing kind");
  if (j.contains("sites")) error_report_from_json(j["sites"]);
}

std::string dump_json(const json& j) { return j.dump(2) + "\n"; }

}  // namespace baseq
