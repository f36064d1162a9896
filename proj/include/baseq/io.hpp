#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "baseq/model_sim.hpp"
#include "baseq/pipeline.hpp"
#include "baseq/tensor.hpp"

namespace baseq {

/// On-disk layout:
///   bytes 0..7    "BQBUNDLE"
///   bytes 8..15   header length L, u64 little-endian
///   bytes 16..    L bytes of UTF-8 JSON
///   then f32 little-endian tensor data, each tensor starting on a
///   64-byte boundary. Offsets in the header are absolute.
inline constexpr char kBundleMagic[8] = {'B', 'Q', 'B', 'U', 'N', 'D', 'L', 'E'};
inline constexpr std::size_t kTensorAlign = 64;
inline constexpr int kFileFormatVersion = 1;

struct TensorFile {
  std::string kind;  ///< "model", "calib", "quantized", "params"
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& get(const std::string& name) const;  ///< FormatError if missing
  bool has(const std::string& name) const;
};

std::string encode_tensor_file(const TensorFile& f);
/// Every structural problem is a FormatError naming the byte offset.
TensorFile decode_tensor_file(const std::string& bytes);
void write_tensor_file(const std::string& path, const TensorFile& f);
TensorFile read_tensor_file(const std::string& path);

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

TensorFile bundle_to_file(const ModelBundle& b);
ModelBundle bundle_from_file(const TensorFile& f);
void save_bundle(const std::string& path, const ModelBundle& b);
ModelBundle load_bundle(const std::string& path);

TensorFile calib_to_file(const Tensor& calib, std::size_t seq_len);
Tensor calib_from_file(const TensorFile& f);

/// Fused bundle with frozen (dequantized) weights plus R_res.
TensorFile quantized_to_file(const QuantizeResult& r);
TensorFile params_to_file(const std::vector<BlockParams>& params);
std::vector<BlockParams> params_from_file(const TensorFile& f);

// ---------------------------------------------------------------------------
// Reports

inline constexpr int kReportSchemaVersion = 1;

nlohmann::json to_json(const SiteRecord& r);
SiteRecord site_record_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ErrorReport& r);
ErrorReport error_report_from_json(const nlohmann::json& j);

/// One row per site, scalar columns only.
std::string sites_csv(const ErrorReport& r);
/// site,channel,mean,var rows.
std::string channels_csv(const ErrorReport& r);
std::string blocks_csv(const std::vector<BlockReport>& blocks);
std::string ablation_csv(const std::vector<AblationRow>& rows);

/// Checks schema_version and the fields every report kind carries.
void check_report(const nlohmann::json& j);

/// Writes text exactly (binary mode, no newline translation).
void write_text(const std::string& path, const std::string& text);
std::string read_text(const std::string& path);

/// Pretty JSON with a trailing newline.
std::string dump_json(const nlohmann::json& j);

}  // namespace baseq
