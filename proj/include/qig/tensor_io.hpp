#pragma once

#include <Eigen/Dense>

#include <json.hpp>

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "qig/block.hpp"
#include "qig/quantizer.hpp"

namespace qig {

// On-disk tensor: {"dtype": "f64"|"i32", "shape": [...], "data": [...]} with
// row-major data and an optional "name". Rank 2 covers weights and single
// calibration batches; rank 3 ([B, d, T]) covers batched activations.
struct TensorFile {
  std::string dtype = "f64";
  std::vector<std::int64_t> shape;
  std::vector<double> fdata;        // dtype == "f64"
  std::vector<std::int32_t> idata;  // dtype == "i32"
  std::string name;

  std::int64_t element_count() const;
};

nlohmann::json to_json(const TensorFile& t);
TensorFile tensor_from_json(const nlohmann::json& j);

TensorFile tensor_from_matrix(const Eigen::MatrixXd& m,
                              const std::string& name = "");
TensorFile tensor_from_codes(const Eigen::MatrixXi& m,
                             const std::string& name = "");
Eigen::MatrixXd matrix_from_tensor(const TensorFile& t);
Eigen::MatrixXi codes_from_tensor(const TensorFile& t);

// Rank-2 tensors come back as a single batch; rank-3 as one matrix per item.
std::vector<Eigen::MatrixXd> batches_from_tensor(const TensorFile& t);

TensorFile read_tensor_file(const std::string& path);
void write_tensor_file(const std::string& path, const TensorFile& t);

nlohmann::json to_json(const QuantConfig& cfg);
QuantConfig quant_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const QuantizedTensor& q);
QuantizedTensor quantized_tensor_from_json(const nlohmann::json& j);

void write_model(const std::string& path, const BlockModel& model);
BlockModel read_model(const std::string& path);

// Quantized block on disk: per-sub-layer codes/scales plus the execution
// configs and, for equalized runs, the per-channel scale vectors.
struct QuantizedModelFile {
  BlockKind kind = BlockKind::Linear;
  Eigen::Index d = 0;
  Eigen::Index m = 0;
  Eigen::Index seq_len = 0;
  std::string method;  // "cwe" | "gptq" | "rtn"
  QuantConfig weight_cfg;
  std::optional<QuantConfig> act_cfg;
  struct Sublayer {
    QuantizedTensor weights;
    std::optional<Eigen::VectorXd> equalization;
  };
  std::map<std::string, Sublayer, std::less<>> sublayers;
};

void write_quantized_model(const std::string& path,
                           const QuantizedModelFile& f);
QuantizedModelFile read_quantized_model(const std::string& path);

void write_json_file(const std::string& path, const nlohmann::json& j);
nlohmann::json read_json_file(const std::string& path);

}  // namespace qig
