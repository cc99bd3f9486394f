#include "qig/tensor_io.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace qig {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

std::string_view granularity_name(Granularity g) {
  switch (g) {
    case Granularity::PerTensor: return "per-tensor";
    case Granularity::PerToken: return "per-token";
    case Granularity::PerChannel: return "per-channel";
    case Granularity::PerGroup: return "per-group";
  }
  throw std::logic_error("granularity_name: bad value");
}

Granularity granularity_from_name(std::string_view s) {
  if (s == "per-tensor") return Granularity::PerTensor;
  if (s == "per-token") return Granularity::PerToken;
  if (s == "per-channel") return Granularity::PerChannel;
  if (s == "per-group") return Granularity::PerGroup;
  throw std::invalid_argument("unknown granularity: " + std::string(s));
}

}  // namespace

std::int64_t TensorFile::element_count() const {
  std::int64_t n = 1;
  for (auto s : shape) n *= s;
  return shape.empty() ? 0 : n;
}

nlohmann::json to_json(const TensorFile& t) {
  require(t.dtype == "f64" || t.dtype == "i32",
          "tensor: dtype must be f64 or i32");
  for (auto s : t.shape) require(s >= 1, "tensor: non-positive dimension");
  nlohmann::json j;
  j["dtype"] = t.dtype;
  j["shape"] = t.shape;
  if (t.dtype == "f64") {
    require(static_cast<std::int64_t>(t.fdata.size()) == t.element_count(),
            "tensor: data length does not match shape");
    for (double v : t.fdata)
      require(std::isfinite(v), "tensor: non-finite value");
    j["data"] = t.fdata;
  } else {
    require(static_cast<std::int64_t>(t.idata.size()) == t.element_count(),
            "tensor: data length does not match shape");
    j["data"] = t.idata;
  }
  if (!t.name.empty()) j["name"] = t.name;
  return j;
}

TensorFile tensor_from_json(const nlohmann::json& j) {
  TensorFile t;
  t.dtype = j.at("dtype").get<std::string>();
  require(t.dtype == "f64" || t.dtype == "i32",
          "tensor: dtype must be f64 or i32");
  t.shape = j.at("shape").get<std::vector<std::int64_t>>();
  require(!t.shape.empty(), "tensor: empty shape");
  for (auto s : t.shape) require(s >= 1, "tensor: non-positive dimension");
  if (t.dtype == "f64") {
    t.fdata = j.at("data").get<std::vector<double>>();
    require(static_cast<std::int64_t>(t.fdata.size()) == t.element_count(),
            "tensor: data length does not match shape");
    for (double v : t.fdata)
      require(std::isfinite(v), "tensor: non-finite value");
  } else {
    t.idata = j.at("data").get<std::vector<std::int32_t>>();
    require(static_cast<std::int64_t>(t.idata.size()) == t.element_count(),
            "tensor: data length does not match shape");
  }
  if (j.contains("name")) t.name = j.at("name").get<std::string>();
  return t;
}

TensorFile tensor_from_matrix(const Eigen::MatrixXd& m,
                              const std::string& name) {
  TensorFile t;
  t.dtype = "f64";
  t.shape = {m.rows(), m.cols()};
  t.name = name;
  t.fdata.reserve(m.size());
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) t.fdata.push_back(m(r, c));
  return t;
}

TensorFile tensor_from_codes(const Eigen::MatrixXi& m,
                             const std::string& name) {
  TensorFile t;
  t.dtype = "i32";
  t.shape = {m.rows(), m.cols()};
  t.name = name;
  t.idata.reserve(m.size());
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) t.idata.push_back(m(r, c));
  return t;
}

Eigen::MatrixXd matrix_from_tensor(const TensorFile& t) {
  require(t.dtype == "f64", "tensor: expected dtype f64");
  require(t.shape.size() == 2, "tensor: expected rank 2");
  Eigen::MatrixXd m(t.shape[0], t.shape[1]);
  std::size_t i = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = t.fdata[i++];
  return m;
}

Eigen::MatrixXi codes_from_tensor(const TensorFile& t) {
  require(t.dtype == "i32", "tensor: expected dtype i32");
  require(t.shape.size() == 2, "tensor: expected rank 2");
  Eigen::MatrixXi m(t.shape[0], t.shape[1]);
  std::size_t i = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = t.idata[i++];
  return m;
}

std::vector<Eigen::MatrixXd> batches_from_tensor(const TensorFile& t) {
  require(t.dtype == "f64", "tensor: expected dtype f64");
  if (t.shape.size() == 2) return {matrix_from_tensor(t)};
  require(t.shape.size() == 3, "tensor: expected rank 2 or 3");
  const std::int64_t b = t.shape[0], rows = t.shape[1], cols = t.shape[2];
  std::vector<Eigen::MatrixXd> out;
  out.reserve(b);
  std::size_t i = 0;
  for (std::int64_t k = 0; k < b; ++k) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = t.fdata[i++];
    out.push_back(std::move(m));
  }
  return out;
}

TensorFile read_tensor_file(const std::string& path) {
  return tensor_from_json(read_json_file(path));
}

void write_tensor_file(const std::string& path, const TensorFile& t) {
  write_json_file(path, to_json(t));
}

nlohmann::json to_json(const QuantConfig& cfg) {
  validate(cfg);
  nlohmann::json j;
  j["bits"] = cfg.bits;
  j["mode"] = cfg.mode == QuantMode::Symmetric ? "symmetric" : "asymmetric";
  j["granularity"] = granularity_name(cfg.granularity);
  if (cfg.granularity == Granularity::PerGroup)
    j["group_size"] = cfg.group_size;
  return j;
}

QuantConfig quant_config_from_json(const nlohmann::json& j) {
  QuantConfig cfg;
  cfg.bits = j.at("bits").get<int>();
  const auto mode = j.at("mode").get<std::string>();
  require(mode == "symmetric" || mode == "asymmetric",
          "quant config: unknown mode " + mode);
  cfg.mode =
      mode == "symmetric" ? QuantMode::Symmetric : QuantMode::Asymmetric;
  cfg.granularity =
      granularity_from_name(j.at("granularity").get<std::string>());
  if (j.contains("group_size")) cfg.group_size = j.at("group_size").get<int>();
  validate(cfg);
  return cfg;
}

nlohmann::json to_json(const QuantizedTensor& q) {
  nlohmann::json j;
  j["config"] = to_json(q.config);
  j["shape"] = {q.source_rows, q.source_cols};
  j["codes"] = to_json(tensor_from_codes(q.codes, "codes"));
  j["scales"] = to_json(tensor_from_matrix(q.scales, "scales"));
  if (q.config.mode == QuantMode::Asymmetric)
    j["zero_points"] = to_json(tensor_from_codes(q.zero_points, "zero_points"));
  return j;
}

QuantizedTensor quantized_tensor_from_json(const nlohmann::json& j) {
  QuantizedTensor q;
  q.config = quant_config_from_json(j.at("config"));
  const auto shape = j.at("shape").get<std::vector<std::int64_t>>();
  require(shape.size() == 2, "quantized tensor: bad shape");
  q.source_rows = shape[0];
  q.source_cols = shape[1];
  q.codes = codes_from_tensor(tensor_from_json(j.at("codes")));
  q.scales = matrix_from_tensor(tensor_from_json(j.at("scales")));
  if (q.config.mode == QuantMode::Asymmetric)
    q.zero_points = codes_from_tensor(tensor_from_json(j.at("zero_points")));
  else
    q.zero_points.setZero(q.scales.rows(), q.scales.cols());
  require(q.codes.rows() == q.source_rows && q.codes.cols() == q.source_cols,
          "quantized tensor: codes shape mismatch");
  return q;
}

void write_model(const std::string& path, const BlockModel& model) {
  validate(model);
  nlohmann::json j;
  j["kind"] = std::string(to_string(model.kind));
  j["d"] = model.d;
  j["m"] = model.m;
  j["seq_len"] = model.seq_len;
  nlohmann::json weights;
  for (const auto& [name, w] : model.weights)
    weights[name] = to_json(tensor_from_matrix(w, name));
  j["weights"] = weights;
  write_json_file(path, j);
}

BlockModel read_model(const std::string& path) {
  const nlohmann::json j = read_json_file(path);
  BlockModel model;
  model.kind = block_kind_from_string(j.at("kind").get<std::string>());
  model.d = j.at("d").get<std::int64_t>();
  model.m = j.at("m").get<std::int64_t>();
  model.seq_len = j.at("seq_len").get<std::int64_t>();
  for (const auto& [name, tj] : j.at("weights").items())
    model.weights[name] = matrix_from_tensor(tensor_from_json(tj));
  validate(model);
  return model;
}

void write_quantized_model(const std::string& path,
                           const QuantizedModelFile& f) {
  nlohmann::json j;
  j["kind"] = std::string(to_string(f.kind));
  j["d"] = f.d;
  j["m"] = f.m;
  j["seq_len"] = f.seq_len;
  j["method"] = f.method;
  j["weight_config"] = to_json(f.weight_cfg);
  if (f.act_cfg) j["act_config"] = to_json(*f.act_cfg);
  nlohmann::json subs;
  for (const auto& [name, sub] : f.sublayers) {
    nlohmann::json sj;
    sj["weights"] = to_json(sub.weights);
    if (sub.equalization) {
      Eigen::MatrixXd e = *sub.equalization;
      e.resize(sub.equalization->size(), 1);
      sj["equalization"] = to_json(tensor_from_matrix(e, name + "/eq"));
    }
    subs[name] = sj;
  }
  j["sublayers"] = subs;
  write_json_file(path, j);
}

QuantizedModelFile read_quantized_model(const std::string& path) {
  const nlohmann::json j = read_json_file(path);
  QuantizedModelFile f;
  f.kind = block_kind_from_string(j.at("kind").get<std::string>());
  f.d = j.at("d").get<std::int64_t>();
  f.m = j.at("m").get<std::int64_t>();
  f.seq_len = j.at("seq_len").get<std::int64_t>();
  f.method = j.at("method").get<std::string>();
  f.weight_cfg = quant_config_from_json(j.at("weight_config"));
  if (j.contains("act_config"))
    f.act_cfg = quant_config_from_json(j.at("act_config"));
  for (const auto& [name, sj] : j.at("sublayers").items()) {
    QuantizedModelFile::Sublayer sub;
    sub.weights = quantized_tensor_from_json(sj.at("weights"));
    if (sj.contains("equalization")) {
      const Eigen::MatrixXd e =
          matrix_from_tensor(tensor_from_json(sj.at("equalization")));
      sub.equalization = Eigen::VectorXd(e.col(0));
    }
    f.sublayers[name] = std::move(sub);
  }
  return f;
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path);
}

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  return nlohmann::json::parse(in);
}

}  // namespace qig
