#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cstdio>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>

#include "qig/block.hpp"
#include "qig/quantizer.hpp"
#include "qig/rng.hpp"
#include "qig/tensor_io.hpp"

using qig::BlockKind;
using qig::Granularity;
using qig::QuantConfig;
using qig::TensorFile;

namespace {

std::string temp_path(const std::string& stem) {
  return (std::filesystem::temp_directory_path() /
          ("qig_io_" + stem + "_" + std::to_string(::getpid()) + ".json"))
      .string();
}

struct FileGuard {
  std::string path;
  ~FileGuard() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("float tensors survive a disk round trip bit for bit") {
  auto eng = qig::rng::engine_for(5, "test/io");
  Eigen::MatrixXd m = qig::rng::standard_normal(4, 7, eng);
  m(0, 0) = 1e-300;              // subnormal-adjacent magnitudes
  m(1, 1) = -0.1;                // not exactly representable
  m(2, 2) = 6.02214076e23;

  const std::string path = temp_path("f64");
  FileGuard guard{path};
  qig::write_tensor_file(path, qig::tensor_from_matrix(m, "acts"));
  const TensorFile back = qig::read_tensor_file(path);
  CHECK(back.dtype == "f64");
  CHECK(back.name == "acts");
  REQUIRE(back.shape == std::vector<std::int64_t>{4, 7});
  CHECK(qig::matrix_from_tensor(back) == m);
}

TEST_CASE("integer code tensors round trip") {
  Eigen::MatrixXi codes(2, 3);
  codes << -128, 0, 127, -4, 3, 7;
  const std::string path = temp_path("i32");
  FileGuard guard{path};
  qig::write_tensor_file(path, qig::tensor_from_codes(codes, "codes"));
  const TensorFile back = qig::read_tensor_file(path);
  CHECK(back.dtype == "i32");
  CHECK(qig::codes_from_tensor(back) == codes);
}

TEST_CASE("rank three tensors split into batches") {
  TensorFile t;
  t.dtype = "f64";
  t.shape = {2, 3, 2};  // two batches of 3 x 2
  t.fdata = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12};
  const auto batches = qig::batches_from_tensor(t);
  REQUIRE(batches.size() == 2);
  CHECK(batches[0](0, 0) == 1);
  CHECK(batches[0](0, 1) == 2);  // row-major: second element is column 1
  CHECK(batches[0](2, 1) == 6);
  CHECK(batches[1](0, 0) == 7);
  CHECK(batches[1](2, 1) == 12);

  // A rank-2 tensor is one batch, identical to matrix_from_tensor.
  TensorFile r2;
  r2.shape = {3, 2};
  r2.fdata = {1, 2, 3, 4, 5, 6};
  const auto single = qig::batches_from_tensor(r2);
  REQUIRE(single.size() == 1);
  CHECK(single[0] == qig::matrix_from_tensor(r2));
}

TEST_CASE("quant configs round trip through json") {
  const QuantConfig cases[] = {
      QuantConfig::symmetric(8, Granularity::PerTensor),
      QuantConfig::symmetric(4, Granularity::PerToken),
      QuantConfig::symmetric(3, Granularity::PerChannel),
      QuantConfig::asymmetric_grouped(3, 128),
      QuantConfig::asymmetric_grouped(8, 2)};
  for (const auto& cfg : cases) {
    const QuantConfig back = qig::quant_config_from_json(qig::to_json(cfg));
    CHECK(back.bits == cfg.bits);
    CHECK(back.symmetric == cfg.symmetric);
    CHECK(back.granularity == cfg.granularity);
    CHECK(back.group_size == cfg.group_size);
  }
}

TEST_CASE("quantized tensors round trip with zero points and scales") {
  auto eng = qig::rng::engine_for(9, "test/io-q");
  const Eigen::MatrixXd w = qig::rng::standard_normal(5, 6, eng);

  for (const QuantConfig& cfg :
       {QuantConfig::asymmetric_grouped(3, 4),
        QuantConfig::symmetric(4, Granularity::PerChannel)}) {
    const qig::QuantizedTensor q = qig::quantize(w, cfg);
    const qig::QuantizedTensor back =
        qig::quantized_tensor_from_json(qig::to_json(q));
    CHECK(back.codes == q.codes);
    CHECK(back.scales == q.scales);
    CHECK(back.zero_points == q.zero_points);
    CHECK(back.config.bits == cfg.bits);
    CHECK(qig::dequantize(back) == qig::dequantize(q));
  }
}

TEST_CASE("block models round trip for every kind") {
  for (const BlockKind kind :
       {BlockKind::Linear, BlockKind::Mlp, BlockKind::Attention}) {
    const qig::BlockModel model = qig::random_block_model(kind, 6, 6, 12, 21);
    const std::string path = temp_path("model");
    FileGuard guard{path};
    qig::write_model(path, model);
    const qig::BlockModel back = qig::read_model(path);
    CHECK(back.kind == model.kind);
    CHECK(back.d == model.d);
    CHECK(back.m == model.m);
    REQUIRE(back.sublayers() == model.sublayers());
    for (const auto& name : model.sublayers())
      CHECK(back.weight(name) == model.weight(name));

    // Same forward pass bit for bit after the round trip.
    auto eng = qig::rng::engine_for(21, "test/io-fwd");
    const Eigen::MatrixXd x = qig::rng::standard_normal(6, 5, eng);
    CHECK(qig::block_forward(back, x) == qig::block_forward(model, x));
  }
}

TEST_CASE("quantized model files carry the whole execution state") {
  const qig::BlockModel model =
      qig::random_block_model(BlockKind::Mlp, 4, 4, 8, 2);
  qig::QuantizedModelFile f;
  f.kind = model.kind;
  f.d = model.d;
  f.m = model.m;
  f.seq_len = 8;
  f.method = "cwe";
  f.weight_cfg = QuantConfig::asymmetric_grouped(3, 2);
  f.act_cfg = QuantConfig::symmetric(8, Granularity::PerToken);
  for (const auto& name : model.sublayers()) {
    qig::QuantizedModelFile::Sublayer s;
    s.weights = qig::quantize(model.weight(name), f.weight_cfg);
    s.equalization =
        Eigen::VectorXd::LinSpaced(model.weight(name).cols(), 0.5, 2.0);
    f.sublayers.emplace(name, std::move(s));
  }

  const std::string path = temp_path("qmodel");
  FileGuard guard{path};
  qig::write_quantized_model(path, f);
  const qig::QuantizedModelFile back = qig::read_quantized_model(path);

  CHECK(back.kind == f.kind);
  CHECK(back.d == f.d);
  CHECK(back.m == f.m);
  CHECK(back.seq_len == f.seq_len);
  CHECK(back.method == "cwe");
  CHECK(back.weight_cfg.bits == 3);
  REQUIRE(back.act_cfg.has_value());
  CHECK(back.act_cfg->granularity == Granularity::PerToken);
  REQUIRE(back.sublayers.size() == f.sublayers.size());
  for (const auto& [name, sub] : f.sublayers) {
    const auto& b = back.sublayers.at(name);
    CHECK(b.weights.codes == sub.weights.codes);
    CHECK(b.weights.scales == sub.weights.scales);
    REQUIRE(b.equalization.has_value());
    CHECK(*b.equalization == *sub.equalization);
  }

  // Weight-only file without equalization: optional fields stay absent.
  qig::QuantizedModelFile bare = f;
  bare.method = "rtn";
  bare.act_cfg.reset();
  for (auto& [name, sub] : bare.sublayers) sub.equalization.reset();
  qig::write_quantized_model(path, bare);
  const qig::QuantizedModelFile bback = qig::read_quantized_model(path);
  CHECK(!bback.act_cfg.has_value());
  for (const auto& [name, sub] : bback.sublayers)
    CHECK(!sub.equalization.has_value());
}

TEST_CASE("malformed files are rejected") {
  CHECK_THROWS_AS(qig::read_tensor_file("/nonexistent/q.json"),
                  std::runtime_error);

  TensorFile bad_dtype;
  bad_dtype.dtype = "f16";
  bad_dtype.shape = {1, 1};
  bad_dtype.fdata = {1.0};
  CHECK_THROWS_AS(qig::tensor_from_json(qig::to_json(bad_dtype)),
                  std::exception);

  // Element count disagreeing with the shape.
  nlohmann::json j;
  j["dtype"] = "f64";
  j["shape"] = {2, 3};
  j["data"] = {1.0, 2.0};
  CHECK_THROWS_AS(qig::tensor_from_json(j), std::exception);

  // Non-finite payloads never reach disk: serialization rejects them.
  Eigen::MatrixXd nan_m = Eigen::MatrixXd::Zero(2, 2);
  nan_m(0, 1) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(qig::to_json(qig::tensor_from_matrix(nan_m)),
                  std::exception);

  // matrix_from_tensor insists on rank 2.
  TensorFile r3;
  r3.shape = {1, 2, 2};
  r3.fdata = {1, 2, 3, 4};
  CHECK_THROWS_AS(qig::matrix_from_tensor(r3), std::exception);

  // Unknown block kind string.
  nlohmann::json m;
  m["kind"] = "conv";
  CHECK_THROWS_AS(qig::read_model("/nonexistent/m.json"), std::runtime_error);
  CHECK_THROWS_AS(qig::block_kind_from_string("conv"), std::exception);
}

TEST_CASE("json files end with a newline and stay stable") {
  // Deterministic serialization is what makes rerun outputs byte-identical.
  const std::string path = temp_path("stable");
  FileGuard guard{path};
  nlohmann::json j;
  j["b"] = 1;
  j["a"] = {1, 2};
  qig::write_json_file(path, j);
  std::ifstream in(path, std::ios::binary);
  std::string all((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
  REQUIRE(!all.empty());
  CHECK(all.back() == '\n');
  CHECK(qig::read_json_file(path) == j);

  qig::write_json_file(path, j);
  std::ifstream in2(path, std::ios::binary);
  std::string again((std::istreambuf_iterator<char>(in2)),
                    std::istreambuf_iterator<char>());
  CHECK(again == all);
}
