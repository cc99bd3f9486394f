// Command-line driver: generate block models and calibration data, attribute
// token sensitivity, quantize with token weighting, and run the property
// suite. All outputs are deterministic for a fixed seed and flag set; only
// timing lines (stderr) vary between runs.

#include <CLI11.hpp>

#include <Eigen/Dense>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "qig/attribution.hpp"
#include "qig/block.hpp"
#include "qig/equalization.hpp"
#include "qig/gptq.hpp"
#include "qig/quantizer.hpp"
#include "qig/rng.hpp"
#include "qig/selfcheck.hpp"
#include "qig/tensor_io.hpp"
#include "qig/weighting.hpp"

namespace {

int log_level() {
  const char* v = std::getenv("QIG_LOG");
  return v == nullptr ? 0 : std::atoi(v);
}

void info(const std::string& msg) {
  if (log_level() >= 1) std::cerr << "qig: " << msg << "\n";
}

// Shortest exact decimal form, stable across runs.
std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string out_path(const std::string& dir, const std::string& file) {
  std::filesystem::create_directories(dir);
  return (std::filesystem::path(dir) / file).string();
}

// Quantization format shared by attribute and quantize. Weight-only runs use
// asymmetric group-wise weights; once activation bits are requested the
// format switches to per-channel symmetric weights with per-token symmetric
// activations.
struct FormatOpts {
  int wbits = 3;
  int abits = 8;
  bool has_abits = false;
  int group_size = 128;
};

qig::QuantizedExecution make_exec(const FormatOpts& o) {
  qig::QuantizedExecution exec;
  if (o.has_abits) {
    exec.weight_cfg =
        qig::QuantConfig::symmetric(o.wbits, qig::Granularity::PerChannel);
    exec.act_cfg =
        qig::QuantConfig::symmetric(o.abits, qig::Granularity::PerToken);
  } else {
    exec.weight_cfg =
        qig::QuantConfig::asymmetric_grouped(o.wbits, o.group_size);
  }
  return exec;
}

void add_format_flags(CLI::App* cmd, FormatOpts* o, CLI::Option** abits_opt) {
  cmd->add_option("--wbits", o->wbits, "Weight bits")->capture_default_str();
  *abits_opt = cmd->add_option(
      "--abits", o->abits,
      "Activation bits; omitting them keeps activations full precision");
  cmd->add_option("--group-size", o->group_size,
                  "Group size for asymmetric weight groups")
      ->capture_default_str();
}

Eigen::MatrixXd load_single_batch(const std::string& path,
                                  const char* command) {
  const qig::TensorFile t = qig::read_tensor_file(path);
  const auto batches = qig::batches_from_tensor(t);
  if (batches.size() != 1)
    throw std::runtime_error(std::string(command) +
                             " expects a single calibration batch "
                             "(rank-2 tensor), got " +
                             std::to_string(batches.size()) + " batches");
  return batches[0];
}

// ---- gen-model ------------------------------------------------------------

struct OutlierSpec {
  bool token = false;  // otherwise channel
  Eigen::Index index = 0;
  double scale = 1.0;
};

OutlierSpec parse_outlier(const std::string& s) {
  const auto first = s.find(':');
  const auto second = s.find(':', first == std::string::npos ? s.size()
                                                             : first + 1);
  if (first == std::string::npos || second == std::string::npos)
    throw std::runtime_error("bad --inject-outlier spec '" + s +
                             "', expected token:INDEX:SCALE or "
                             "channel:INDEX:SCALE");
  OutlierSpec spec;
  const std::string kind = s.substr(0, first);
  if (kind == "token") {
    spec.token = true;
  } else if (kind == "channel") {
    spec.token = false;
  } else {
    throw std::runtime_error("bad --inject-outlier kind '" + kind + "'");
  }
  spec.index = std::stoll(s.substr(first + 1, second - first - 1));
  spec.scale = std::stod(s.substr(second + 1));
  return spec;
}

int cmd_gen_model(const std::string& kind_str, Eigen::Index d, Eigen::Index m,
                  Eigen::Index seq_len, std::uint64_t seed,
                  const std::vector<std::string>& outliers,
                  const std::string& out_dir) {
  const qig::BlockKind kind = qig::block_kind_from_string(kind_str);
  const qig::BlockModel model = qig::random_block_model(kind, d, m, seq_len,
                                                        seed);
  auto eng = qig::rng::engine_for(seed, "calib");
  Eigen::MatrixXd calib = qig::rng::standard_normal(d, seq_len, eng);
  for (const auto& s : outliers) {
    const OutlierSpec spec = parse_outlier(s);
    if (spec.token) {
      if (spec.index < 0 || spec.index >= seq_len)
        throw std::runtime_error("outlier token index out of range");
      calib.col(spec.index) *= spec.scale;
    } else {
      if (spec.index < 0 || spec.index >= d)
        throw std::runtime_error("outlier channel index out of range");
      calib.row(spec.index) *= spec.scale;
    }
  }
  const std::string model_path = out_path(out_dir, "model.json");
  const std::string calib_path = out_path(out_dir, "calib.json");
  qig::write_model(model_path, model);
  qig::write_tensor_file(calib_path,
                         qig::tensor_from_matrix(calib, "calibration"));
  std::cout << "wrote " << model_path << "\n";
  std::cout << "wrote " << calib_path << "\n";
  return 0;
}

// ---- attribute ------------------------------------------------------------

int cmd_attribute(const std::string& model_path, const std::string& calib_path,
                  const FormatOpts& fmt_opts, int ig_steps, double iqr_k,
                  const std::string& out_dir) {
  const qig::BlockModel model = qig::read_model(model_path);
  const qig::TensorFile calib_t = qig::read_tensor_file(calib_path);
  const auto batches = qig::batches_from_tensor(calib_t);
  const qig::QuantizedExecution exec = make_exec(fmt_opts);

  info("attributing " + std::to_string(batches.size()) + " batch item(s), " +
       std::to_string(ig_steps) + " steps");
  const auto results = qig::qig_batched(model, exec, batches, ig_steps);
  const Eigen::VectorXd raw = qig::averaged_scores(results);
  const qig::SensitivityVector sv = qig::build_sensitivity(raw, iqr_k);

  const std::string csv_path = out_path(out_dir, "sensitivity.csv");
  std::ofstream csv(csv_path);
  if (!csv) throw std::runtime_error("cannot open for writing: " + csv_path);
  csv << "token_index,raw_qig,abs_qig,clipped,lambda\n";
  for (Eigen::Index i = 0; i < raw.size(); ++i)
    csv << i << ',' << fmt(sv.raw[i]) << ',' << fmt(sv.magnitude[i]) << ','
        << fmt(sv.clipped[i]) << ',' << fmt(sv.lambda[i]) << '\n';
  if (!csv) throw std::runtime_error("write failed: " + csv_path);
  csv.close();

  nlohmann::json summary;
  summary["tokens"] = raw.size();
  summary["steps"] = ig_steps;
  summary["iqr_multiplier"] = iqr_k;
  summary["baseline"] = exec.act_cfg ? "quantized-input" : "zero";
  double residual_max = 0.0;
  nlohmann::json residuals = nlohmann::json::array();
  nlohmann::json distortions = nlohmann::json::array();
  for (std::size_t b = 0; b < results.size(); ++b) {
    residuals.push_back(results[b].residual);
    residual_max = std::max(residual_max, results[b].residual);
    const auto y_fp = qig::block_forward(model, batches[b]);
    const auto y_q = qig::block_forward_quantized(model, batches[b], exec);
    distortions.push_back(qig::distortion_error(y_fp, y_q).scalar);
  }
  summary["residual"] = residual_max;
  summary["residuals"] = residuals;
  summary["distortion"] = distortions;
  const std::string json_path = out_path(out_dir, "summary.json");
  qig::write_json_file(json_path, summary);
  std::cout << "wrote " << csv_path << "\n";
  std::cout << "wrote " << json_path << "\n";
  return 0;
}

// ---- quantize -------------------------------------------------------------

Eigen::VectorXd lambda_from_attribution(const qig::BlockModel& model,
                                        const qig::QuantizedExecution& exec,
                                        const Eigen::MatrixXd& calib,
                                        int ig_steps, double iqr_k) {
  const qig::AttributionResult attr = qig::qig(model, exec, calib, ig_steps);
  return qig::build_sensitivity(attr.per_token, iqr_k).lambda;
}

nlohmann::json lambda_json(const Eigen::VectorXd& lambda) {
  nlohmann::json a = nlohmann::json::array();
  for (Eigen::Index i = 0; i < lambda.size(); ++i) a.push_back(lambda[i]);
  return a;
}

double block_error_fro(const qig::BlockModel& model, const Eigen::MatrixXd& x,
                       const qig::QuantizedExecution& exec) {
  const Eigen::MatrixXd y_fp = qig::block_forward(model, x);
  const Eigen::MatrixXd y_q = qig::block_forward_quantized(model, x, exec);
  return (y_fp - y_q).norm();
}

qig::QuantizedModelFile model_file_skeleton(const qig::BlockModel& model,
                                            const std::string& method,
                                            const qig::QuantizedExecution& e) {
  qig::QuantizedModelFile f;
  f.kind = model.kind;
  f.d = model.d;
  f.m = model.m;
  f.seq_len = model.seq_len;
  f.method = method;
  f.weight_cfg = *e.weight_cfg;
  f.act_cfg = e.act_cfg;
  return f;
}

int cmd_quantize(const std::string& model_path, const std::string& calib_path,
                 const std::string& method, const FormatOpts& fmt_opts,
                 int ig_steps, double iqr_k, const std::string& out_dir) {
  const qig::BlockModel model = qig::read_model(model_path);
  const Eigen::MatrixXd calib = load_single_batch(calib_path, "quantize");
  const qig::QuantizedExecution exec = make_exec(fmt_opts);
  const qig::QuantConfig wcfg = *exec.weight_cfg;

  nlohmann::json report;
  report["method"] = method;
  qig::QuantizedModelFile out_model = model_file_skeleton(model, method, exec);

  if (method == "cwe") {
    const Eigen::VectorXd lambda =
        lambda_from_attribution(model, exec, calib, ig_steps, iqr_k);
    info("equalizing " + std::to_string(model.sublayers().size()) +
         " sub-layer(s)");
    const qig::EqualizedBlock eq =
        qig::equalize_and_quantize(model, calib, lambda, wcfg, exec.act_cfg);

    const std::string trace_path = out_path(out_dir, "trace.csv");
    std::ofstream trace(trace_path);
    if (!trace)
      throw std::runtime_error("cannot open for writing: " + trace_path);
    trace << "sublayer,alpha,weighted_error\n";
    nlohmann::json layers;
    for (const std::string& name : model.sublayers()) {
      const qig::EqualizationResult& r = eq.results.at(name);
      for (const auto& [alpha, err] : r.trace)
        trace << name << ',' << fmt(alpha) << ',' << fmt(err) << '\n';
      nlohmann::json lj;
      lj["alpha"] = r.alpha;
      lj["weighted_error"] = r.weighted_error;
      lj["identity_error"] = r.trace.back().second;
      lj["candidates"] = r.trace.size();
      layers[name] = lj;
      out_model.sublayers[name] = {eq.quantized_weights.at(name),
                                   eq.exec.equalization.at(name)};
    }
    if (!trace) throw std::runtime_error("write failed: " + trace_path);
    report["sublayers"] = layers;
    report["lambda"] = lambda_json(lambda);
    report["block_error_fro"] = block_error_fro(model, calib, eq.exec);
    report["block_error_fro_identity"] = block_error_fro(model, calib, exec);
    std::cout << "wrote " << trace_path << "\n";
  } else if (method == "gptq") {
    if (fmt_opts.has_abits)
      throw std::runtime_error(
          "gptq is weight-only here; drop --abits or use --method cwe");
    const Eigen::VectorXd lambda =
        lambda_from_attribution(model, exec, calib, ig_steps, iqr_k);
    const auto inputs = qig::sublayer_inputs(model, calib);
    qig::BlockModel compensated = model;
    nlohmann::json layers;
    for (const std::string& name : model.sublayers()) {
      const Eigen::MatrixXd& w = model.weight(name);
      const Eigen::MatrixXd& xs = inputs.at(name);
      const qig::WeightedHessian h = qig::weighted_hessian(xs, lambda);
      const qig::GptqResult g = qig::gptq_quantize(w, h, wcfg);
      const Eigen::MatrixXd what = qig::dequantize(g.weights);
      const Eigen::MatrixXd rtn_hat = qig::fake_quantize(w, wcfg);
      compensated.weights[name] = what;
      nlohmann::json lj;
      lj["weighted_error"] = g.weighted_error;
      lj["rtn_weighted_error"] =
          qig::weighted_layer_error(w, rtn_hat, xs, lambda);
      lj["damping_added"] = h.damping_added;
      nlohmann::json per_token = nlohmann::json::array();
      const Eigen::MatrixXd delta_x = (w - what) * xs;
      for (Eigen::Index t = 0; t < delta_x.cols(); ++t)
        per_token.push_back(delta_x.col(t).squaredNorm());
      lj["per_token_error"] = per_token;
      layers[name] = lj;
      out_model.sublayers[name] = {g.weights, std::nullopt};
      info("gptq " + name + ": weighted_error=" + fmt(g.weighted_error));
    }
    report["sublayers"] = layers;
    report["lambda"] = lambda_json(lambda);
    report["block_error_fro"] =
        (qig::block_forward(model, calib) -
         qig::block_forward(compensated, calib))
            .norm();
  } else if (method == "rtn") {
    const Eigen::VectorXd lambda = Eigen::VectorXd::Constant(
        calib.cols(), 1.0 / static_cast<double>(calib.cols()));
    const auto inputs = qig::sublayer_inputs(model, calib);
    nlohmann::json layers;
    for (const std::string& name : model.sublayers()) {
      const Eigen::MatrixXd& w = model.weight(name);
      const qig::QuantizedTensor q = qig::rtn_quantize(w, wcfg);
      nlohmann::json lj;
      lj["weighted_error"] = qig::weighted_layer_error(
          w, qig::dequantize(q), inputs.at(name), lambda);
      layers[name] = lj;
      out_model.sublayers[name] = {q, std::nullopt};
    }
    report["sublayers"] = layers;
    report["lambda"] = "uniform";
    report["block_error_fro"] = block_error_fro(model, calib, exec);
  } else {
    throw std::runtime_error("unknown method '" + method + "'");
  }

  const std::string model_out = out_path(out_dir, "quantized_model.json");
  const std::string report_out = out_path(out_dir, "report.json");
  qig::write_quantized_model(model_out, out_model);
  qig::write_json_file(report_out, report);
  std::cout << "wrote " << model_out << "\n";
  std::cout << "wrote " << report_out << "\n";
  return 0;
}

// ---- verify ---------------------------------------------------------------

int cmd_verify(std::uint64_t seed, bool corrupt,
               const std::optional<std::string>& out_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto checks = qig::run_property_suite(seed, corrupt);
  const auto t1 = std::chrono::steady_clock::now();

  for (const auto& c : checks) {
    std::cout << (c.passed ? "PASS " : "FAIL ") << c.name
              << " measured=" << fmt(c.measured)
              << " tolerance=" << fmt(c.tolerance);
    if (!c.detail.empty()) std::cout << " (" << c.detail << ")";
    std::cout << "\n";
    std::cerr << c.name << ": " << fmt(c.elapsed_ms) << " ms\n";
  }
  const bool ok = qig::all_passed(checks);
  int passed = 0;
  for (const auto& c : checks) passed += c.passed ? 1 : 0;
  std::cout << "verify: " << passed << "/" << checks.size()
            << " checks passed\n";
  std::cerr << "verify total: "
            << std::chrono::duration<double, std::milli>(t1 - t0).count()
            << " ms\n";

  if (out_dir) {
    nlohmann::json j;
    j["seed"] = seed;
    j["all_passed"] = ok;
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& c : checks) {
      nlohmann::json cj;
      cj["name"] = c.name;
      cj["passed"] = c.passed;
      cj["measured"] = c.measured;
      cj["tolerance"] = c.tolerance;
      if (!c.detail.empty()) cj["detail"] = c.detail;
      arr.push_back(cj);
    }
    j["checks"] = arr;
    const std::string path = out_path(*out_dir, "verify.json");
    qig::write_json_file(path, j);
    std::cout << "wrote " << path << "\n";
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Token-sensitivity attribution and token-weighted post-training "
      "quantization on desk-scale transformer blocks"};
  app.require_subcommand(1);

  // gen-model
  std::string gen_kind = "mlp";
  Eigen::Index gen_d = 8, gen_m = 8, gen_t = 16;
  std::uint64_t gen_seed = 0;
  std::vector<std::string> gen_outliers;
  std::string gen_out = ".";
  auto* gen = app.add_subcommand(
      "gen-model", "Generate a seeded block model and calibration batch");
  gen->add_option("--kind", gen_kind, "linear | mlp | attention")
      ->capture_default_str();
  gen->add_option("--d", gen_d, "Hidden size")->capture_default_str();
  gen->add_option("--m", gen_m, "Output rows (linear blocks only)")
      ->capture_default_str();
  gen->add_option("--T", gen_t, "Token count")->capture_default_str();
  gen->add_option("--seed", gen_seed, "Root seed")->capture_default_str();
  gen->add_option("--inject-outlier", gen_outliers,
                  "token:INDEX:SCALE or channel:INDEX:SCALE; repeatable");
  gen->add_option("--out", gen_out, "Output directory")->capture_default_str();

  // attribute
  std::string att_model, att_calib, att_out = ".";
  FormatOpts att_fmt;
  CLI::Option* att_abits = nullptr;
  int att_steps = 32;
  double att_k = 1.5;
  auto* att = app.add_subcommand(
      "attribute", "Per-token sensitivity of the quantization distortion");
  att->add_option("--model", att_model, "Model JSON")->required();
  att->add_option("--calib", att_calib, "Calibration tensor JSON")->required();
  add_format_flags(att, &att_fmt, &att_abits);
  att->add_option("--ig-steps", att_steps, "Path integral steps")
      ->capture_default_str();
  att->add_option("--iqr-k", att_k, "IQR clip multiplier")
      ->capture_default_str();
  att->add_option("--out", att_out, "Output directory")->capture_default_str();

  // quantize
  std::string qz_model, qz_calib, qz_method = "cwe", qz_out = ".";
  FormatOpts qz_fmt;
  CLI::Option* qz_abits = nullptr;
  int qz_steps = 32;
  double qz_k = 1.5;
  auto* qz = app.add_subcommand(
      "quantize", "Token-weighted quantization of every linear sub-layer");
  qz->add_option("--model", qz_model, "Model JSON")->required();
  qz->add_option("--calib", qz_calib, "Calibration tensor JSON")->required();
  qz->add_option("--method", qz_method, "cwe | gptq | rtn")
      ->capture_default_str();
  add_format_flags(qz, &qz_fmt, &qz_abits);
  qz->add_option("--ig-steps", qz_steps, "Path integral steps")
      ->capture_default_str();
  qz->add_option("--iqr-k", qz_k, "IQR clip multiplier")
      ->capture_default_str();
  qz->add_option("--out", qz_out, "Output directory")->capture_default_str();

  // verify
  std::uint64_t vf_seed = 0;
  bool vf_corrupt = false;
  std::string vf_out;
  auto* vf = app.add_subcommand("verify", "Run the seeded property suite");
  vf->add_option("--seed", vf_seed, "Root seed")->capture_default_str();
  vf->add_flag("--corrupt-tolerances", vf_corrupt,
               "Negative control: make every tolerance unsatisfiable");
  auto* vf_out_opt = vf->add_option("--out", vf_out, "Output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed())
      return cmd_gen_model(gen_kind, gen_d, gen_m, gen_t, gen_seed,
                           gen_outliers, gen_out);
    if (att->parsed()) {
      att_fmt.has_abits = att_abits->count() > 0;
      return cmd_attribute(att_model, att_calib, att_fmt, att_steps, att_k,
                           att_out);
    }
    if (qz->parsed()) {
      qz_fmt.has_abits = qz_abits->count() > 0;
      return cmd_quantize(qz_model, qz_calib, qz_method, qz_fmt, qz_steps,
                          qz_k, qz_out);
    }
    if (vf->parsed()) {
      std::optional<std::string> out;
      if (vf_out_opt->count() > 0) out = vf_out;
      return cmd_verify(vf_seed, vf_corrupt, out);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
