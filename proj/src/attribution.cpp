#include "qig/attribution.hpp"

#include <cmath>
#include <stdexcept>

namespace qig {

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

}  // namespace

DistortionError distortion_error(const Eigen::MatrixXd& y_fp,
                                 const Eigen::MatrixXd& y_q) {
  require(y_fp.rows() == y_q.rows() && y_fp.cols() == y_q.cols(),
          "distortion_error: shape mismatch");
  require(y_fp.size() > 0, "distortion_error: empty outputs");
  require(y_fp.allFinite() && y_q.allFinite(),
          "distortion_error: non-finite outputs");
  DistortionError out;
  out.per_token = (y_fp - y_q).cwiseAbs().colwise().mean().transpose();
  out.scalar = out.per_token.mean();
  return out;
}

AttributionResult integrated_gradients(const ScalarObjective& objective,
                                       const Eigen::MatrixXd& x,
                                       const Eigen::MatrixXd& baseline,
                                       int steps, BaselineKind kind) {
  require(steps >= 1, "integrated_gradients: steps must be >= 1");
  require(x.rows() == baseline.rows() && x.cols() == baseline.cols(),
          "integrated_gradients: baseline shape mismatch");
  require(static_cast<bool>(objective.value) &&
              static_cast<bool>(objective.gradient),
          "integrated_gradients: objective is incomplete");

  const Eigen::MatrixXd delta = x - baseline;
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(x.rows(), x.cols());
  for (int k = 1; k <= steps; ++k) {
    const double alpha = (k - 0.5) / steps;
    acc += objective.gradient(baseline + alpha * delta);
  }
  acc /= static_cast<double>(steps);

  AttributionResult result;
  result.per_element = delta.cwiseProduct(acc);
  result.per_token = result.per_element.colwise().sum().transpose();
  result.steps = steps;
  result.baseline_kind = kind;
  result.residual = completeness_check(result, objective.value(x),
                                       objective.value(baseline));
  return result;
}

ScalarObjective make_distortion_objective(const BlockModel& model,
                                          const QuantizedExecution& exec) {
  ScalarObjective obj;
  obj.value = [&model, &exec](const Eigen::MatrixXd& xi) {
    return distortion_error(block_forward(model, xi),
                            block_forward_quantized(model, xi, exec))
        .scalar;
  };
  obj.gradient = [&model, &exec](const Eigen::MatrixXd& xi) {
    return distortion_with_grad(model, exec, xi).grad;
  };
  return obj;
}

Eigen::MatrixXd qig_baseline(const QuantizedExecution& exec,
                             const Eigen::MatrixXd& x) {
  if (exec.act_cfg) return fake_quantize(x, *exec.act_cfg);
  return Eigen::MatrixXd::Zero(x.rows(), x.cols());
}

AttributionResult qig(const BlockModel& model, const QuantizedExecution& exec,
                      const Eigen::MatrixXd& x, int steps) {
  const Eigen::MatrixXd baseline = qig_baseline(exec, x);
  const BaselineKind kind =
      exec.act_cfg ? BaselineKind::QuantizedInput : BaselineKind::Zero;
  return integrated_gradients(make_distortion_objective(model, exec), x,
                              baseline, steps, kind);
}

std::vector<AttributionResult> qig_batched(
    const BlockModel& model, const QuantizedExecution& exec,
    const std::vector<Eigen::MatrixXd>& xs, int steps) {
  require(!xs.empty(), "qig_batched: empty batch");
  std::vector<AttributionResult> results;
  results.reserve(xs.size());
  for (const auto& x : xs) results.push_back(qig(model, exec, x, steps));
  return results;
}

Eigen::VectorXd averaged_scores(const std::vector<AttributionResult>& results) {
  require(!results.empty(), "averaged_scores: empty batch");
  Eigen::VectorXd acc = results.front().per_token;
  for (std::size_t i = 1; i < results.size(); ++i) {
    require(results[i].per_token.size() == acc.size(),
            "averaged_scores: inconsistent token counts");
    acc += results[i].per_token;
  }
  return acc / static_cast<double>(results.size());
}

double completeness_check(const AttributionResult& result, double l_at_x,
                          double l_at_baseline) {
  return std::abs(result.per_element.sum() - (l_at_x - l_at_baseline));
}

Eigen::VectorXd leave_one_out_sensitivity(const BlockModel& model,
                                          const QuantizedExecution& exec,
                                          const Eigen::MatrixXd& x) {
  const Eigen::MatrixXd baseline = qig_baseline(exec, x);
  auto value = [&](const Eigen::MatrixXd& xi) {
    return distortion_error(block_forward(model, xi),
                            block_forward_quantized(model, xi, exec))
        .scalar;
  };
  const double ref = value(x);
  Eigen::VectorXd scores(x.cols());
  Eigen::MatrixXd xi = x;
  for (Eigen::Index t = 0; t < x.cols(); ++t) {
    xi.col(t) = baseline.col(t);
    scores(t) = std::abs(ref - value(xi));
    xi.col(t) = x.col(t);
  }
  return scores;
}

}  // namespace qig
