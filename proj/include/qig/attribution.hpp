#pragma once

#include <Eigen/Dense>

#include <functional>
#include <vector>

#include "qig/block.hpp"

namespace qig {

// Per-token mean absolute output gap and its mean over tokens. The scalar is
// the mean, not the sum, so it is comparable across sequence lengths.
struct DistortionError {
  Eigen::VectorXd per_token;
  double scalar = 0.0;
};

DistortionError distortion_error(const Eigen::MatrixXd& y_fp,
                                 const Eigen::MatrixXd& y_q);

enum class BaselineKind { QuantizedInput, Zero, Custom };

struct AttributionResult {
  Eigen::VectorXd per_token;    // column sums of per_element
  Eigen::MatrixXd per_element;  // d x T
  int steps = 0;
  BaselineKind baseline_kind = BaselineKind::Custom;
  double residual = 0.0;  // | sum(per_element) - (L(x) - L(baseline)) |
};

// Differentiable scalar objective of a d x T input.
struct ScalarObjective {
  std::function<double(const Eigen::MatrixXd&)> value;
  std::function<Eigen::MatrixXd(const Eigen::MatrixXd&)> gradient;
};

// Midpoint-rule path integral of the gradient along the straight line from
// baseline to x, weighted elementwise by (x - baseline):
//   per_element = (x - baseline) .* (1/n) sum_k grad(baseline + a_k (x - b)),
// with a_k = (k - 1/2) / n. Steps accumulate in fixed order, so results are
// deterministic. The residual field carries the completeness gap.
AttributionResult integrated_gradients(const ScalarObjective& objective,
                                       const Eigen::MatrixXd& x,
                                       const Eigen::MatrixXd& baseline,
                                       int steps,
                                       BaselineKind kind = BaselineKind::Custom);

// Distortion objective L for a fixed (model, exec) pair: value and analytic
// input gradient of the mean absolute gap between the full-precision and
// quantized executions.
ScalarObjective make_distortion_objective(const BlockModel& model,
                                          const QuantizedExecution& exec);

// Attribution baseline: the fake-quantized input when activation quantization
// is enabled (bit-identical to fake_quantize of x under exec.act_cfg),
// otherwise the zero matrix.
Eigen::MatrixXd qig_baseline(const QuantizedExecution& exec,
                             const Eigen::MatrixXd& x);

// Token sensitivity of the quantization gap: integrated gradients of L from
// the baseline above to x. A token's score is the column sum of its
// elementwise attributions.
AttributionResult qig(const BlockModel& model, const QuantizedExecution& exec,
                      const Eigen::MatrixXd& x, int steps = 32);

// Batch items are attributed independently; average the per-token scores with
// averaged_scores when one vector is needed.
std::vector<AttributionResult> qig_batched(
    const BlockModel& model, const QuantizedExecution& exec,
    const std::vector<Eigen::MatrixXd>& xs, int steps = 32);

Eigen::VectorXd averaged_scores(const std::vector<AttributionResult>& results);

// | sum of attributions - (L_at_x - L_at_baseline) |.
double completeness_check(const AttributionResult& result, double l_at_x,
                          double l_at_baseline);

// score[i] = | L(x) - L(x with token i replaced by its baseline column) |.
// The reference oracle for attribution order: independent of gradients.
Eigen::VectorXd leave_one_out_sensitivity(const BlockModel& model,
                                          const QuantizedExecution& exec,
                                          const Eigen::MatrixXd& x);

}  // namespace qig
