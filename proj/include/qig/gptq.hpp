#pragma once

#include <Eigen/Dense>

#include "qig/quantizer.hpp"

namespace qig {

// Token-weighted proxy Hessian H = sum_i lambda_i X_i X_i^T + delta I with
// delta = damping_frac * mean(diag) added once. `matrix` stores the damped
// form, which must be positive definite; `damping_added` records delta so the
// undamped quadratic form stays recoverable.
struct WeightedHessian {
  Eigen::MatrixXd matrix;
  double damping_frac = 0.01;
  double damping_added = 0.0;
  Eigen::VectorXd lambda;
};

WeightedHessian weighted_hessian(const Eigen::MatrixXd& x,
                                 const Eigen::VectorXd& lambda,
                                 double damping_frac = 0.01);

struct GptqResult {
  QuantizedTensor weights;
  // sum_i lambda_i ||(W - What) X_i||^2, evaluated through the undamped
  // Hessian as trace((W - What) H0 (W - What)^T).
  double weighted_error = 0.0;
};

// Column-by-column quantization in natural order with error propagation:
// column j is quantized, the scaled residual is folded into the remaining
// columns through row j of the upper Cholesky factor of H^-1, and the loop
// advances. Group scales and zero-points are fixed up front from the
// unmodified W, so error compensation never moves the quantization grid.
GptqResult gptq_quantize(const Eigen::MatrixXd& w, const WeightedHessian& h,
                         const QuantConfig& wcfg);

// Round-to-nearest baseline: plain quantization of W with no error
// compensation.
QuantizedTensor rtn_quantize(const Eigen::MatrixXd& w, const QuantConfig& wcfg);

// sum_i lambda_i ||(W - What) X_i||^2 computed directly from the calibration
// tokens.
double weighted_layer_error(const Eigen::MatrixXd& w,
                            const Eigen::MatrixXd& what,
                            const Eigen::MatrixXd& x,
                            const Eigen::VectorXd& lambda);

}  // namespace qig
