#pragma once

#include <Eigen/Dense>

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "qig/block.hpp"
#include "qig/quantizer.hpp"

namespace qig {

// Token-weighted quantization error of a single linear layer after channel
// equalization: sum_i lambda_i || fq_W(W E) fq_X(E^-1 X_i) - W X_i ||^2 with
// tokens X_i as columns. The weight-only variant leaves the activation path
// unquantized: fq_W(W E) (E^-1 X_i).
double weighted_objective_wa(const Eigen::MatrixXd& w,
                             const Eigen::MatrixXd& x,
                             const Eigen::VectorXd& scales,
                             const Eigen::VectorXd& lambda,
                             const QuantConfig& wcfg, const QuantConfig& acfg);

double weighted_objective_weight_only(const Eigen::MatrixXd& w,
                                      const Eigen::MatrixXd& x,
                                      const Eigen::VectorXd& scales,
                                      const Eigen::VectorXd& lambda,
                                      const QuantConfig& wcfg);

// One-parameter candidate family: E(alpha)_c = xmax_c^alpha / wmax_c^(1-alpha)
// with xmax_c = max_t |X(c,t)| and wmax_c = max_r |W(r,c)|. A channel whose
// xmax or wmax is zero gets scale 1, and every scale is floored at 1e-5.
Eigen::VectorXd equalization_candidate(const Eigen::MatrixXd& w,
                                       const Eigen::MatrixXd& x, double alpha);

// alpha = -1 marks the identity candidate, which is always searched last.
struct EqualizationResult {
  Eigen::VectorXd scales;
  double weighted_error = 0.0;
  double alpha = -1.0;
  std::vector<std::pair<double, double>> trace;  // (alpha, error) per candidate
  Eigen::VectorXd lambda_used;
};

// Evaluates the candidate family on a uniform alpha grid over [0, 1] plus the
// identity. Among grid candidates ties go to the smaller alpha; the identity
// wins whenever its error is no worse than the best grid candidate.
EqualizationResult search_scales(const Eigen::MatrixXd& w,
                                 const Eigen::MatrixXd& x,
                                 const Eigen::VectorXd& lambda,
                                 const QuantConfig& wcfg,
                                 const std::optional<QuantConfig>& acfg,
                                 int grid_size = 21);

// Per-sub-layer search over the whole block. Every sub-layer reuses the same
// token weights; sub-layer inputs are collected from a full-precision forward
// pass of the calibration batch. block_forward_quantized(model, x, exec)
// executes the equalized, quantized block.
struct EqualizedBlock {
  QuantizedExecution exec;
  std::map<std::string, QuantizedTensor, std::less<>> quantized_weights;
  std::map<std::string, EqualizationResult, std::less<>> results;
};

EqualizedBlock equalize_and_quantize(const BlockModel& model,
                                     const Eigen::MatrixXd& x_calib,
                                     const Eigen::VectorXd& lambda,
                                     const QuantConfig& wcfg,
                                     const std::optional<QuantConfig>& acfg,
                                     int grid_size = 21);

}  // namespace qig
