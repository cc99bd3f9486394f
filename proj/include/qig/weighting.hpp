#pragma once

#include <Eigen/Dense>

namespace qig {

// Quantile with linear interpolation between order statistics:
// q(p) = v(h) + (v(h+1) - v(h)) * frac, h = floor((n-1) p).
double quantile_linear(const Eigen::VectorXd& values, double p);

// Clamp every entry into [Q1 - k*IQR, Q3 + k*IQR]. Preserves weak ordering.
Eigen::VectorXd iqr_clip(const Eigen::VectorXd& scores, double k = 1.5);

// lambda_i = c_i / sum(c). Entries must be nonnegative; an all-zero input
// degenerates to the uniform distribution 1/T.
Eigen::VectorXd normalize_lambda(const Eigen::VectorXd& clipped);

// Raw attribution scores -> token weights: magnitudes are taken first, then
// IQR-clipped, then normalized to a distribution.
struct SensitivityVector {
  Eigen::VectorXd raw;
  Eigen::VectorXd magnitude;
  Eigen::VectorXd clipped;
  Eigen::VectorXd lambda;
  double iqr_multiplier = 1.5;
  static constexpr const char* quartile_method = "linear-interpolation";
};

SensitivityVector build_sensitivity(const Eigen::VectorXd& raw_scores,
                                    double k = 1.5);

}  // namespace qig
