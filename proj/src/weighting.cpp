#include "qig/weighting.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace qig {

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

}  // namespace

double quantile_linear(const Eigen::VectorXd& values, double p) {
  require(values.size() >= 1, "quantile: empty vector");
  require(values.allFinite(), "quantile: non-finite values");
  require(p >= 0.0 && p <= 1.0, "quantile: p out of [0, 1]");
  std::vector<double> v(values.data(), values.data() + values.size());
  std::sort(v.begin(), v.end());
  const double pos = (static_cast<double>(v.size()) - 1.0) * p;
  const auto h = static_cast<std::size_t>(std::floor(pos));
  if (h + 1 >= v.size()) return v.back();
  return v[h] + (v[h + 1] - v[h]) * (pos - std::floor(pos));
}

Eigen::VectorXd iqr_clip(const Eigen::VectorXd& scores, double k) {
  require(scores.size() >= 1, "iqr_clip: empty vector");
  require(scores.allFinite(), "iqr_clip: non-finite scores");
  require(k >= 0.0, "iqr_clip: negative multiplier");
  const double q1 = quantile_linear(scores, 0.25);
  const double q3 = quantile_linear(scores, 0.75);
  const double iqr = q3 - q1;
  const double lo = q1 - k * iqr;
  const double hi = q3 + k * iqr;
  return scores.unaryExpr(
      [lo, hi](double s) { return std::clamp(s, lo, hi); });
}

Eigen::VectorXd normalize_lambda(const Eigen::VectorXd& clipped) {
  require(clipped.size() >= 1, "normalize_lambda: empty vector");
  require(clipped.allFinite(), "normalize_lambda: non-finite input");
  require((clipped.array() >= 0.0).all(),
          "normalize_lambda: negative entries");
  const double total = clipped.sum();
  if (total == 0.0)
    return Eigen::VectorXd::Constant(clipped.size(),
                                     1.0 / static_cast<double>(clipped.size()));
  return clipped / total;
}

SensitivityVector build_sensitivity(const Eigen::VectorXd& raw_scores,
                                    double k) {
  SensitivityVector out;
  out.raw = raw_scores;
  out.magnitude = raw_scores.cwiseAbs();
  out.clipped = iqr_clip(out.magnitude, k);
  out.lambda = normalize_lambda(out.clipped);
  out.iqr_multiplier = k;
  return out;
}

}  // namespace qig
