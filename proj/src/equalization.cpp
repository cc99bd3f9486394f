#include "qig/equalization.hpp"

#include <cmath>
#include <stdexcept>

namespace qig {

namespace {

constexpr double kScaleFloor = 1e-5;

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

void check_layer(const Eigen::MatrixXd& w, const Eigen::MatrixXd& x,
                 const Eigen::VectorXd& scales,
                 const Eigen::VectorXd& lambda) {
  require(w.cols() == x.rows(), "equalization: W and X dimension mismatch");
  require(scales.size() == w.cols(), "equalization: scale length mismatch");
  require((scales.array() > 0.0).all() && scales.allFinite(),
          "equalization: scales must be positive and finite");
  require(lambda.size() == x.cols(), "equalization: lambda length mismatch");
  require((lambda.array() >= 0.0).all(),
          "equalization: lambda must be nonnegative");
  require(std::abs(lambda.sum() - 1.0) <= 1e-9,
          "equalization: lambda must sum to 1");
}

double weighted_residual(const Eigen::MatrixXd& what_v,
                         const Eigen::MatrixXd& wx,
                         const Eigen::VectorXd& lambda) {
  double total = 0.0;
  for (Eigen::Index t = 0; t < wx.cols(); ++t)
    total += lambda(t) * (what_v.col(t) - wx.col(t)).squaredNorm();
  return total;
}

}  // namespace

double weighted_objective_wa(const Eigen::MatrixXd& w,
                             const Eigen::MatrixXd& x,
                             const Eigen::VectorXd& scales,
                             const Eigen::VectorXd& lambda,
                             const QuantConfig& wcfg, const QuantConfig& acfg) {
  check_layer(w, x, scales, lambda);
  const Eigen::MatrixXd what = fake_quantize(w * scales.asDiagonal(), wcfg);
  const Eigen::MatrixXd xs = scales.cwiseInverse().asDiagonal() * x;
  const Eigen::MatrixXd xq = fake_quantize(xs, acfg);
  return weighted_residual(what * xq, w * x, lambda);
}

double weighted_objective_weight_only(const Eigen::MatrixXd& w,
                                      const Eigen::MatrixXd& x,
                                      const Eigen::VectorXd& scales,
                                      const Eigen::VectorXd& lambda,
                                      const QuantConfig& wcfg) {
  check_layer(w, x, scales, lambda);
  const Eigen::MatrixXd what = fake_quantize(w * scales.asDiagonal(), wcfg);
  const Eigen::MatrixXd xs = scales.cwiseInverse().asDiagonal() * x;
  return weighted_residual(what * xs, w * x, lambda);
}

Eigen::VectorXd equalization_candidate(const Eigen::MatrixXd& w,
                                       const Eigen::MatrixXd& x, double alpha) {
  require(w.cols() == x.rows(), "equalization: W and X dimension mismatch");
  Eigen::VectorXd scales(w.cols());
  for (Eigen::Index c = 0; c < w.cols(); ++c) {
    const double xmax = x.row(c).cwiseAbs().maxCoeff();
    const double wmax = w.col(c).cwiseAbs().maxCoeff();
    if (xmax == 0.0 || wmax == 0.0) {
      scales(c) = 1.0;  // dead channel, leave it alone
      continue;
    }
    scales(c) =
        std::max(std::pow(xmax, alpha) / std::pow(wmax, 1.0 - alpha),
                 kScaleFloor);
  }
  return scales;
}

EqualizationResult search_scales(const Eigen::MatrixXd& w,
                                 const Eigen::MatrixXd& x,
                                 const Eigen::VectorXd& lambda,
                                 const QuantConfig& wcfg,
                                 const std::optional<QuantConfig>& acfg,
                                 int grid_size) {
  require(grid_size >= 2, "search_scales: grid_size must be >= 2");
  auto objective = [&](const Eigen::VectorXd& scales) {
    return acfg ? weighted_objective_wa(w, x, scales, lambda, wcfg, *acfg)
                : weighted_objective_weight_only(w, x, scales, lambda, wcfg);
  };

  EqualizationResult best;
  best.lambda_used = lambda;
  double best_err = 0.0;
  bool have_best = false;
  for (int g = 0; g < grid_size; ++g) {
    const double alpha = static_cast<double>(g) / (grid_size - 1);
    Eigen::VectorXd scales = equalization_candidate(w, x, alpha);
    const double err = objective(scales);
    best.trace.emplace_back(alpha, err);
    if (!have_best || err < best_err) {
      have_best = true;
      best_err = err;
      best.alpha = alpha;
      best.scales = std::move(scales);
    }
  }

  const Eigen::VectorXd identity = Eigen::VectorXd::Ones(w.cols());
  const double id_err = objective(identity);
  best.trace.emplace_back(-1.0, id_err);
  if (id_err <= best_err) {
    best.alpha = -1.0;
    best.scales = identity;
    best_err = id_err;
  }
  best.weighted_error = best_err;
  return best;
}

EqualizedBlock equalize_and_quantize(const BlockModel& model,
                                     const Eigen::MatrixXd& x_calib,
                                     const Eigen::VectorXd& lambda,
                                     const QuantConfig& wcfg,
                                     const std::optional<QuantConfig>& acfg,
                                     int grid_size) {
  EqualizedBlock out;
  out.exec.weight_cfg = wcfg;
  out.exec.act_cfg = acfg;
  const auto inputs = sublayer_inputs(model, x_calib);
  for (const auto& name : model.sublayers()) {
    const Eigen::MatrixXd& w = model.weight(name);
    const Eigen::MatrixXd& xin = inputs.at(name);
    EqualizationResult res =
        search_scales(w, xin, lambda, wcfg, acfg, grid_size);
    out.quantized_weights.emplace(
        name, quantize(w * res.scales.asDiagonal(), wcfg));
    out.exec.equalization[name] = res.scales;
    out.results.emplace(name, std::move(res));
  }
  return out;
}

}  // namespace qig
