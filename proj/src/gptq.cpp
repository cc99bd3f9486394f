#include "qig/gptq.hpp"

#include <cmath>
#include <stdexcept>

namespace qig {

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

int clip_int(double c, int lo, int hi) {
  if (c < lo) return lo;
  if (c > hi) return hi;
  return static_cast<int>(c);
}

}  // namespace

WeightedHessian weighted_hessian(const Eigen::MatrixXd& x,
                                 const Eigen::VectorXd& lambda,
                                 double damping_frac) {
  require(x.rows() >= 1 && x.cols() >= 1, "weighted_hessian: empty input");
  require(x.allFinite(), "weighted_hessian: non-finite input");
  require(lambda.size() == x.cols(), "weighted_hessian: lambda length");
  require((lambda.array() >= 0.0).all() &&
              std::abs(lambda.sum() - 1.0) <= 1e-9,
          "weighted_hessian: lambda must be a distribution");
  require(damping_frac >= 0.0, "weighted_hessian: negative damping");

  WeightedHessian h;
  h.damping_frac = damping_frac;
  h.lambda = lambda;
  h.matrix = x * lambda.asDiagonal() * x.transpose();
  h.damping_added = damping_frac * h.matrix.diagonal().mean();
  h.matrix.diagonal().array() += h.damping_added;

  Eigen::LLT<Eigen::MatrixXd> llt(h.matrix);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error(
        "weighted_hessian: Cholesky failed after damping; calibration is "
        "rank-deficient, increase damping");
  return h;
}

GptqResult gptq_quantize(const Eigen::MatrixXd& w, const WeightedHessian& h,
                         const QuantConfig& wcfg) {
  validate(wcfg);
  require(w.rows() >= 1 && w.cols() >= 1, "gptq: empty weight");
  require(w.allFinite(), "gptq: non-finite weight");
  require(h.matrix.rows() == w.cols() && h.matrix.cols() == w.cols(),
          "gptq: Hessian dimension mismatch");

  const Eigen::Index d = w.cols();

  Eigen::LLT<Eigen::MatrixXd> llt(h.matrix);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("gptq: Hessian is not positive definite");
  Eigen::MatrixXd hinv =
      llt.solve(Eigen::MatrixXd::Identity(d, d));
  hinv = ((hinv + hinv.transpose()) * 0.5).eval();
  Eigen::LLT<Eigen::MatrixXd> llt_inv(hinv);
  if (llt_inv.info() != Eigen::Success)
    throw std::runtime_error("gptq: inverse Hessian lost definiteness");
  // hinv = U^T U with U upper triangular; row j of U drives the propagation
  // of column j's rounding error into columns j+1..d-1.
  Eigen::MatrixXd u = llt_inv.matrixL().transpose();

  // Static grid: scales and zero-points from the unmodified W.
  const QuantizedTensor grid = quantize(w, wcfg);
  const int lo = wcfg.code_min(), hi = wcfg.code_max();

  GptqResult out;
  out.weights = grid;
  Eigen::MatrixXd wc = w;  // working copy, error-compensated in place
  for (Eigen::Index j = 0; j < d; ++j) {
    Eigen::VectorXd deq(w.rows());
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      const double s = scale_for(grid, r, j);
      const int z = zero_point_for(grid, r, j);
      int code = z;  // all-zero group: code = zero-point, dequantizes to 0
      if (s != 0.0)
        code = clip_int(round_half_even(wc(r, j) / s) + z, lo, hi);
      out.weights.codes(r, j) = code;
      deq(r) = s * (code - z);
    }
    if (j + 1 < d) {
      const Eigen::VectorXd err = (wc.col(j) - deq) / u(j, j);
      wc.rightCols(d - j - 1).noalias() -=
          err * u.row(j).tail(d - j - 1);
    }
  }

  const Eigen::MatrixXd delta = w - dequantize(out.weights);
  Eigen::MatrixXd h0 = h.matrix;
  h0.diagonal().array() -= h.damping_added;
  out.weighted_error = std::max(0.0, (delta * h0 * delta.transpose()).trace());
  return out;
}

QuantizedTensor rtn_quantize(const Eigen::MatrixXd& w,
                             const QuantConfig& wcfg) {
  return quantize(w, wcfg);
}

double weighted_layer_error(const Eigen::MatrixXd& w,
                            const Eigen::MatrixXd& what,
                            const Eigen::MatrixXd& x,
                            const Eigen::VectorXd& lambda) {
  require(w.rows() == what.rows() && w.cols() == what.cols(),
          "weighted_layer_error: shape mismatch");
  require(w.cols() == x.rows() && lambda.size() == x.cols(),
          "weighted_layer_error: dimension mismatch");
  const Eigen::MatrixXd gap = (w - what) * x;
  double total = 0.0;
  for (Eigen::Index t = 0; t < x.cols(); ++t)
    total += lambda(t) * gap.col(t).squaredNorm();
  return total;
}

}  // namespace qig
