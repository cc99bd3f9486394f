#include "qig/quantizer.hpp"

#include <cmath>
#include <stdexcept>

namespace qig {

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

void check_input(const Eigen::MatrixXd& t) {
  require(t.rows() > 0 && t.cols() > 0, "quantize: empty tensor");
  require(t.allFinite(), "quantize: non-finite input");
}

int clip_code(double c, int lo, int hi) {
  if (c < lo) return lo;
  if (c > hi) return hi;
  return static_cast<int>(c);
}

}  // namespace

int QuantConfig::code_min() const {
  return mode == QuantMode::Symmetric ? -(1 << (bits - 1)) : 0;
}

int QuantConfig::code_max() const {
  return mode == QuantMode::Symmetric ? (1 << (bits - 1)) - 1
                                      : (1 << bits) - 1;
}

QuantConfig QuantConfig::symmetric(int bits, Granularity g) {
  QuantConfig cfg;
  cfg.bits = bits;
  cfg.mode = QuantMode::Symmetric;
  cfg.granularity = g;
  return cfg;
}

QuantConfig QuantConfig::asymmetric_grouped(int bits, int group_size) {
  QuantConfig cfg;
  cfg.bits = bits;
  cfg.mode = QuantMode::Asymmetric;
  cfg.granularity = Granularity::PerGroup;
  cfg.group_size = group_size;
  return cfg;
}

void validate(const QuantConfig& cfg) {
  require(cfg.bits >= 2 && cfg.bits <= 8, "quantizer: bits out of [2, 8]");
  if (cfg.mode == QuantMode::Asymmetric)
    require(cfg.granularity == Granularity::PerGroup,
            "quantizer: asymmetric mode requires per-group granularity");
  else
    require(cfg.granularity != Granularity::PerGroup,
            "quantizer: symmetric mode excludes per-group granularity");
  if (cfg.granularity == Granularity::PerGroup)
    require(cfg.group_size >= 1, "quantizer: group_size must be positive");
}

double round_half_even(double x) {
  const double f = std::floor(x);
  const double d = x - f;
  if (d > 0.5) return f + 1.0;
  if (d < 0.5) return f;
  return std::fmod(f, 2.0) == 0.0 ? f : f + 1.0;
}

QuantizedTensor quantize_symmetric(const Eigen::MatrixXd& t,
                                   const QuantConfig& cfg) {
  validate(cfg);
  require(cfg.mode == QuantMode::Symmetric, "quantize_symmetric: wrong mode");
  check_input(t);

  const Eigen::Index rows = t.rows(), cols = t.cols();
  const int lo = cfg.code_min(), hi = cfg.code_max();
  const double qmax = hi;

  QuantizedTensor out;
  out.config = cfg;
  out.source_rows = rows;
  out.source_cols = cols;
  out.codes.setZero(rows, cols);

  // One scale group = a rectangular slab of the tensor.
  auto quantize_slab = [&](Eigen::Index r0, Eigen::Index nr, Eigen::Index c0,
                           Eigen::Index nc, double& scale) {
    const double m = t.block(r0, c0, nr, nc).cwiseAbs().maxCoeff();
    scale = m / qmax;
    if (scale == 0.0) return;  // all-zero group, codes stay 0
    for (Eigen::Index c = c0; c < c0 + nc; ++c)
      for (Eigen::Index r = r0; r < r0 + nr; ++r)
        out.codes(r, c) = clip_code(round_half_even(t(r, c) / scale), lo, hi);
  };

  switch (cfg.granularity) {
    case Granularity::PerTensor:
      out.scales.resize(1, 1);
      quantize_slab(0, rows, 0, cols, out.scales(0, 0));
      break;
    case Granularity::PerToken:
      out.scales.resize(1, cols);
      for (Eigen::Index c = 0; c < cols; ++c)
        quantize_slab(0, rows, c, 1, out.scales(0, c));
      break;
    case Granularity::PerChannel:
      out.scales.resize(rows, 1);
      for (Eigen::Index r = 0; r < rows; ++r)
        quantize_slab(r, 1, 0, cols, out.scales(r, 0));
      break;
    default:
      require(false, "quantize_symmetric: unsupported granularity");
  }
  return out;
}

QuantizedTensor quantize_asymmetric_grouped(const Eigen::MatrixXd& w,
                                            const QuantConfig& cfg) {
  validate(cfg);
  require(cfg.mode == QuantMode::Asymmetric,
          "quantize_asymmetric_grouped: wrong mode");
  check_input(w);

  const Eigen::Index rows = w.rows(), cols = w.cols();
  const Eigen::Index gs = cfg.group_size;
  const Eigen::Index ngroups = (cols + gs - 1) / gs;
  const int hi = cfg.code_max();
  const double levels = hi;

  QuantizedTensor out;
  out.config = cfg;
  out.source_rows = rows;
  out.source_cols = cols;
  out.codes.setZero(rows, cols);
  out.scales.setZero(rows, ngroups);
  out.zero_points.setZero(rows, ngroups);

  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index g = 0; g < ngroups; ++g) {
      const Eigen::Index c0 = g * gs;
      const Eigen::Index nc = std::min(gs, cols - c0);
      const auto seg = w.row(r).segment(c0, nc);
      const double lo_v = std::min(0.0, seg.minCoeff());
      const double hi_v = std::max(0.0, seg.maxCoeff());
      const double s = (hi_v - lo_v) / levels;
      out.scales(r, g) = s;
      if (s == 0.0) continue;  // all-zero group
      const int z = clip_code(round_half_even(-lo_v / s), 0, hi);
      out.zero_points(r, g) = z;
      for (Eigen::Index c = c0; c < c0 + nc; ++c)
        out.codes(r, c) = clip_code(round_half_even(w(r, c) / s) + z, 0, hi);
    }
  }
  return out;
}

QuantizedTensor quantize(const Eigen::MatrixXd& t, const QuantConfig& cfg) {
  return cfg.mode == QuantMode::Symmetric ? quantize_symmetric(t, cfg)
                                          : quantize_asymmetric_grouped(t, cfg);
}

double scale_for(const QuantizedTensor& q, Eigen::Index r, Eigen::Index c) {
  switch (q.config.granularity) {
    case Granularity::PerTensor: return q.scales(0, 0);
    case Granularity::PerToken: return q.scales(0, c);
    case Granularity::PerChannel: return q.scales(r, 0);
    case Granularity::PerGroup: return q.scales(r, c / q.config.group_size);
  }
  throw std::logic_error("scale_for: bad granularity");
}

int zero_point_for(const QuantizedTensor& q, Eigen::Index r, Eigen::Index c) {
  if (q.config.mode != QuantMode::Asymmetric) return 0;
  return q.zero_points(r, c / q.config.group_size);
}

Eigen::MatrixXd dequantize(const QuantizedTensor& q) {
  require(q.codes.rows() == q.source_rows && q.codes.cols() == q.source_cols,
          "dequantize: codes shape does not match source shape");
  Eigen::MatrixXd out(q.source_rows, q.source_cols);
  for (Eigen::Index c = 0; c < q.source_cols; ++c) {
    for (Eigen::Index r = 0; r < q.source_rows; ++r) {
      const double s = scale_for(q, r, c);
      out(r, c) = s * (q.codes(r, c) - zero_point_for(q, r, c));
    }
  }
  return out;
}

Eigen::MatrixXd fake_quantize(const Eigen::MatrixXd& t,
                              const QuantConfig& cfg) {
  return dequantize(quantize(t, cfg));
}

}  // namespace qig
