#pragma once

#include <Eigen/Dense>

namespace qig {

enum class QuantMode { Symmetric, Asymmetric };

// Scale sharing: one scale for the whole tensor, per token (column), per
// output channel (row), or per contiguous run of group_size entries along
// each row.
enum class Granularity { PerTensor, PerToken, PerChannel, PerGroup };

struct QuantConfig {
  int bits = 8;  // in [2, 8]
  QuantMode mode = QuantMode::Symmetric;
  Granularity granularity = Granularity::PerTensor;
  int group_size = 128;  // used by PerGroup only

  // Symmetric code range is [-2^(b-1), 2^(b-1)-1], asymmetric [0, 2^b-1].
  int code_min() const;
  int code_max() const;

  static QuantConfig symmetric(int bits, Granularity g);
  static QuantConfig asymmetric_grouped(int bits, int group_size = 128);
};

// Throws std::invalid_argument on bits out of range, non-positive group size,
// or an unsupported mode/granularity pairing: asymmetric quantization is only
// combined with per-group granularity, symmetric with the other three.
void validate(const QuantConfig& cfg);

// Integer codes plus the metadata needed to reconstruct real values.
// Scale layout by granularity for an R x C source:
//   PerTensor  1 x 1     PerToken  1 x C
//   PerChannel R x 1     PerGroup  R x ceil(C / group_size)
// zero_points mirrors the scale layout and is used by asymmetric mode only.
// A scale of exactly 0 marks an all-zero group; its codes are 0 (symmetric)
// or equal to the zero-point (asymmetric) and dequantize to 0.
struct QuantizedTensor {
  Eigen::MatrixXi codes;
  Eigen::MatrixXd scales;
  Eigen::MatrixXi zero_points;
  QuantConfig config;
  Eigen::Index source_rows = 0;
  Eigen::Index source_cols = 0;
};

// Round to nearest, ties to even. Fixed everywhere so results do not depend
// on the ambient floating-point environment.
double round_half_even(double x);

// s = max|T_g| / (2^(b-1)-1) per scale group, codes = clip(round(t/s)).
QuantizedTensor quantize_symmetric(const Eigen::MatrixXd& t,
                                   const QuantConfig& cfg);

// Group-wise min/max quantization along each row; the final group of a row
// may be shorter than group_size. The range is widened to include zero, so
// s = (max(W_g,0) - min(W_g,0)) / (2^b-1), z = round(-min/s), and both a
// constant group and the range endpoints survive the round trip exactly.
QuantizedTensor quantize_asymmetric_grouped(const Eigen::MatrixXd& w,
                                            const QuantConfig& cfg);

// Dispatch on cfg.mode.
QuantizedTensor quantize(const Eigen::MatrixXd& t, const QuantConfig& cfg);

// s*Q (symmetric) or s*(Q - z) (asymmetric), shaped like the source.
Eigen::MatrixXd dequantize(const QuantizedTensor& q);

// dequantize(quantize(t, cfg)): the real-valued tensor the integer codes
// represent.
Eigen::MatrixXd fake_quantize(const Eigen::MatrixXd& t, const QuantConfig& cfg);

// Scale / zero-point governing element (r, c) of the source tensor.
double scale_for(const QuantizedTensor& q, Eigen::Index r, Eigen::Index c);
int zero_point_for(const QuantizedTensor& q, Eigen::Index r, Eigen::Index c);

}  // namespace qig
