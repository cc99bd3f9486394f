#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "qig/quantizer.hpp"

namespace qig {

enum class BlockKind { Linear, Mlp, Attention };

std::string_view to_string(BlockKind k);
BlockKind block_kind_from_string(std::string_view s);

// Single transformer-style block at desk scale. Tokens are columns, so an
// activation matrix is d x T. Weights by kind:
//   Linear     w: m x d                    y = w x
//   Mlp        up: 4d x d, down: d x 4d    y = down gelu(up x), m = d
//   Attention  q,k,v,o: d x d              single head, m = d
// Attention applies softmax((q x)^T (k x) / sqrt(d)) over keys to (v x), then
// the output projection. Nonlinearities always run in full precision; only
// linear sub-layer inputs and weights are ever quantized.
struct BlockModel {
  BlockKind kind = BlockKind::Linear;
  Eigen::Index d = 0;        // hidden size
  Eigen::Index m = 0;        // output rows, equals d except for Linear
  Eigen::Index seq_len = 0;  // nominal token count of the calibration data
  std::map<std::string, Eigen::MatrixXd, std::less<>> weights;

  const Eigen::MatrixXd& weight(std::string_view name) const;
  // Linear sub-layers in forward order: {w}, {up, down}, {q, k, v, o}.
  std::vector<std::string> sublayers() const;
  Eigen::Index sublayer_input_dim(std::string_view name) const;
};

void validate(const BlockModel& model);

// Weight entries drawn N(0, 1/fan_in) per sub-layer from dedicated
// sub-streams of the seed, so instances are reproducible entry by entry.
BlockModel random_block_model(BlockKind kind, Eigen::Index d, Eigen::Index m,
                              Eigen::Index seq_len, std::uint64_t seed);

// How to run the block in quantized form. Each linear sub-layer computes
//   fq_W(W * diag(E)) * fq_X(diag(E)^-1 * input)
// where either fake-quantizer drops out when its config is absent, and E
// (the per-input-channel equalization scale, length = that sub-layer's input
// dim) defaults to identity when the sub-layer has no entry. In exact
// arithmetic with both quantizers absent this is the full-precision block.
struct QuantizedExecution {
  std::optional<QuantConfig> weight_cfg;
  std::optional<QuantConfig> act_cfg;
  std::map<std::string, Eigen::VectorXd, std::less<>> equalization;
};

double gelu(double z);
double gelu_grad(double z);

Eigen::MatrixXd block_forward(const BlockModel& model,
                              const Eigen::MatrixXd& x);
Eigen::MatrixXd block_forward_quantized(const BlockModel& model,
                                        const Eigen::MatrixXd& x,
                                        const QuantizedExecution& exec);

// Mean absolute gap between the two executions, with its reverse-mode input
// gradient. The objective is
//   L(x) = mean_t mean_h | (y_fp - y_q)(h, t) |
// and the gradient differentiates the gap directly: one backward sweep
// through both paths of y_fp - y_q, not two separately assembled gradients.
// |.| uses subgradient 0 at 0. Fake-quantized activations contribute through
// their scale (which follows the max-magnitude entry of each scale group);
// the rounded codes are locally constant.
struct DistortionGrad {
  double scalar = 0.0;
  Eigen::VectorXd per_token;
  Eigen::MatrixXd grad;
  Eigen::MatrixXd y_fp;
  Eigen::MatrixXd y_q;
};

DistortionGrad distortion_with_grad(const BlockModel& model,
                                    const QuantizedExecution& exec,
                                    const Eigen::MatrixXd& x);

Eigen::MatrixXd grad_input(const BlockModel& model,
                           const QuantizedExecution& exec,
                           const Eigen::MatrixXd& x);

// Central-difference gradient of the same objective; the check oracle for
// grad_input.
Eigen::MatrixXd grad_input_fd(const BlockModel& model,
                              const QuantizedExecution& exec,
                              const Eigen::MatrixXd& x, double epsilon = 1e-4);

// Input seen by each linear sub-layer during a full-precision forward pass:
// x itself for the first layer(s), intermediate activations further in.
std::map<std::string, Eigen::MatrixXd, std::less<>> sublayer_inputs(
    const BlockModel& model, const Eigen::MatrixXd& x);

}  // namespace qig
