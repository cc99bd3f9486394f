#include "qig/block.hpp"

#include <cmath>
#include <stdexcept>

#include "qig/rng.hpp"

namespace qig {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& s) {
  Eigen::MatrixXd p(s.rows(), s.cols());
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const double mx = s.row(i).maxCoeff();
    p.row(i) = (s.row(i).array() - mx).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

// State of one linear sub-layer evaluation, kept for the backward sweep.
struct SubCache {
  const Eigen::VectorXd* E = nullptr;  // nullptr = identity
  Eigen::MatrixXd win;                 // diag(E)^-1 * input
  bool act_q = false;
  QuantizedTensor aq;                  // codes/scales of win when act_q
  Eigen::MatrixXd v;                   // fq(win) or win
  Eigen::MatrixXd what;                // fq_W(W * diag(E)) or W * diag(E)
};

struct PathCache {
  std::map<std::string, SubCache, std::less<>> subs;
  Eigen::MatrixXd h;                   // mlp pre-activation
  Eigen::MatrixXd P, Qh, Kh, Vh, O;    // attention intermediates
  Eigen::MatrixXd y;
};

const Eigen::VectorXd* equalization_for(const QuantizedExecution& exec,
                                        std::string_view name) {
  auto it = exec.equalization.find(name);
  return it == exec.equalization.end() ? nullptr : &it->second;
}

Eigen::MatrixXd run_sublayer(const BlockModel& model,
                             const QuantizedExecution& exec,
                             const std::string& name,
                             const Eigen::MatrixXd& input, PathCache& cache) {
  const Eigen::MatrixXd& w = model.weight(name);
  SubCache sc;
  sc.E = equalization_for(exec, name);
  if (sc.E) {
    require(sc.E->size() == w.cols(),
            "block: equalization length mismatch for sub-layer " + name);
    require((sc.E->array() > 0.0).all() && sc.E->allFinite(),
            "block: equalization scales must be positive and finite");
    sc.win = sc.E->cwiseInverse().asDiagonal() * input;
  } else {
    sc.win = input;
  }
  if (exec.act_cfg) {
    sc.aq = quantize(sc.win, *exec.act_cfg);
    sc.v = dequantize(sc.aq);
    sc.act_q = true;
  } else {
    sc.v = sc.win;
  }
  Eigen::MatrixXd we = sc.E ? Eigen::MatrixXd(w * sc.E->asDiagonal()) : w;
  sc.what = exec.weight_cfg ? fake_quantize(we, *exec.weight_cfg)
                            : std::move(we);
  Eigen::MatrixXd out = sc.what * sc.v;
  cache.subs[name] = std::move(sc);
  return out;
}

// v = s(u) * codes with locally constant codes, so the only input dependence
// is through each group scale s = max|u| / qmax: the VJP lands entirely on
// the max-magnitude entry of each scale group.
Eigen::MatrixXd fq_sym_vjp(const SubCache& sc, const Eigen::MatrixXd& up) {
  const Eigen::MatrixXd& u = sc.win;
  const QuantizedTensor& q = sc.aq;
  const double qmax = q.config.code_max();
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(u.rows(), u.cols());

  auto slab = [&](Eigen::Index r0, Eigen::Index nr, Eigen::Index c0,
                  Eigen::Index nc, double scale) {
    if (scale == 0.0) return;
    Eigen::Index ri = r0, ci = c0;
    double best = -1.0, dot = 0.0;
    for (Eigen::Index c = c0; c < c0 + nc; ++c) {
      for (Eigen::Index r = r0; r < r0 + nr; ++r) {
        const double a = std::abs(u(r, c));
        if (a > best) {
          best = a;
          ri = r;
          ci = c;
        }
        dot += up(r, c) * q.codes(r, c);
      }
    }
    g(ri, ci) += (u(ri, ci) > 0.0 ? 1.0 : -1.0) * dot / qmax;
  };

  switch (q.config.granularity) {
    case Granularity::PerTensor:
      slab(0, u.rows(), 0, u.cols(), q.scales(0, 0));
      break;
    case Granularity::PerToken:
      for (Eigen::Index c = 0; c < u.cols(); ++c)
        slab(0, u.rows(), c, 1, q.scales(0, c));
      break;
    case Granularity::PerChannel:
      for (Eigen::Index r = 0; r < u.rows(); ++r)
        slab(r, 1, 0, u.cols(), q.scales(r, 0));
      break;
    default:
      throw std::logic_error("fq_sym_vjp: unsupported granularity");
  }
  return g;
}

Eigen::MatrixXd sub_backward(const SubCache& sc, const Eigen::MatrixXd& gout) {
  Eigen::MatrixXd gv = sc.what.transpose() * gout;
  Eigen::MatrixXd gwin = sc.act_q ? fq_sym_vjp(sc, gv) : std::move(gv);
  if (sc.E) return sc.E->cwiseInverse().asDiagonal() * gwin;
  return gwin;
}

PathCache run_path(const BlockModel& model, const QuantizedExecution& exec,
                   const Eigen::MatrixXd& x) {
  PathCache cache;
  switch (model.kind) {
    case BlockKind::Linear:
      cache.y = run_sublayer(model, exec, "w", x, cache);
      break;
    case BlockKind::Mlp: {
      cache.h = run_sublayer(model, exec, "up", x, cache);
      Eigen::MatrixXd a = cache.h.unaryExpr([](double z) { return gelu(z); });
      cache.y = run_sublayer(model, exec, "down", a, cache);
      break;
    }
    case BlockKind::Attention: {
      cache.Qh = run_sublayer(model, exec, "q", x, cache);
      cache.Kh = run_sublayer(model, exec, "k", x, cache);
      cache.Vh = run_sublayer(model, exec, "v", x, cache);
      const double inv = 1.0 / std::sqrt(static_cast<double>(model.d));
      cache.P = softmax_rows(cache.Qh.transpose() * cache.Kh * inv);
      cache.O = cache.Vh * cache.P.transpose();
      cache.y = run_sublayer(model, exec, "o", cache.O, cache);
      break;
    }
  }
  return cache;
}

Eigen::MatrixXd path_backward(const BlockModel& model, const PathCache& cache,
                              const Eigen::MatrixXd& gy) {
  switch (model.kind) {
    case BlockKind::Linear:
      return sub_backward(cache.subs.at("w"), gy);
    case BlockKind::Mlp: {
      Eigen::MatrixXd ga = sub_backward(cache.subs.at("down"), gy);
      Eigen::MatrixXd gh =
          ga.cwiseProduct(cache.h.unaryExpr([](double z) { return gelu_grad(z); }));
      return sub_backward(cache.subs.at("up"), gh);
    }
    case BlockKind::Attention: {
      const double inv = 1.0 / std::sqrt(static_cast<double>(model.d));
      Eigen::MatrixXd gO = sub_backward(cache.subs.at("o"), gy);
      Eigen::MatrixXd gV = gO * cache.P;
      Eigen::MatrixXd gP = gO.transpose() * cache.Vh;
      Eigen::MatrixXd gS(gP.rows(), gP.cols());
      for (Eigen::Index i = 0; i < gP.rows(); ++i) {
        const double inner = gP.row(i).dot(cache.P.row(i));
        gS.row(i) =
            (cache.P.row(i).array() * (gP.row(i).array() - inner)).matrix();
      }
      gS *= inv;
      Eigen::MatrixXd gQ = cache.Kh * gS.transpose();
      Eigen::MatrixXd gK = cache.Qh * gS;
      return sub_backward(cache.subs.at("q"), gQ) +
             sub_backward(cache.subs.at("k"), gK) +
             sub_backward(cache.subs.at("v"), gV);
    }
  }
  throw std::logic_error("path_backward: bad kind");
}

void check_input(const BlockModel& model, const Eigen::MatrixXd& x) {
  validate(model);
  require(x.rows() == model.d, "block: input rows must equal model.d");
  require(x.cols() >= 1, "block: input has no tokens");
  require(x.allFinite(), "block: non-finite input");
}

const QuantizedExecution& plain_execution() {
  static const QuantizedExecution exec{};
  return exec;
}

}  // namespace

std::string_view to_string(BlockKind k) {
  switch (k) {
    case BlockKind::Linear: return "linear";
    case BlockKind::Mlp: return "mlp";
    case BlockKind::Attention: return "attention";
  }
  throw std::logic_error("to_string: bad kind");
}

BlockKind block_kind_from_string(std::string_view s) {
  if (s == "linear") return BlockKind::Linear;
  if (s == "mlp") return BlockKind::Mlp;
  if (s == "attention") return BlockKind::Attention;
  throw std::invalid_argument("unknown block kind: " + std::string(s));
}

const Eigen::MatrixXd& BlockModel::weight(std::string_view name) const {
  auto it = weights.find(name);
  if (it == weights.end())
    throw std::invalid_argument("block: missing weight " + std::string(name));
  return it->second;
}

std::vector<std::string> BlockModel::sublayers() const {
  switch (kind) {
    case BlockKind::Linear: return {"w"};
    case BlockKind::Mlp: return {"up", "down"};
    case BlockKind::Attention: return {"q", "k", "v", "o"};
  }
  throw std::logic_error("sublayers: bad kind");
}

Eigen::Index BlockModel::sublayer_input_dim(std::string_view name) const {
  if (kind == BlockKind::Mlp && name == "down") return 4 * d;
  return d;
}

void validate(const BlockModel& model) {
  require(model.d >= 1, "block: d must be positive");
  require(model.m >= 1, "block: m must be positive");
  if (model.kind != BlockKind::Linear)
    require(model.m == model.d, "block: m must equal d for this kind");
  for (const auto& name : model.sublayers()) {
    const Eigen::MatrixXd& w = model.weight(name);
    const Eigen::Index rows =
        (model.kind == BlockKind::Mlp && name == "up") ? 4 * model.d : model.m;
    require(w.rows() == rows && w.cols() == model.sublayer_input_dim(name),
            "block: weight shape mismatch for sub-layer " + name);
    require(w.allFinite(), "block: non-finite weight " + name);
  }
}

BlockModel random_block_model(BlockKind kind, Eigen::Index d, Eigen::Index m,
                              Eigen::Index seq_len, std::uint64_t seed) {
  BlockModel model;
  model.kind = kind;
  model.d = d;
  model.m = kind == BlockKind::Linear ? m : d;
  model.seq_len = seq_len;
  for (const auto& name : model.sublayers()) {
    const Eigen::Index cols = model.sublayer_input_dim(name);
    const Eigen::Index rows =
        (kind == BlockKind::Mlp && name == "up") ? 4 * d : model.m;
    auto eng = rng::engine_for(seed, "model/" + name);
    model.weights[name] = rng::standard_normal(rows, cols, eng) /
                          std::sqrt(static_cast<double>(cols));
  }
  validate(model);
  return model;
}

double gelu(double z) {
  return 0.5 * z * (1.0 + std::erf(z * kInvSqrt2));
}

double gelu_grad(double z) {
  const double phi_cdf = 0.5 * (1.0 + std::erf(z * kInvSqrt2));
  const double phi_pdf = kInvSqrt2Pi * std::exp(-0.5 * z * z);
  return phi_cdf + z * phi_pdf;
}

Eigen::MatrixXd block_forward(const BlockModel& model,
                              const Eigen::MatrixXd& x) {
  check_input(model, x);
  return run_path(model, plain_execution(), x).y;
}

Eigen::MatrixXd block_forward_quantized(const BlockModel& model,
                                        const Eigen::MatrixXd& x,
                                        const QuantizedExecution& exec) {
  check_input(model, x);
  if (exec.weight_cfg) validate(*exec.weight_cfg);
  if (exec.act_cfg) validate(*exec.act_cfg);
  return run_path(model, exec, x).y;
}

DistortionGrad distortion_with_grad(const BlockModel& model,
                                    const QuantizedExecution& exec,
                                    const Eigen::MatrixXd& x) {
  check_input(model, x);
  PathCache fp = run_path(model, plain_execution(), x);
  PathCache qz = run_path(model, exec, x);

  DistortionGrad out;
  out.y_fp = fp.y;
  out.y_q = qz.y;
  Eigen::MatrixXd diff = fp.y - qz.y;
  out.per_token = diff.cwiseAbs().colwise().mean().transpose();
  out.scalar = out.per_token.mean();

  const double norm = static_cast<double>(diff.size());
  Eigen::MatrixXd gy = diff.array().sign().matrix() / norm;
  out.grad = path_backward(model, fp, gy) - path_backward(model, qz, gy);
  return out;
}

Eigen::MatrixXd grad_input(const BlockModel& model,
                           const QuantizedExecution& exec,
                           const Eigen::MatrixXd& x) {
  return distortion_with_grad(model, exec, x).grad;
}

std::map<std::string, Eigen::MatrixXd, std::less<>> sublayer_inputs(
    const BlockModel& model, const Eigen::MatrixXd& x) {
  check_input(model, x);
  PathCache cache = run_path(model, plain_execution(), x);
  std::map<std::string, Eigen::MatrixXd, std::less<>> inputs;
  switch (model.kind) {
    case BlockKind::Linear:
      inputs["w"] = x;
      break;
    case BlockKind::Mlp:
      inputs["up"] = x;
      inputs["down"] = cache.h.unaryExpr([](double z) { return gelu(z); });
      break;
    case BlockKind::Attention:
      inputs["q"] = x;
      inputs["k"] = x;
      inputs["v"] = x;
      inputs["o"] = cache.O;
      break;
  }
  return inputs;
}

Eigen::MatrixXd grad_input_fd(const BlockModel& model,
                              const QuantizedExecution& exec,
                              const Eigen::MatrixXd& x, double epsilon) {
  check_input(model, x);
  require(epsilon > 0.0, "grad_input_fd: epsilon must be positive");
  auto value = [&](const Eigen::MatrixXd& xi) {
    Eigen::MatrixXd diff =
        block_forward(model, xi) - block_forward_quantized(model, xi, exec);
    return diff.cwiseAbs().mean();
  };
  Eigen::MatrixXd g(x.rows(), x.cols());
  Eigen::MatrixXd xp = x;
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const double v = x(r, c);
      xp(r, c) = v + epsilon;
      const double up = value(xp);
      xp(r, c) = v - epsilon;
      const double dn = value(xp);
      xp(r, c) = v;
      g(r, c) = (up - dn) / (2.0 * epsilon);
    }
  }
  return g;
}

}  // namespace qig
