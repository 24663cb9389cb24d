#pragma once

#include <Eigen/Dense>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "branchrl/rng.hpp"
#include "branchrl/util.hpp"

namespace branchrl {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Activation : std::uint32_t { Tanh = 0, Relu = 1 };

enum class LossTag { GaussianNll, SquaredError, SacActor, SacCritic };

struct NonFiniteError : std::runtime_error {
  int layer;
  explicit NonFiniteError(int layer_index)
      : std::runtime_error("non-finite intermediate at layer " + std::to_string(layer_index)),
        layer(layer_index) {}
};

/// Fully connected network, hidden layers activated, linear output layer.
/// Rows of a batch are samples; w[l] maps widths[l] -> widths[l+1].
struct Mlp {
  std::vector<int> widths;
  std::vector<Matrix> w;
  std::vector<Vector> b;
  Activation activation = Activation::Tanh;

  int input_dim() const { return widths.front(); }
  int output_dim() const { return widths.back(); }
  int num_layers() const { return static_cast<int>(w.size()); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < w.size(); ++l)
      n += static_cast<std::size_t>(w[l].size()) + static_cast<std::size_t>(b[l].size());
    return n;
  }

  void validate() const {
    if (widths.size() < 2) throw std::invalid_argument("Mlp: need at least input and output widths");
    if (w.size() + 1 != widths.size() || b.size() != w.size())
      throw std::invalid_argument("Mlp: layer count mismatch");
    for (std::size_t l = 0; l < w.size(); ++l) {
      if (w[l].rows() != widths[l + 1] || w[l].cols() != widths[l] || b[l].size() != widths[l + 1])
        throw std::invalid_argument("Mlp: inconsistent layer shapes");
      if (!w[l].allFinite() || !b[l].allFinite())
        throw std::invalid_argument("Mlp: non-finite parameters");
    }
  }
};

/// Fan-in-scaled uniform init; final_scale shrinks the output layer (small
/// initial predictions keep early likelihood losses finite).
inline Mlp make_mlp(std::vector<int> widths, Activation act, Rng& rng, double final_scale = 1.0) {
  Mlp net;
  net.widths = std::move(widths);
  net.activation = act;
  const std::size_t layers = net.widths.size() - 1;
  net.w.resize(layers);
  net.b.resize(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    const int fan_in = net.widths[l];
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    const double scale = (l + 1 == layers) ? final_scale : 1.0;
    net.w[l] = Matrix(net.widths[l + 1], net.widths[l]);
    for (int i = 0; i < net.w[l].rows(); ++i)
      for (int j = 0; j < net.w[l].cols(); ++j)
        net.w[l](i, j) = scale * rng.uniform(-bound, bound);
    net.b[l] = Vector::Zero(net.widths[l + 1]);
  }
  return net;
}

struct MlpGrads {
  std::vector<Matrix> w;
  std::vector<Vector> b;

  static MlpGrads zeros_like(const Mlp& net) {
    MlpGrads g;
    g.w.reserve(net.w.size());
    g.b.reserve(net.b.size());
    for (std::size_t l = 0; l < net.w.size(); ++l) {
      g.w.push_back(Matrix::Zero(net.w[l].rows(), net.w[l].cols()));
      g.b.push_back(Vector::Zero(net.b[l].size()));
    }
    return g;
  }

  void setZero() {
    for (auto& m : w) m.setZero();
    for (auto& v : b) v.setZero();
  }
};

/// Per-layer activations kept for the backward pass. acts[0] is the input,
/// acts[l+1] the output of layer l (post-activation on hidden layers).
struct MlpTrace {
  std::vector<Matrix> acts;
};

inline Matrix mlp_forward(const Mlp& net, const Matrix& x, MlpTrace* trace = nullptr) {
  if (x.cols() != net.input_dim())
    throw std::invalid_argument("mlp_forward: input width mismatch");
  if (!x.allFinite()) throw NonFiniteError(0);
  Matrix a = x;
  if (trace) {
    trace->acts.clear();
    trace->acts.reserve(net.w.size() + 1);
    trace->acts.push_back(a);
  }
  for (std::size_t l = 0; l < net.w.size(); ++l) {
    Matrix z = (a * net.w[l].transpose()).rowwise() + net.b[l].transpose();
    if (l + 1 < net.w.size()) {
      if (net.activation == Activation::Tanh)
        a = z.array().tanh().matrix();
      else
        a = z.cwiseMax(0.0);
    } else {
      a = std::move(z);
    }
    if (trace) trace->acts.push_back(a);
  }
  return a;
}

inline Vector mlp_forward1(const Mlp& net, const Vector& x) {
  return mlp_forward(net, x.transpose()).row(0).transpose();
}

/// Reverse pass from d_out = dL/d(output); accumulates parameter gradients
/// into grads and returns dL/d(input).
inline Matrix mlp_backward(const Mlp& net, const MlpTrace& trace, const Matrix& d_out,
                           MlpGrads& grads) {
  const int layers = net.num_layers();
  if (static_cast<int>(trace.acts.size()) != layers + 1)
    throw std::invalid_argument("mlp_backward: trace does not match network");
  Matrix delta = d_out;  // dL/dz of the current layer (output layer is linear)
  for (int l = layers - 1; l >= 0; --l) {
    const Matrix& a_prev = trace.acts[static_cast<std::size_t>(l)];
    grads.w[static_cast<std::size_t>(l)].noalias() += delta.transpose() * a_prev;
    grads.b[static_cast<std::size_t>(l)] += delta.colwise().sum().transpose();
    if (l == 0) return delta * net.w[0];
    Matrix d_prev = delta * net.w[static_cast<std::size_t>(l)];
    const Matrix& a = trace.acts[static_cast<std::size_t>(l)];
    if (net.activation == Activation::Tanh)
      delta = d_prev.array() * (1.0 - a.array().square());
    else
      delta = (a.array() > 0.0).select(d_prev, Matrix::Zero(d_prev.rows(), d_prev.cols()));
  }
  return delta;  // unreachable
}

inline int first_nonfinite_layer(const MlpTrace& trace) {
  for (std::size_t i = 0; i < trace.acts.size(); ++i)
    if (!trace.acts[i].allFinite()) return static_cast<int>(i);
  return -1;
}

// ---------------------------------------------------------------------------
// Soft-clamped diagonal Gaussian head
// ---------------------------------------------------------------------------

struct LogVarBounds {
  double lo = -10.0;
  double hi = 0.5;
};

inline double clamp_log_var(double raw, const LogVarBounds& b) {
  const double s1 = b.hi - softplus(b.hi - raw);
  const double s2 = b.lo + softplus(s1 - b.lo);
  // the two softplus stages can leak ~exp(lo - hi) past a bound; pin it
  return std::min(std::max(s2, b.lo), b.hi);
}

inline double clamp_log_var_grad(double raw, const LogVarBounds& b) {
  const double s1 = b.hi - softplus(b.hi - raw);
  return sigmoid(b.hi - raw) * sigmoid(s1 - b.lo);
}

/// Splits a network's raw output into a mean block and a soft-clamped
/// log-variance block (columns [0, dim) and [dim, 2 dim)).
struct GaussianHead {
  int dim = 0;
  LogVarBounds bounds;

  void split(const Matrix& raw, Matrix& mean, Matrix& log_var) const {
    if (raw.cols() != 2 * dim) throw std::invalid_argument("GaussianHead: raw width mismatch");
    mean = raw.leftCols(dim);
    log_var = raw.rightCols(dim).unaryExpr(
        [this](double v) { return clamp_log_var(v, bounds); });
  }

  /// Chains (dL/dmean, dL/dlogvar) back to the raw output gradient.
  Matrix merge_grads(const Matrix& raw, const Matrix& d_mean, const Matrix& d_log_var) const {
    Matrix d_raw(raw.rows(), raw.cols());
    d_raw.leftCols(dim) = d_mean;
    d_raw.rightCols(dim) =
        d_log_var.array() *
        raw.rightCols(dim)
            .unaryExpr([this](double v) { return clamp_log_var_grad(v, bounds); })
            .array();
    return d_raw;
  }
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Diagonal Gaussian negative log likelihood of one sample, summed over
/// dimensions: 0.5 * sum_d [ log(2 pi) + lv_d + (t_d - mu_d)^2 exp(-lv_d) ].
inline double gaussian_nll(const Vector& mean, const Vector& log_var, const Vector& target) {
  if (mean.size() != log_var.size() || mean.size() != target.size())
    throw std::invalid_argument("gaussian_nll: length mismatch");
  if (!mean.allFinite() || !log_var.allFinite() || !target.allFinite())
    throw std::invalid_argument("gaussian_nll: non-finite input");
  double nll = 0.0;
  for (int d = 0; d < mean.size(); ++d) {
    const double resid = target(d) - mean(d);
    nll += kLog2Pi + log_var(d) + resid * resid * std::exp(-log_var(d));
  }
  return 0.5 * nll;
}

/// Batch-mean Gaussian NLL with optional gradients w.r.t. mean and log-var.
inline double gaussian_nll_batch(const Matrix& mean, const Matrix& log_var, const Matrix& target,
                                 Matrix* d_mean = nullptr, Matrix* d_log_var = nullptr) {
  const double n = static_cast<double>(mean.rows());
  const Eigen::ArrayXXd resid = (mean - target).array();
  const Eigen::ArrayXXd inv_var = (-log_var).array().exp();
  const double nll =
      0.5 * (kLog2Pi * static_cast<double>(mean.cols()) +
             (log_var.array() + resid.square() * inv_var).rowwise().sum().mean());
  if (d_mean) *d_mean = (resid * inv_var / n).matrix();
  if (d_log_var) *d_log_var = (0.5 * (1.0 - resid.square() * inv_var) / n).matrix();
  return nll;
}

/// Batch-mean squared error 0.5 * mean_i ||pred_i - target_i||^2.
inline double squared_error_batch(const Matrix& pred, const Matrix& target,
                                  Matrix* d_pred = nullptr) {
  const double n = static_cast<double>(pred.rows());
  const Matrix resid = pred - target;
  if (d_pred) *d_pred = resid / n;
  return 0.5 * resid.squaredNorm() / n;
}

struct BackwardResult {
  double loss = 0.0;
  MlpGrads grads;
};

/// Reverse-mode gradients of a supervised loss through the network. The SAC
/// actor/critic objectives compose several networks and are assembled by the
/// agent code on top of mlp_backward.
inline BackwardResult mlp_loss_backward(const Mlp& net, LossTag tag, const Matrix& inputs,
                                        const Matrix& targets,
                                        const GaussianHead* head = nullptr) {
  BackwardResult out;
  out.grads = MlpGrads::zeros_like(net);
  MlpTrace trace;
  const Matrix raw = mlp_forward(net, inputs, &trace);
  const int bad = first_nonfinite_layer(trace);
  if (bad >= 0) throw NonFiniteError(bad);
  Matrix d_raw;
  switch (tag) {
    case LossTag::GaussianNll: {
      if (!head) throw std::invalid_argument("gaussian_nll loss needs a GaussianHead");
      Matrix mean, log_var, d_mean, d_log_var;
      head->split(raw, mean, log_var);
      out.loss = gaussian_nll_batch(mean, log_var, targets, &d_mean, &d_log_var);
      d_raw = head->merge_grads(raw, d_mean, d_log_var);
      break;
    }
    case LossTag::SquaredError: {
      out.loss = squared_error_batch(raw, targets, &d_raw);
      break;
    }
    default:
      throw std::invalid_argument("mlp_loss_backward: composite loss tag, see sac module");
  }
  if (!std::isfinite(out.loss)) throw NonFiniteError(net.num_layers());
  mlp_backward(net, trace, d_raw, out.grads);
  return out;
}

// ---------------------------------------------------------------------------
// Adaptive-moment optimizer
// ---------------------------------------------------------------------------

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon_stab = 1e-8;
};

struct MlpOptimizer {
  AdamConfig cfg;
  long long step_count = 0;
  MlpGrads first_moment;
  MlpGrads second_moment;

  void init(const Mlp& net) {
    step_count = 0;
    first_moment = MlpGrads::zeros_like(net);
    second_moment = MlpGrads::zeros_like(net);
  }

  void step(Mlp& net, const MlpGrads& g) {
    if (g.w.size() != net.w.size())
      throw std::invalid_argument("optimizer_step: shape mismatch");
    ++step_count;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_count));
    for (std::size_t l = 0; l < net.w.size(); ++l) {
      if (g.w[l].rows() != net.w[l].rows() || g.w[l].cols() != net.w[l].cols())
        throw std::invalid_argument("optimizer_step: shape mismatch");
      auto update = [&](auto& param, auto& m, auto& v, const auto& grad) {
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
        v = (cfg.beta2 * v.array() + (1.0 - cfg.beta2) * grad.array().square()).matrix();
        param.array() -=
            cfg.learning_rate * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.epsilon_stab);
      };
      update(net.w[l], first_moment.w[l], second_moment.w[l], g.w[l]);
      update(net.b[l], first_moment.b[l], second_moment.b[l], g.b[l]);
    }
  }
};

struct ScalarAdam {
  AdamConfig cfg;
  long long step_count = 0;
  double m = 0.0, v = 0.0;

  void step(double& param, double g) {
    ++step_count;
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
    const double mhat = m / (1.0 - std::pow(cfg.beta1, static_cast<double>(step_count)));
    const double vhat = v / (1.0 - std::pow(cfg.beta2, static_cast<double>(step_count)));
    param -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon_stab);
  }
};

// ---------------------------------------------------------------------------
// Checkpoints: flat little-endian binary, header then parameters in layer
// order (weights row-major, then bias).
// ---------------------------------------------------------------------------

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

constexpr std::uint32_t kMlpMagic = 0x4E4E5242;  // "BRNN"
constexpr std::uint32_t kMlpVersion = 1;

namespace detail {
template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T read_pod(std::istream& in) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint: truncated stream");
  return v;
}
}  // namespace detail

inline void save_mlp(std::ostream& out, const Mlp& net) {
  detail::write_pod(out, kMlpMagic);
  detail::write_pod(out, kMlpVersion);
  detail::write_pod(out, static_cast<std::uint32_t>(net.activation));
  detail::write_pod(out, static_cast<std::uint32_t>(net.widths.size()));
  for (int wdt : net.widths) detail::write_pod(out, static_cast<std::uint32_t>(wdt));
  for (std::size_t l = 0; l < net.w.size(); ++l) {
    for (int i = 0; i < net.w[l].rows(); ++i)
      for (int j = 0; j < net.w[l].cols(); ++j) detail::write_pod(out, net.w[l](i, j));
    for (int i = 0; i < net.b[l].size(); ++i) detail::write_pod(out, net.b[l](i));
  }
}

inline Mlp load_mlp(std::istream& in) {
  if (detail::read_pod<std::uint32_t>(in) != kMlpMagic)
    throw std::runtime_error("checkpoint: bad magic");
  if (detail::read_pod<std::uint32_t>(in) != kMlpVersion)
    throw std::runtime_error("checkpoint: unsupported version");
  Mlp net;
  net.activation = static_cast<Activation>(detail::read_pod<std::uint32_t>(in));
  const auto n_widths = detail::read_pod<std::uint32_t>(in);
  if (n_widths < 2 || n_widths > 64) throw std::runtime_error("checkpoint: implausible header");
  net.widths.resize(n_widths);
  for (auto& wdt : net.widths) wdt = static_cast<int>(detail::read_pod<std::uint32_t>(in));
  net.w.resize(n_widths - 1);
  net.b.resize(n_widths - 1);
  for (std::size_t l = 0; l + 1 < n_widths; ++l) {
    net.w[l] = Matrix(net.widths[l + 1], net.widths[l]);
    for (int i = 0; i < net.w[l].rows(); ++i)
      for (int j = 0; j < net.w[l].cols(); ++j) net.w[l](i, j) = detail::read_pod<double>(in);
    net.b[l] = Vector(net.widths[l + 1]);
    for (int i = 0; i < net.b[l].size(); ++i) net.b[l](i) = detail::read_pod<double>(in);
  }
  net.validate();
  return net;
}

/// Order-sensitive hash of all parameters; used by frozen-snapshot checks.
inline std::uint64_t mlp_param_hash(const Mlp& net) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](const double* data, std::size_t count) {
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(data), count * sizeof(double)), h);
  };
  for (std::size_t l = 0; l < net.w.size(); ++l) {
    mix(net.w[l].data(), static_cast<std::size_t>(net.w[l].size()));
    mix(net.b[l].data(), static_cast<std::size_t>(net.b[l].size()));
  }
  return h;
}

}  // namespace branchrl
