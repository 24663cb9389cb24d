#pragma once

#include <algorithm>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "branchrl/nn.hpp"
#include "branchrl/replay.hpp"
#include "branchrl/rng.hpp"
#include "branchrl/util.hpp"

namespace branchrl {

struct EnsembleConfig {
  int members = 7;
  std::vector<int> hidden = {200, 200, 200, 200};
  double learning_rate = 1e-3;
  int batch_size = 256;
  int max_epochs = 200;
  int patience = 5;           // early stop on shared holdout NLL
  double holdout_fraction = 0.2;
  int min_samples = 10;
  LogVarBounds log_var_bounds;
};

struct Normalizer {
  Vector mean;
  Vector std;

  void fit(const Matrix& rows) {
    mean = rows.colwise().mean().transpose();
    const Matrix centered = rows.rowwise() - mean.transpose();
    const Vector var = centered.array().square().colwise().mean().transpose();
    std = var.array().sqrt().max(1e-8).matrix();
  }

  Matrix apply(const Matrix& rows) const {
    Matrix out = rows.rowwise() - mean.transpose();
    out.array().rowwise() /= std.transpose().array();
    return out;
  }

  bool ready() const { return mean.size() > 0; }
};

/// Bootstrap ensemble of probabilistic networks over (delta state, reward).
/// Members share architecture and a holdout split but train on independent
/// with-replacement resamples. Inputs and targets are normalized; predictions
/// are reported in raw units.
struct GaussianEnsemble {
  EnsembleConfig cfg;
  int obs_dim = 0;
  int act_dim = 0;
  std::vector<Mlp> members;
  std::vector<MlpOptimizer> optimizers;
  Normalizer input_norm;
  Normalizer target_norm;
  std::vector<std::vector<int>> bootstrap_masks;  // per-member resample indices
  bool trained = false;

  int target_dim() const { return obs_dim + 1; }

  GaussianHead head() const {
    GaussianHead h;
    h.dim = target_dim();
    h.bounds = cfg.log_var_bounds;
    return h;
  }
};

inline GaussianEnsemble make_ensemble(int obs_dim, int act_dim, const EnsembleConfig& cfg,
                                      std::uint64_t seed) {
  if (cfg.members < 1) throw std::invalid_argument("ensemble: need at least one member");
  GaussianEnsemble ens;
  ens.cfg = cfg;
  ens.obs_dim = obs_dim;
  ens.act_dim = act_dim;
  std::vector<int> widths;
  widths.push_back(obs_dim + act_dim);
  widths.insert(widths.end(), cfg.hidden.begin(), cfg.hidden.end());
  widths.push_back(2 * ens.target_dim());
  for (int b = 0; b < cfg.members; ++b) {
    Rng rng(derive_seed(seed, "ensemble.init." + std::to_string(b)));
    // final layer scaled down so early mean predictions stay small
    ens.members.push_back(make_mlp(widths, Activation::Tanh, rng, 0.1));
    MlpOptimizer opt;
    opt.cfg.learning_rate = cfg.learning_rate;
    opt.init(ens.members.back());
    ens.optimizers.push_back(std::move(opt));
  }
  return ens;
}

struct ModelFitReport {
  std::vector<double> train_nll;        // per member, raw units, last epoch
  std::vector<double> holdout_nll;      // per member, raw units, best epoch
  std::vector<int> epochs_run;          // per member
  std::vector<bool> early_stopped;      // per member
  Vector holdout_nll_per_dim;           // raw units, member-averaged
  double mean_holdout_nll = 0.0;        // raw units
  std::vector<Transition> holdout;      // shared holdout split, newest fit
  bool aborted_nonfinite = false;
};

struct EnsembleDivergence : std::runtime_error {
  ModelFitReport partial;
  EnsembleDivergence(std::string msg, ModelFitReport rep)
      : std::runtime_error(std::move(msg)), partial(std::move(rep)) {}
};

namespace detail {

inline void build_xy(const std::vector<Transition>& data, int obs_dim, int act_dim, Matrix& x,
                     Matrix& y) {
  const int n = static_cast<int>(data.size());
  x = Matrix(n, obs_dim + act_dim);
  y = Matrix(n, obs_dim + 1);
  for (int i = 0; i < n; ++i) {
    const auto& t = data[static_cast<std::size_t>(i)];
    x.row(i).head(obs_dim) = t.s.transpose();
    x.row(i).tail(act_dim) = t.a.transpose();
    y.row(i).head(obs_dim) = (t.s_next - t.s).transpose();
    y(i, obs_dim) = t.r;
  }
}

/// Per-dimension raw-unit NLL of one member on normalized data.
inline Vector member_nll_per_dim(const GaussianEnsemble& ens, const Mlp& net, const Matrix& xn,
                                 const Matrix& yn) {
  Matrix mean, log_var;
  ens.head().split(mlp_forward(net, xn), mean, log_var);
  const Eigen::ArrayXXd resid = (mean - yn).array();
  const Eigen::ArrayXXd inv_var = (-log_var).array().exp();
  const Eigen::ArrayXXd cell = 0.5 * (kLog2Pi + log_var.array() + resid.square() * inv_var);
  Vector per_dim = cell.colwise().mean().transpose().matrix();
  // change of variables back to raw target units
  per_dim += ens.target_norm.std.array().log().matrix();
  return per_dim;
}

}  // namespace detail

/// Trains every member on its own bootstrap resample against the Gaussian
/// NLL over (delta s, r), with early stopping on a shared holdout split and
/// best-epoch parameter restore. Normalizers are refreshed from the dataset
/// before training; members warm-start from their previous parameters.
inline ModelFitReport ensemble_fit(GaussianEnsemble& ens, const std::vector<Transition>& data,
                                   std::uint64_t seed) {
  const int n = static_cast<int>(data.size());
  if (n < ens.cfg.min_samples)
    throw std::invalid_argument("ensemble_fit: buffer too small (" + std::to_string(n) + " < " +
                                std::to_string(ens.cfg.min_samples) + ")");
  Matrix x_raw, y_raw;
  detail::build_xy(data, ens.obs_dim, ens.act_dim, x_raw, y_raw);
  ens.input_norm.fit(x_raw);
  ens.target_norm.fit(y_raw);
  const Matrix x = ens.input_norm.apply(x_raw);
  const Matrix y = ens.target_norm.apply(y_raw);

  Rng split_rng(derive_seed(seed, "fit.split"));
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  for (int i = n - 1; i > 0; --i)
    std::swap(order[static_cast<std::size_t>(i)],
              order[static_cast<std::size_t>(split_rng.uniform_int(i + 1))]);
  const int n_holdout =
      std::max(1, static_cast<int>(std::lround(ens.cfg.holdout_fraction * n)));
  const int n_train = n - n_holdout;
  if (n_train < n_holdout)
    throw std::invalid_argument("ensemble_fit: need at least twice the holdout size");

  Matrix x_hold(n_holdout, x.cols()), y_hold(n_holdout, y.cols());
  for (int i = 0; i < n_holdout; ++i) {
    x_hold.row(i) = x.row(order[static_cast<std::size_t>(i)]);
    y_hold.row(i) = y.row(order[static_cast<std::size_t>(i)]);
  }

  ModelFitReport report;
  report.holdout.reserve(static_cast<std::size_t>(n_holdout));
  for (int i = 0; i < n_holdout; ++i)
    report.holdout.push_back(data[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);

  const double log_jacobian = ens.target_norm.std.array().log().sum();
  const GaussianHead head = ens.head();
  ens.bootstrap_masks.assign(static_cast<std::size_t>(ens.cfg.members), {});
  report.train_nll.resize(static_cast<std::size_t>(ens.cfg.members), 0.0);
  report.holdout_nll.resize(static_cast<std::size_t>(ens.cfg.members), 0.0);
  report.epochs_run.resize(static_cast<std::size_t>(ens.cfg.members), 0);
  report.early_stopped.resize(static_cast<std::size_t>(ens.cfg.members), false);

  Matrix per_dim_sum = Matrix::Zero(1, y.cols());
  for (int b = 0; b < ens.cfg.members; ++b) {
    Rng rng(derive_seed(seed, "fit.member." + std::to_string(b)));
    auto& mask = ens.bootstrap_masks[static_cast<std::size_t>(b)];
    mask.resize(static_cast<std::size_t>(n_train));
    for (auto& idx : mask)
      idx = order[static_cast<std::size_t>(n_holdout + rng.uniform_int(n_train))];

    Mlp& net = ens.members[static_cast<std::size_t>(b)];
    MlpOptimizer& opt = ens.optimizers[static_cast<std::size_t>(b)];
    Mlp best = net;
    double best_holdout = std::numeric_limits<double>::infinity();
    int since_best = 0;
    double last_train = 0.0;

    std::vector<int> epoch_order = mask;
    const int batch = std::min(ens.cfg.batch_size, n_train);
    for (int epoch = 0; epoch < ens.cfg.max_epochs; ++epoch) {
      for (int i = n_train - 1; i > 0; --i)
        std::swap(epoch_order[static_cast<std::size_t>(i)],
                  epoch_order[static_cast<std::size_t>(rng.uniform_int(i + 1))]);
      double epoch_loss = 0.0;
      int batches = 0;
      for (int start = 0; start < n_train; start += batch) {
        const int count = std::min(batch, n_train - start);
        Matrix xb(count, x.cols()), yb(count, y.cols());
        for (int i = 0; i < count; ++i) {
          xb.row(i) = x.row(epoch_order[static_cast<std::size_t>(start + i)]);
          yb.row(i) = y.row(epoch_order[static_cast<std::size_t>(start + i)]);
        }
        BackwardResult res;
        try {
          res = mlp_loss_backward(net, LossTag::GaussianNll, xb, yb, &head);
        } catch (const NonFiniteError& e) {
          report.aborted_nonfinite = true;
          throw EnsembleDivergence(
              "ensemble_fit: divergent loss in member " + std::to_string(b) + ": " + e.what(),
              std::move(report));
        }
        opt.step(net, res.grads);
        epoch_loss += res.loss;
        ++batches;
      }
      last_train = epoch_loss / std::max(1, batches) + log_jacobian;
      report.epochs_run[static_cast<std::size_t>(b)] = epoch + 1;

      Matrix mean, log_var;
      head.split(mlp_forward(net, x_hold), mean, log_var);
      const double hold = gaussian_nll_batch(mean, log_var, y_hold) + log_jacobian;
      if (!std::isfinite(hold)) {
        report.aborted_nonfinite = true;
        throw EnsembleDivergence("ensemble_fit: non-finite holdout NLL in member " +
                                     std::to_string(b),
                                 std::move(report));
      }
      if (hold < best_holdout - 1e-6) {
        best_holdout = hold;
        best = net;
        since_best = 0;
      } else if (++since_best >= ens.cfg.patience) {
        report.early_stopped[static_cast<std::size_t>(b)] = true;
        break;
      }
    }
    net = best;
    report.train_nll[static_cast<std::size_t>(b)] = last_train;
    report.holdout_nll[static_cast<std::size_t>(b)] = best_holdout;
    per_dim_sum += detail::member_nll_per_dim(ens, net, x_hold, y_hold).transpose();
  }
  report.holdout_nll_per_dim = per_dim_sum.transpose() / ens.cfg.members;
  report.mean_holdout_nll =
      std::accumulate(report.holdout_nll.begin(), report.holdout_nll.end(), 0.0) /
      ens.cfg.members;
  ens.trained = true;
  return report;
}

struct GaussianPrediction {
  Vector mean;  // raw units, (delta s, reward)
  Vector std;   // raw units
};

inline GaussianPrediction ensemble_member_predict(const GaussianEnsemble& ens, int member,
                                                  const Vector& s, const Vector& a) {
  if (!ens.trained) throw std::runtime_error("ensemble: not trained");
  Vector x(ens.obs_dim + ens.act_dim);
  x << s, a;
  const Matrix xn = ens.input_norm.apply(x.transpose());
  Matrix mean_n, log_var_n;
  ens.head().split(mlp_forward(ens.members[static_cast<std::size_t>(member)], xn), mean_n,
                   log_var_n);
  GaussianPrediction out;
  out.mean = ens.target_norm.mean +
             (mean_n.row(0).transpose().array() * ens.target_norm.std.array()).matrix();
  out.std = ((0.5 * log_var_n.row(0).transpose().array()).exp() *
             ens.target_norm.std.array())
                .matrix();
  return out;
}

/// One model step: picks a member uniformly at random, samples (delta s, r)
/// from its Gaussian, and returns (s + delta s, r).
inline std::pair<Vector, double> ensemble_sample_step(const GaussianEnsemble& ens, const Vector& s,
                                                      const Vector& a, Rng& rng) {
  const int member = rng.uniform_int(ens.cfg.members);
  const GaussianPrediction pred = ensemble_member_predict(ens, member, s, a);
  Vector draw(pred.mean.size());
  for (int d = 0; d < draw.size(); ++d) draw(d) = pred.mean(d) + pred.std(d) * rng.normal();
  Vector s_next = s + draw.head(ens.obs_dim);
  return {std::move(s_next), draw(ens.obs_dim)};
}

/// Model-error proxy on held-out transitions from the data-collecting
/// policy: each observed (delta s, r) is treated as a point mass, scored by
/// the ensemble mixture's raw NLL, and converted through
/// min(1, sqrt(max(0, NLL)/2)). An estimator, not the exact kernel TV (which
/// is only computable in the tabular subsystem).
inline double estimate_eps_m(const GaussianEnsemble& ens, const std::vector<Transition>& validation) {
  if (!ens.trained) throw std::runtime_error("ensemble: not trained");
  if (validation.empty()) throw std::invalid_argument("estimate_eps_m: empty validation set");
  Matrix x_raw, y_raw;
  detail::build_xy(validation, ens.obs_dim, ens.act_dim, x_raw, y_raw);
  const Matrix x = ens.input_norm.apply(x_raw);
  const Matrix y = ens.target_norm.apply(y_raw);
  const double log_jacobian = ens.target_norm.std.array().log().sum();
  const int n = static_cast<int>(validation.size());
  const int b_count = ens.cfg.members;
  Matrix member_nll(n, b_count);
  const GaussianHead head = ens.head();
  for (int b = 0; b < b_count; ++b) {
    Matrix mean, log_var;
    head.split(mlp_forward(ens.members[static_cast<std::size_t>(b)], x), mean, log_var);
    const Eigen::ArrayXXd resid = (mean - y).array();
    const Eigen::ArrayXXd inv_var = (-log_var).array().exp();
    member_nll.col(b) =
        (0.5 * (kLog2Pi * y.cols() + (log_var.array() + resid.square() * inv_var).rowwise().sum()))
            .matrix();
  }
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    std::vector<double> neg(static_cast<std::size_t>(b_count));
    for (int b = 0; b < b_count; ++b) neg[static_cast<std::size_t>(b)] = -member_nll(i, b);
    const double mixture_nll =
        -(logsumexp(neg.begin(), neg.end()) - std::log(static_cast<double>(b_count))) +
        log_jacobian;
    acc += std::min(1.0, std::sqrt(std::max(0.0, mixture_nll) / 2.0));
  }
  return acc / n;
}

// ---------------------------------------------------------------------------
// Checkpoints: ensemble header then member checkpoints in index order.
// ---------------------------------------------------------------------------

constexpr std::uint32_t kEnsembleMagic = 0x4E455242;  // "BREN"

inline void save_ensemble(std::ostream& out, const GaussianEnsemble& ens) {
  detail::write_pod(out, kEnsembleMagic);
  detail::write_pod(out, kMlpVersion);
  detail::write_pod(out, static_cast<std::uint32_t>(ens.cfg.members));
  detail::write_pod(out, static_cast<std::uint32_t>(ens.obs_dim));
  detail::write_pod(out, static_cast<std::uint32_t>(ens.act_dim));
  detail::write_pod(out, static_cast<std::uint32_t>(ens.trained ? 1 : 0));
  auto write_vec = [&out](const Vector& v) {
    detail::write_pod(out, static_cast<std::uint32_t>(v.size()));
    for (int i = 0; i < v.size(); ++i) detail::write_pod(out, v(i));
  };
  write_vec(ens.input_norm.mean);
  write_vec(ens.input_norm.std);
  write_vec(ens.target_norm.mean);
  write_vec(ens.target_norm.std);
  for (const auto& m : ens.members) save_mlp(out, m);
}

inline GaussianEnsemble load_ensemble(std::istream& in, const EnsembleConfig& cfg) {
  if (detail::read_pod<std::uint32_t>(in) != kEnsembleMagic)
    throw std::runtime_error("ensemble checkpoint: bad magic");
  if (detail::read_pod<std::uint32_t>(in) != kMlpVersion)
    throw std::runtime_error("ensemble checkpoint: unsupported version");
  GaussianEnsemble ens;
  ens.cfg = cfg;
  ens.cfg.members = static_cast<int>(detail::read_pod<std::uint32_t>(in));
  ens.obs_dim = static_cast<int>(detail::read_pod<std::uint32_t>(in));
  ens.act_dim = static_cast<int>(detail::read_pod<std::uint32_t>(in));
  ens.trained = detail::read_pod<std::uint32_t>(in) != 0;
  auto read_vec = [&in] {
    const auto n = detail::read_pod<std::uint32_t>(in);
    Vector v(static_cast<int>(n));
    for (int i = 0; i < v.size(); ++i) v(i) = detail::read_pod<double>(in);
    return v;
  };
  ens.input_norm.mean = read_vec();
  ens.input_norm.std = read_vec();
  ens.target_norm.mean = read_vec();
  ens.target_norm.std = read_vec();
  for (int b = 0; b < ens.cfg.members; ++b) {
    ens.members.push_back(load_mlp(in));
    MlpOptimizer opt;
    opt.cfg.learning_rate = ens.cfg.learning_rate;
    opt.init(ens.members.back());
    ens.optimizers.push_back(std::move(opt));
  }
  return ens;
}

inline std::uint64_t ensemble_param_hash(const GaussianEnsemble& ens) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& m : ens.members) {
    const std::uint64_t mh = mlp_param_hash(m);
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(&mh), sizeof(mh)), h);
  }
  return h;
}

}  // namespace branchrl
