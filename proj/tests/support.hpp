#pragma once

// Shared test scaffolding: brute-force oracles kept independent of the
// library code paths they check, plus small sampling helpers.

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "branchrl/nn.hpp"
#include "branchrl/rng.hpp"
#include "branchrl/tabular.hpp"

namespace testsupport {

using branchrl::Rng;
using branchrl::TabularMDP;
using branchrl::TabularPolicy;

struct McEstimate {
  double mean = 0.0;
  double stderr_mean = 0.0;
};

inline int sample_categorical(const Eigen::VectorXd& probs, Rng& rng) {
  double u = rng.uniform();
  double acc = 0.0;
  for (int i = 0; i < probs.size(); ++i) {
    acc += probs(i);
    if (u < acc) return i;
  }
  return static_cast<int>(probs.size()) - 1;
}

inline int sample_row(const Eigen::MatrixXd& probs, int row, Rng& rng) {
  double u = rng.uniform();
  double acc = 0.0;
  for (int i = 0; i < probs.cols(); ++i) {
    acc += probs(row, i);
    if (u < acc) return i;
  }
  return static_cast<int>(probs.cols()) - 1;
}

/// Monte-Carlo discounted return with truncation chosen so the tail is
/// below tail_tol.
inline McEstimate mc_returns(const TabularMDP& mdp, const TabularPolicy& pi, long long rollouts,
                             std::uint64_t seed, double tail_tol = 1e-6) {
  Rng rng(seed);
  const int horizon = branchrl::horizon_for_tail(mdp.gamma, mdp.r_max, tail_tol);
  double sum = 0.0, sumsq = 0.0;
  for (long long i = 0; i < rollouts; ++i) {
    int s = sample_categorical(mdp.rho0, rng);
    double g = 0.0, disc = 1.0;
    for (int t = 0; t < horizon; ++t) {
      const int a = sample_row(pi.probs, s, rng);
      g += disc * mdp.reward(s, a);
      disc *= mdp.gamma;
      s = sample_row(mdp.transition[static_cast<std::size_t>(a)], s, rng);
    }
    sum += g;
    sumsq += g * g;
  }
  McEstimate est;
  const double n = static_cast<double>(rollouts);
  est.mean = sum / n;
  est.stderr_mean = std::sqrt(std::max(0.0, sumsq / n - est.mean * est.mean) / n);
  return est;
}

/// Monte-Carlo branched returns. Uses the branch-point form: the head terms
/// t < k come from post-only rollouts, and each geometrically drawn branch
/// point T contributes the reward observed at the end of its k-step branch
/// with total weight gamma^k / (1 - gamma).
inline McEstimate mc_branched_returns(const TabularMDP& pre, const TabularPolicy& pre_pi,
                                      const TabularMDP& post, const TabularPolicy& post_pi,
                                      int k, long long samples, std::uint64_t seed) {
  Rng rng(seed);
  const double gamma = pre.gamma;
  double head_sum = 0.0, head_sumsq = 0.0;
  if (k > 0) {
    for (long long i = 0; i < samples; ++i) {
      int s = sample_categorical(pre.rho0, rng);
      double g = 0.0, disc = 1.0;
      for (int t = 0; t < k; ++t) {
        const int a = sample_row(post_pi.probs, s, rng);
        g += disc * post.reward(s, a);
        disc *= gamma;
        s = sample_row(post.transition[static_cast<std::size_t>(a)], s, rng);
      }
      head_sum += g;
      head_sumsq += g * g;
    }
  }
  double tail_sum = 0.0, tail_sumsq = 0.0;
  const double tail_weight = std::pow(gamma, k) / (1.0 - gamma);
  for (long long i = 0; i < samples; ++i) {
    // branch point T ~ Geometric(1 - gamma) via inverse CDF
    const int branch_t = static_cast<int>(
        std::floor(std::log(1.0 - rng.uniform()) / std::log(gamma)));
    int s = sample_categorical(pre.rho0, rng);
    for (int t = 0; t < branch_t; ++t) {
      const int a = sample_row(pre_pi.probs, s, rng);
      s = sample_row(pre.transition[static_cast<std::size_t>(a)], s, rng);
    }
    for (int t = 0; t < k; ++t) {
      const int a = sample_row(post_pi.probs, s, rng);
      s = sample_row(post.transition[static_cast<std::size_t>(a)], s, rng);
    }
    const auto& pi_meas = (k > 0) ? post_pi : pre_pi;
    const auto& mdp_meas = (k > 0) ? post : pre;
    const int a = sample_row(pi_meas.probs, s, rng);
    const double v = tail_weight * mdp_meas.reward(s, a);
    tail_sum += v;
    tail_sumsq += v * v;
  }
  const double n = static_cast<double>(samples);
  const double head_mean = (k > 0) ? head_sum / n : 0.0;
  const double head_var = (k > 0) ? std::max(0.0, head_sumsq / n - head_mean * head_mean) : 0.0;
  const double tail_mean = tail_sum / n;
  const double tail_var = std::max(0.0, tail_sumsq / n - tail_mean * tail_mean);
  McEstimate est;
  est.mean = head_mean + tail_mean;
  est.stderr_mean = std::sqrt((head_var + tail_var) / n);
  return est;
}

/// Central finite-difference gradient check against an analytic MlpGrads.
/// loss_fn() must evaluate the scalar loss with the network's current
/// parameters. Relative error uses max(|analytic|, |fd|) as the scale, with
/// near-zero pairs compared absolutely.
template <typename LossFn>
double max_grad_rel_error(branchrl::Mlp& net, const branchrl::MlpGrads& analytic, LossFn&& loss_fn,
                          double h = 1e-5) {
  double worst = 0.0;
  auto check_param = [&](double& p, double analytic_grad) {
    const double saved = p;
    p = saved + h;
    const double up = loss_fn();
    p = saved - h;
    const double down = loss_fn();
    p = saved;
    const double fd = (up - down) / (2.0 * h);
    const double scale = std::max(std::abs(analytic_grad), std::abs(fd));
    if (scale < 1e-7) return;  // both effectively zero
    worst = std::max(worst, std::abs(analytic_grad - fd) / scale);
  };
  for (std::size_t l = 0; l < net.w.size(); ++l) {
    for (int i = 0; i < net.w[l].rows(); ++i)
      for (int j = 0; j < net.w[l].cols(); ++j) check_param(net.w[l](i, j), analytic.w[l](i, j));
    for (int i = 0; i < net.b[l].size(); ++i) check_param(net.b[l](i), analytic.b[l](i));
  }
  return worst;
}

/// Scratch directory for file-producing tests.
inline std::filesystem::path fresh_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() / ("branchrl_test_" + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testsupport
