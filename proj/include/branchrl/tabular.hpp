#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "branchrl/rng.hpp"

namespace branchrl {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Finite MDP with explicit transition tensor. transition[a](s, s') is the
/// probability of landing in s' after taking action a in state s.
struct TabularMDP {
  int num_states = 0;
  int num_actions = 0;
  std::vector<Matrix> transition;  // one S x S matrix per action
  Matrix reward;                   // S x A, entries in [-r_max, r_max]
  double gamma = 0.99;
  Vector rho0;                     // initial state distribution
  double r_max = 1.0;

  void validate() const {
    if (num_states < 1 || num_actions < 1)
      throw std::invalid_argument("TabularMDP: empty state or action space");
    if (static_cast<int>(transition.size()) != num_actions)
      throw std::invalid_argument("TabularMDP: transition tensor shape mismatch");
    if (!(gamma > 0.0 && gamma < 1.0))
      throw std::invalid_argument("TabularMDP: gamma must lie in (0,1)");
    for (const auto& p : transition) {
      if (p.rows() != num_states || p.cols() != num_states)
        throw std::invalid_argument("TabularMDP: transition matrix shape mismatch");
      if ((p.array() < 0.0).any())
        throw std::invalid_argument("TabularMDP: negative transition probability");
      for (int s = 0; s < num_states; ++s)
        if (std::abs(p.row(s).sum() - 1.0) > 1e-12)
          throw std::invalid_argument("TabularMDP: transition row does not sum to 1");
    }
    if (reward.rows() != num_states || reward.cols() != num_actions)
      throw std::invalid_argument("TabularMDP: reward table shape mismatch");
    if ((reward.array().abs() > r_max + 1e-12).any())
      throw std::invalid_argument("TabularMDP: reward exceeds r_max");
    if (rho0.size() != num_states || (rho0.array() < 0.0).any() ||
        std::abs(rho0.sum() - 1.0) > 1e-12)
      throw std::invalid_argument("TabularMDP: rho0 is not a distribution");
  }
};

struct TabularPolicy {
  Matrix probs;  // S x A, rows are distributions over actions

  void validate() const {
    if ((probs.array() < 0.0).any())
      throw std::invalid_argument("TabularPolicy: negative probability");
    for (int s = 0; s < probs.rows(); ++s)
      if (std::abs(probs.row(s).sum() - 1.0) > 1e-12)
        throw std::invalid_argument("TabularPolicy: row does not sum to 1");
  }
};

struct MarginalSequence {
  int horizon = 0;
  std::vector<Vector> marginals;  // marginals[t] = distribution of s_t
};

/// Half L1 distance between two distributions, in [0, 1].
inline double tv_distance(const Vector& p, const Vector& q) {
  if (p.size() != q.size())
    throw std::invalid_argument("tv_distance: length mismatch");
  return 0.5 * (p - q).cwiseAbs().sum();
}

/// State-to-state kernel under a fixed policy: P(s, s') = sum_a pi(a|s) p(s'|s,a).
inline Matrix policy_kernel(const TabularMDP& mdp, const TabularPolicy& pi) {
  Matrix k = Matrix::Zero(mdp.num_states, mdp.num_states);
  for (int a = 0; a < mdp.num_actions; ++a)
    k += pi.probs.col(a).asDiagonal() * mdp.transition[static_cast<std::size_t>(a)];
  return k;
}

inline Vector policy_reward(const TabularMDP& mdp, const TabularPolicy& pi) {
  return (pi.probs.array() * mdp.reward.array()).rowwise().sum().matrix();
}

/// Expected discounted return, solved exactly through the linear
/// policy-evaluation system (I - gamma P) v = r.
inline double exact_returns(const TabularMDP& mdp, const TabularPolicy& pi) {
  const Matrix p = policy_kernel(mdp, pi);
  const Vector r = policy_reward(mdp, pi);
  const Matrix a = Matrix::Identity(mdp.num_states, mdp.num_states) - mdp.gamma * p;
  const Vector v = a.partialPivLu().solve(r);
  if (!v.allFinite() || (a * v - r).cwiseAbs().maxCoeff() > 1e-8 * (1.0 + r.cwiseAbs().maxCoeff()))
    throw std::logic_error("exact_returns: singular policy-evaluation system");
  return mdp.rho0.dot(v);
}

/// Distributions of s_t for t = 0..horizon under (rho0, pi, p).
inline MarginalSequence state_marginals(const TabularMDP& mdp, const TabularPolicy& pi,
                                        int horizon) {
  if (horizon < 0) throw std::invalid_argument("state_marginals: horizon < 0");
  MarginalSequence seq;
  seq.horizon = horizon;
  seq.marginals.reserve(static_cast<std::size_t>(horizon) + 1);
  const Matrix kt = policy_kernel(mdp, pi).transpose();
  Vector mu = mdp.rho0;
  seq.marginals.push_back(mu);
  for (int t = 0; t < horizon; ++t) {
    mu = kt * mu;
    seq.marginals.push_back(mu);
  }
  return seq;
}

struct PolicyDivergence {
  double eps_pi_max = 0.0;  // max_s TV(pi(.|s), pi_D(.|s))
  double kl_max = 0.0;      // max_s KL(pi(.|s) || pi_D(.|s)), may be +inf

  /// Pinsker: TV <= sqrt(KL/2). Holds for every state, hence for the maxima.
  bool pinsker_holds(double tol = 1e-12) const {
    return eps_pi_max <= std::sqrt(kl_max / 2.0) + tol;
  }
};

inline PolicyDivergence policy_divergences(const TabularPolicy& pi, const TabularPolicy& pi_d) {
  if (pi.probs.rows() != pi_d.probs.rows() || pi.probs.cols() != pi_d.probs.cols())
    throw std::invalid_argument("policy_divergences: shape mismatch");
  PolicyDivergence out;
  for (int s = 0; s < pi.probs.rows(); ++s) {
    out.eps_pi_max = std::max(out.eps_pi_max,
                              0.5 * (pi.probs.row(s) - pi_d.probs.row(s)).cwiseAbs().sum());
    double kl = 0.0;
    for (int a = 0; a < pi.probs.cols(); ++a) {
      const double p = pi.probs(s, a), q = pi_d.probs(s, a);
      if (p <= 0.0) continue;
      if (q <= 0.0) {
        kl = std::numeric_limits<double>::infinity();
        break;
      }
      kl += p * std::log(p / q);
    }
    out.kl_max = std::max(out.kl_max, kl);
  }
  return out;
}

/// Expected transition-kernel TV error under the data-collecting policy's
/// time-dependent state distribution:
///   max_{t <= horizon} E_{s ~ marginal_t, a ~ pi_D(.|s)} TV(p(.|s,a), p_hat(.|s,a)).
inline double model_epsilon_m(const TabularMDP& mdp_true, const TabularMDP& mdp_model,
                              const TabularPolicy& data_policy, int horizon) {
  if (horizon < 1) throw std::invalid_argument("model_epsilon_m: horizon < 1");
  if (mdp_true.num_states != mdp_model.num_states ||
      mdp_true.num_actions != mdp_model.num_actions)
    throw std::invalid_argument("model_epsilon_m: state/action space mismatch");
  // Per-state expected TV over the data policy's actions, reused across t.
  Vector per_state = Vector::Zero(mdp_true.num_states);
  for (int s = 0; s < mdp_true.num_states; ++s)
    for (int a = 0; a < mdp_true.num_actions; ++a)
      per_state(s) += data_policy.probs(s, a) *
                      0.5 *
                      (mdp_true.transition[static_cast<std::size_t>(a)].row(s) -
                       mdp_model.transition[static_cast<std::size_t>(a)].row(s))
                          .cwiseAbs()
                          .sum();
  const Matrix kt = policy_kernel(mdp_true, data_policy).transpose();
  Vector mu = mdp_true.rho0;
  double eps = mu.dot(per_state);
  for (int t = 1; t <= horizon; ++t) {
    mu = kt * mu;
    eps = std::max(eps, mu.dot(per_state));
  }
  return eps;
}

/// Worst-state expected kernel TV, actions drawn from the reference policy.
/// Dominates the marginal-weighted version for any state distribution.
inline double kernel_tv_max_state(const TabularMDP& mdp_a, const TabularMDP& mdp_b,
                                  const TabularPolicy& reference_policy) {
  double worst = 0.0;
  for (int s = 0; s < mdp_a.num_states; ++s) {
    double v = 0.0;
    for (int a = 0; a < mdp_a.num_actions; ++a)
      v += reference_policy.probs(s, a) *
           0.5 *
           (mdp_a.transition[static_cast<std::size_t>(a)].row(s) -
            mdp_b.transition[static_cast<std::size_t>(a)].row(s))
               .cwiseAbs()
               .sum();
    worst = std::max(worst, v);
  }
  return worst;
}

inline int horizon_for_tail(double gamma, double r_max, double tol) {
  // smallest h with gamma^h * r_max / (1 - gamma) < tol
  const double target = tol * (1.0 - gamma) / std::max(r_max, 1e-300);
  if (target >= 1.0) return 1;
  return std::max(1, static_cast<int>(std::ceil(std::log(target) / std::log(gamma))) + 1);
}

/// Returns of the k-branched rollout process.
///
/// The process is evaluated through its time-t state marginal: at time t the
/// last min(t, k) steps ran under (policy_post, mdp_post) and the first
/// (t - k)+ steps under (policy_pre, mdp_pre). Summing gamma^t times the
/// expected reward of that marginal is the same as weighting each branch
/// point T proportionally to gamma^T and scoring the state found at the end
/// of its k-step branch. With k = 0, or with identical pre/post processes,
/// this reduces exactly to the plain discounted return of the pre process.
inline double branched_returns(const TabularMDP& mdp_pre, const TabularPolicy& policy_pre,
                               const TabularMDP& mdp_post, const TabularPolicy& policy_post,
                               int k, int horizon) {
  if (k < 0) throw std::invalid_argument("branched_returns: k < 0");
  if (mdp_pre.num_states != mdp_post.num_states ||
      mdp_pre.num_actions != mdp_post.num_actions)
    throw std::invalid_argument("branched_returns: state/action space mismatch");
  if (std::abs(mdp_pre.gamma - mdp_post.gamma) > 1e-15)
    throw std::invalid_argument("branched_returns: pre/post discount mismatch");
  const double gamma = mdp_pre.gamma;
  const double r_max = std::max(mdp_pre.r_max, mdp_post.r_max);
  if (std::pow(gamma, horizon) * r_max / (1.0 - gamma) >= 1e-9)
    throw std::invalid_argument("branched_returns: insufficient horizon for requested tolerance");

  const Matrix pre_t = policy_kernel(mdp_pre, policy_pre).transpose();
  const Matrix post_t = policy_kernel(mdp_post, policy_post).transpose();
  const Vector r_pre = policy_reward(mdp_pre, policy_pre);
  const Vector r_post = policy_reward(mdp_post, policy_post);
  const Vector& r_meas = (k > 0) ? r_post : r_pre;

  // post_t^k, applied to each pre-process marginal
  Matrix post_k = Matrix::Identity(mdp_pre.num_states, mdp_pre.num_states);
  for (int i = 0; i < k; ++i) post_k = post_t * post_k;

  double eta = 0.0;
  double disc = 1.0;
  Vector mu_pre = mdp_pre.rho0;   // pre-process marginal at t - k
  Vector mu_head = mdp_pre.rho0;  // post-only marginal for t < k
  for (int t = 0; t <= horizon; ++t) {
    if (t < k) {
      if (t > 0) mu_head = post_t * mu_head;
      eta += disc * mu_head.dot(r_meas);
    } else {
      if (t > k) mu_pre = pre_t * mu_pre;
      eta += disc * (post_k * mu_pre).dot(r_meas);
    }
    disc *= gamma;
  }
  return eta;
}

// ---------------------------------------------------------------------------
// Random instance sampling (flat Dirichlet rows, shared rewards in [-1, 1],
// kernel perturbation by mixing with an independent Dirichlet draw).
// ---------------------------------------------------------------------------

inline TabularPolicy sample_random_policy(int num_states, int num_actions, Rng& rng) {
  TabularPolicy pi;
  pi.probs = Matrix(num_states, num_actions);
  for (int s = 0; s < num_states; ++s) {
    const auto row = rng.dirichlet_flat(num_actions);
    for (int a = 0; a < num_actions; ++a) pi.probs(s, a) = row[static_cast<std::size_t>(a)];
  }
  return pi;
}

inline TabularPolicy mix_policies(const TabularPolicy& base, const TabularPolicy& other,
                                  double beta) {
  TabularPolicy out;
  out.probs = (1.0 - beta) * base.probs + beta * other.probs;
  return out;
}

inline TabularMDP sample_random_mdp(int num_states, int num_actions, double gamma, Rng& rng,
                                    double r_max = 1.0) {
  TabularMDP mdp;
  mdp.num_states = num_states;
  mdp.num_actions = num_actions;
  mdp.gamma = gamma;
  mdp.r_max = r_max;
  mdp.transition.resize(static_cast<std::size_t>(num_actions));
  for (auto& p : mdp.transition) {
    p = Matrix(num_states, num_states);
    for (int s = 0; s < num_states; ++s) {
      const auto row = rng.dirichlet_flat(num_states);
      for (int s2 = 0; s2 < num_states; ++s2) p(s, s2) = row[static_cast<std::size_t>(s2)];
    }
  }
  mdp.reward = Matrix(num_states, num_actions);
  for (int s = 0; s < num_states; ++s)
    for (int a = 0; a < num_actions; ++a) mdp.reward(s, a) = rng.uniform(-r_max, r_max);
  const auto init = rng.dirichlet_flat(num_states);
  mdp.rho0 = Vector(num_states);
  for (int s = 0; s < num_states; ++s) mdp.rho0(s) = init[static_cast<std::size_t>(s)];
  return mdp;
}

/// Kernel-only perturbation: p_hat = (1 - lambda) p + lambda q with q an
/// independent Dirichlet draw. Rewards, rho0 and gamma are shared so that the
/// model error is purely transition error with magnitude controlled by lambda.
inline TabularMDP perturb_mdp_kernel(const TabularMDP& mdp, double lambda, Rng& rng) {
  TabularMDP out = mdp;
  for (auto& p : out.transition) {
    for (int s = 0; s < mdp.num_states; ++s) {
      const auto row = rng.dirichlet_flat(mdp.num_states);
      for (int s2 = 0; s2 < mdp.num_states; ++s2)
        p(s, s2) = (1.0 - lambda) * p(s, s2) + lambda * row[static_cast<std::size_t>(s2)];
    }
  }
  return out;
}

struct TabularInstanceParams {
  int min_states = 2;
  int max_states = 10;
  int min_actions = 2;
  int max_actions = 4;
  double gamma_lo = 0.5;
  double gamma_hi = 0.99;
  double lambda_hi = 0.3;
  double r_max = 1.0;
};

struct TabularInstance {
  TabularMDP truth;
  TabularMDP model;
  TabularPolicy data_policy;     // pi_D
  TabularPolicy current_policy;  // pi
  double lambda = 0.0;
};

inline TabularInstance sample_instance(const TabularInstanceParams& params, Rng& rng) {
  TabularInstance inst;
  const int s = params.min_states + rng.uniform_int(params.max_states - params.min_states + 1);
  const int a = params.min_actions + rng.uniform_int(params.max_actions - params.min_actions + 1);
  const double gamma = rng.uniform(params.gamma_lo, params.gamma_hi);
  inst.lambda = rng.uniform(0.0, params.lambda_hi);
  inst.truth = sample_random_mdp(s, a, gamma, rng, params.r_max);
  inst.model = perturb_mdp_kernel(inst.truth, inst.lambda, rng);
  inst.data_policy = sample_random_policy(s, a, rng);
  inst.current_policy =
      mix_policies(inst.data_policy, sample_random_policy(s, a, rng), rng.uniform());
  return inst;
}

}  // namespace branchrl
