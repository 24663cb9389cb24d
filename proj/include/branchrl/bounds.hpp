#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace branchrl {

/// Inputs to the closed-form return-discrepancy penalties.
struct BoundParams {
  double gamma = 0.99;
  double r_max = 1.0;
  double eps_m = 0.0;        // model error under the data-collecting policy
  double eps_m_prime = 0.0;  // model error under the current policy
  double eps_pi = 0.0;       // max per-state policy TV divergence
  int k = 0;                 // branch length

  void validate() const {
    if (!(gamma > 0.0 && gamma < 1.0))
      throw std::invalid_argument("BoundParams: gamma must lie strictly in (0,1)");
    if (!(r_max > 0.0) || !std::isfinite(r_max))
      throw std::invalid_argument("BoundParams: r_max must be positive and finite");
    if (eps_m < 0.0 || eps_m_prime < 0.0 || eps_pi < 0.0 || !std::isfinite(eps_m) ||
        !std::isfinite(eps_m_prime) || !std::isfinite(eps_pi))
      throw std::invalid_argument("BoundParams: epsilons must be finite and non-negative");
    if (k < 0) throw std::invalid_argument("BoundParams: k must be non-negative");
  }
};

/// Full-rollout penalty C(eps_m, eps_pi):
///   2 gamma r_max (eps_m + 2 eps_pi) / (1-gamma)^2 + 4 r_max eps_pi / (1-gamma).
inline double penalty_monotonic(const BoundParams& p) {
  p.validate();
  const double om = 1.0 - p.gamma;
  return 2.0 * p.gamma * p.r_max * (p.eps_m + 2.0 * p.eps_pi) / (om * om) +
         4.0 * p.r_max * p.eps_pi / om;
}

/// Branched-rollout penalty with model error measured under the
/// data-collecting policy:
///   2 r_max [ gamma^{k+1} eps_pi/(1-gamma)^2 + (gamma^k + 2) eps_pi/(1-gamma)
///             + k (eps_m + 2 eps_pi)/(1-gamma) ].
inline double penalty_branched(const BoundParams& p) {
  p.validate();
  const double om = 1.0 - p.gamma;
  const double gk = std::pow(p.gamma, p.k);
  return 2.0 * p.r_max *
         (gk * p.gamma * p.eps_pi / (om * om) + (gk + 2.0) * p.eps_pi / om +
          static_cast<double>(p.k) * (p.eps_m + 2.0 * p.eps_pi) / om);
}

/// Branched-rollout penalty with model error measured under the current
/// policy (eps_m_prime):
///   2 r_max [ gamma^{k+1} eps_pi/(1-gamma)^2 + gamma^k eps_pi/(1-gamma)
///             + k eps_m'/(1-gamma) ].
inline double penalty_branched_current(const BoundParams& p) {
  p.validate();
  const double om = 1.0 - p.gamma;
  const double gk = std::pow(p.gamma, p.k);
  return 2.0 * p.r_max *
         (gk * p.gamma * p.eps_pi / (om * om) + gk * p.eps_pi / om +
          static_cast<double>(p.k) * p.eps_m_prime / om);
}

/// Smallest k in [0, k_max] minimizing penalty_branched_current; ties break
/// toward smaller k (shorter rollouts are cheaper).
inline int optimal_branch_length(const BoundParams& p, int k_max) {
  if (k_max < 0) throw std::invalid_argument("optimal_branch_length: k_max < 0");
  BoundParams q = p;
  int best_k = 0;
  double best = std::numeric_limits<double>::infinity();
  for (int k = 0; k <= k_max; ++k) {
    q.k = k;
    const double v = penalty_branched_current(q);
    if (v < best) {
      best = v;
      best_k = k;
    }
  }
  return best_k;
}

/// Linear approximation of model error under the current policy,
/// eps_m'(eps_pi) ~ intercept + slope * eps_pi, clamped below at zero.
struct GeneralizationModel {
  double intercept = 0.0;  // eps_m at zero policy shift
  double slope = 0.0;      // d eps_m' / d eps_pi
};

inline double predict_current_error(const GeneralizationModel& g, double eps_pi) {
  if (eps_pi < 0.0) throw std::invalid_argument("predict_current_error: eps_pi < 0");
  return std::max(0.0, g.intercept + g.slope * eps_pi);
}

}  // namespace branchrl
