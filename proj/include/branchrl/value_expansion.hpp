#pragma once

#include <cmath>
#include <vector>

#include "branchrl/ensemble.hpp"
#include "branchrl/sac.hpp"

namespace branchrl {

struct ExpansionConfig {
  int horizon = 0;  // H
  bool enabled = false;

  void validate() const {
    if (horizon < 0) throw std::invalid_argument("value expansion: H must be >= 0");
  }
};

struct ExpandedTargets {
  std::vector<QTarget> anchors;  // H+1 regression pairs, anchor t = -1 first
  bool fell_back = false;        // non-finite model prediction, reduced to H = 0
};

/// H-step model value expansion of one real transition: rolls the model
/// forward from s_next under the current policy (actions sampled, dynamics
/// advanced through a uniformly drawn member's mean prediction) and builds a
/// multi-step bootstrapped Q-regression target for every anchor
/// t = -1, 0, .., H-1, with t = -1 anchored at the real (s, a, r). H = 0
/// reduces exactly to the standard one-step soft target.
inline ExpandedTargets expanded_target_set(const GaussianEnsemble& model, const SacAgent& agent,
                                           const Transition& transition, int horizon,
                                           double gamma, Rng& rng) {
  if (horizon < 0) throw std::invalid_argument("expanded_target_set: H < 0");
  ExpandedTargets out;
  if (transition.done) {
    out.anchors.push_back({transition.s, transition.a, transition.r});
    return out;
  }

  // model rollout: states s_hat[0..H], actions a_hat[0..H], rewards r_hat[0..H-1]
  std::vector<Vector> s_hat{transition.s_next};
  std::vector<Vector> a_hat;
  std::vector<double> r_hat;
  int reached = horizon;
  for (int j = 0; j < horizon; ++j) {
    const ActionSample act = sac_sample_action(agent, s_hat.back(), rng);
    const int member = rng.uniform_int(model.cfg.members);
    const GaussianPrediction pred =
        ensemble_member_predict(model, member, s_hat.back(), act.action);
    const Vector next = s_hat.back() + pred.mean.head(model.obs_dim);
    const double reward = pred.mean(model.obs_dim);
    if (!next.allFinite() || !std::isfinite(reward)) {
      out.fell_back = true;
      reached = 0;
      break;
    }
    a_hat.push_back(act.action);
    r_hat.push_back(reward);
    s_hat.push_back(next);
  }
  if (out.fell_back) {
    s_hat.assign(1, transition.s_next);
    a_hat.clear();
    r_hat.clear();
  }
  const int h = reached;

  // soft bootstrap at the rollout end
  const ActionSample tail = sac_sample_action(agent, s_hat.back(), rng);
  Vector sa(agent.obs_dim + agent.act_dim);
  sa << s_hat.back(), tail.action;
  const double q1 = mlp_forward1(agent.target1, sa)(0);
  const double q2 = mlp_forward1(agent.target2, sa)(0);
  const double v_tail = std::min(q1, q2) - agent.alpha() * tail.log_prob;

  // anchor t = -1: the real transition
  {
    double y = transition.r;
    double disc = gamma;
    for (int j = 0; j < h; ++j) {
      y += disc * r_hat[static_cast<std::size_t>(j)];
      disc *= gamma;
    }
    y += disc * v_tail;
    out.anchors.push_back({transition.s, transition.a, y});
  }
  // anchors t = 0 .. h-1: model states
  for (int t = 0; t < h; ++t) {
    double y = 0.0;
    double disc = 1.0;
    for (int j = t; j < h; ++j) {
      y += disc * r_hat[static_cast<std::size_t>(j)];
      disc *= gamma;
    }
    y += disc * v_tail;
    out.anchors.push_back(
        {s_hat[static_cast<std::size_t>(t)], a_hat[static_cast<std::size_t>(t)], y});
  }
  return out;
}

/// Scalar form: the target attached to the real transition (anchor t = -1).
inline double expanded_target(const GaussianEnsemble& model, const SacAgent& agent,
                              const Transition& transition, int horizon, double gamma,
                              Rng& rng) {
  return expanded_target_set(model, agent, transition, horizon, gamma, rng).anchors.front().y;
}

}  // namespace branchrl
