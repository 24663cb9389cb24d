#pragma once

#include <cmath>
#include <vector>

#include "branchrl/bounds.hpp"
#include "branchrl/ensemble.hpp"
#include "branchrl/envs.hpp"
#include "branchrl/mbpo.hpp"
#include "branchrl/sac.hpp"
#include "branchrl/util.hpp"

namespace branchrl {

struct GeneralizationPoint {
  double kl = 0.0;           // policy divergence KL(pi || pi_D), pre-squash
  double model_error = 0.0;  // frozen-model validation error proxy
  int train_set_size = 0;
};

struct GeneralizationCurve {
  std::vector<GeneralizationPoint> points;
  GeneralizationModel fitted;
};

struct ExploitationPair {
  double model_return = 0.0;
  double true_return = 0.0;
};

struct ExploitationReport {
  std::vector<ExploitationPair> pairs;
  double pearson_r = 0.0;
  bool pearson_defined = false;  // false when either return series is constant
  double mean_gap = 0.0;         // model minus true
};

/// Ordinary least squares of model_error on kl. Near-constant kl (no spread
/// in x) degenerates to slope 0 with the mean error as intercept; the
/// intercept is clamped at zero either way.
inline GeneralizationModel fit_slope(const std::vector<GeneralizationPoint>& points) {
  if (points.size() < 3)
    throw std::invalid_argument("fit_slope: degenerate fit, need at least 3 points");
  const double n = static_cast<double>(points.size());
  double mx = 0.0, my = 0.0;
  for (const auto& p : points) {
    mx += p.kl;
    my += p.model_error;
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0;
  for (const auto& p : points) {
    sxx += (p.kl - mx) * (p.kl - mx);
    sxy += (p.kl - mx) * (p.model_error - my);
  }
  GeneralizationModel g;
  if (sxx < 1e-12 * n) {
    g.slope = 0.0;
    g.intercept = std::max(0.0, my);
    return g;
  }
  g.slope = sxy / sxx;
  g.intercept = std::max(0.0, my - g.slope * mx);
  return g;
}

/// Mean over states of the closed-form diagonal-Gaussian KL between the two
/// actors' pre-squash distributions (the tanh squash cancels in the KL of
/// the underlying distributions).
inline double mean_gaussian_policy_kl(const SacAgent& pi, const Mlp& pi_d_actor,
                                      const Matrix& states) {
  Rng null_rng(0);
  const auto cur = detail::sample_actions_batch(pi, states, null_rng, true);
  MlpTrace trace;
  const Matrix raw_d = mlp_forward(pi_d_actor, states, &trace);
  const int d = pi.act_dim;
  double total = 0.0;
  for (int i = 0; i < states.rows(); ++i) {
    for (int j = 0; j < d; ++j) {
      const double mu1 = cur.mean(i, j);
      const double ls1 = cur.log_std(i, j);
      const double mu2 = raw_d(i, j);
      const double ls2 = clamp_log_var(raw_d(i, d + j), pi.cfg.log_std_bounds);
      const double v1 = std::exp(2.0 * ls1), v2 = std::exp(2.0 * ls2);
      total += ls2 - ls1 + (v1 + (mu1 - mu2) * (mu1 - mu2)) / (2.0 * v2) - 0.5;
    }
  }
  return total / static_cast<double>(states.rows());
}

struct ProbeConfig {
  std::vector<int> train_set_sizes = {1000, 4000};
  int prep_env_steps = 1000;   // plain-SAC steps shaping pi_D before the probe
  int probe_env_steps = 2000;  // continued optimization after freezing the model
  int interval = 200;          // measurement spacing in env steps
  int eval_transitions = 400;  // fresh on-policy transitions per measurement
  int updates_per_step = 4;    // gradient updates per env step during prep/probe
  double kl_window = 0.5;      // OLS window for the fitted slope
  int exploitation_rollouts = 20;

  void validate() const {
    if (interval < 1 || eval_transitions < 1 || updates_per_step < 0)
      throw std::invalid_argument("ProbeConfig: counts must be positive");
  }
};

namespace detail {

/// Plain SAC training segment collecting real transitions; shared by the
/// probe's prep and continued-optimization phases.
inline void sac_training_segment(const Env& env, SacAgent& agent, ReplayBuffer& buffer,
                                 int env_steps, int updates_per_step, double discount,
                                 Rng& rng, EnvState& state, bool& need_reset,
                                 long long& episode_counter, std::uint64_t reset_seed_base) {
  for (int t = 0; t < env_steps; ++t) {
    if (need_reset) {
      state = env.reset(derive_seed(reset_seed_base, "ep." + std::to_string(episode_counter)));
      ++episode_counter;
      need_reset = false;
    }
    const ActionSample act = sac_sample_action(agent, state.observation, rng);
    const StepResult res = env.step(state, act.action);
    Transition tr;
    tr.s = state.observation;
    tr.a = act.action;
    tr.r = res.reward;
    tr.s_next = res.state.observation;
    tr.done = false;  // time-limit truncation only
    buffer.push(std::move(tr));
    state = res.state;
    if (res.done) need_reset = true;
    if (buffer.size() >= 256) {
      for (int g = 0; g < updates_per_step; ++g) {
        const auto batch = buffer.sample(static_cast<std::size_t>(agent.cfg.batch_size), rng);
        sac_critic_update(agent, batch, discount, rng);
        sac_actor_update(agent, batch, rng);
        sac_alpha_update(agent, batch, rng);
      }
    }
  }
}

/// Fresh stochastic on-policy transitions from dedicated episodes.
inline std::vector<Transition> collect_policy_transitions(const Env& env, const SacAgent& agent,
                                                          int count, std::uint64_t seed) {
  std::vector<Transition> out;
  out.reserve(static_cast<std::size_t>(count));
  Rng rng(derive_seed(seed, "collect.noise"));
  long long episode = 0;
  EnvState st;
  bool need_reset = true;
  while (static_cast<int>(out.size()) < count) {
    if (need_reset) {
      st = env.reset(derive_seed(seed, "collect.ep." + std::to_string(episode)));
      ++episode;
      need_reset = false;
    }
    const ActionSample act = sac_sample_action(agent, st.observation, rng);
    const StepResult res = env.step(st, act.action);
    Transition tr;
    tr.s = st.observation;
    tr.a = act.action;
    tr.r = res.reward;
    tr.s_next = res.state.observation;
    tr.done = false;
    out.push_back(std::move(tr));
    st = res.state;
    if (res.done) need_reset = true;
  }
  return out;
}

}  // namespace detail

/// Trains an ensemble on data from a frozen data-collecting policy, then
/// continues policy optimization while recording (KL(pi || pi_D),
/// frozen-model validation error) at fixed intervals, one sweep per training
/// set size. Points are recorded along the optimization path with
/// non-increasing KL measurements skipped as noise; the pooled small-KL
/// window is fitted by least squares.
inline GeneralizationCurve run_generalization_probe(const Env& env, const SacConfig& sac_cfg,
                                                    const EnsembleConfig& ens_cfg,
                                                    const ProbeConfig& probe_cfg,
                                                    std::uint64_t seed) {
  probe_cfg.validate();
  const double discount = 0.99;
  GeneralizationCurve curve;

  // shape a nontrivial data-collecting policy
  SacAgent base_agent = make_sac_agent(env.spec(), sac_cfg, derive_seed(seed, "probe.agent"));
  ReplayBuffer buffer(200000);
  {
    Rng warm(derive_seed(seed, "probe.warmup"));
    EnvState st;
    bool need_reset = true;
    long long episodes = 0;
    Rng rng(derive_seed(seed, "probe.prep"));
    detail::sac_training_segment(env, base_agent, buffer, probe_cfg.prep_env_steps,
                                 probe_cfg.updates_per_step, discount, rng, st, need_reset,
                                 episodes, derive_seed(seed, "probe.prep.reset"));
    (void)warm;
  }
  const Mlp pi_d_actor = base_agent.actor;  // frozen snapshot of pi_D

  for (std::size_t size_idx = 0; size_idx < probe_cfg.train_set_sizes.size(); ++size_idx) {
    const int size = probe_cfg.train_set_sizes[size_idx];
    const std::uint64_t sweep_seed = derive_seed(seed, "sweep." + std::to_string(size_idx));
    const auto train_data =
        detail::collect_policy_transitions(env, base_agent, size, derive_seed(sweep_seed, "data"));
    GaussianEnsemble ensemble = make_ensemble(env.spec().state_dim, env.spec().action_dim,
                                              ens_cfg, derive_seed(sweep_seed, "ens"));
    ensemble_fit(ensemble, train_data, derive_seed(sweep_seed, "fit"));

    SacAgent agent = base_agent;  // restart continued optimization from pi_D
    double last_kl = -1.0;
    auto measure = [&](int measurement_idx) {
      const std::uint64_t m_seed =
          derive_seed(sweep_seed, "measure." + std::to_string(measurement_idx));
      const auto fresh =
          detail::collect_policy_transitions(env, agent, probe_cfg.eval_transitions, m_seed);
      Matrix states(static_cast<int>(fresh.size()), env.spec().state_dim);
      for (std::size_t i = 0; i < fresh.size(); ++i)
        states.row(static_cast<int>(i)) = fresh[i].s.transpose();
      const double kl = mean_gaussian_policy_kl(agent, pi_d_actor, states);
      const double err = estimate_eps_m(ensemble, fresh);
      if (kl >= last_kl) {
        curve.points.push_back({kl, err, size});
        last_kl = kl;
      }
    };
    measure(0);  // pi == pi_D: kl is exactly zero, the measured intercept

    EnvState st;
    bool need_reset = true;
    long long episodes = 0;
    Rng rng(derive_seed(sweep_seed, "probe.continue"));
    int measurement = 1;
    for (int done_steps = 0; done_steps < probe_cfg.probe_env_steps;
         done_steps += probe_cfg.interval) {
      const int chunk = std::min(probe_cfg.interval, probe_cfg.probe_env_steps - done_steps);
      detail::sac_training_segment(env, agent, buffer, chunk, probe_cfg.updates_per_step,
                                   discount, rng, st, need_reset, episodes,
                                   derive_seed(sweep_seed, "reset"));
      measure(measurement++);
    }
  }

  std::vector<GeneralizationPoint> window;
  for (const auto& p : curve.points)
    if (p.kl <= probe_cfg.kl_window) window.push_back(p);
  curve.fitted = fit_slope(window.size() >= 3 ? window : curve.points);
  return curve;
}

/// Paired-episode comparison of undiscounted returns under the true
/// environment and under pure model rollouts of the same horizon, from
/// shared start states with the deterministic policy. Neither the agent nor
/// the model is mutated.
inline ExploitationReport run_exploitation_probe(const Env& env, const GaussianEnsemble& model,
                                                 const SacAgent& agent, int n_rollouts,
                                                 std::uint64_t seed) {
  if (n_rollouts < 2)
    throw std::invalid_argument("exploitation probe: need at least 2 rollouts for a correlation");
  ExploitationReport report;
  Rng null_rng(0);
  for (int i = 0; i < n_rollouts; ++i) {
    const std::uint64_t pair_seed = derive_seed(seed, "pair." + std::to_string(i));
    const EnvState start = env.reset(pair_seed);
    ExploitationPair pair;

    EnvState st = start;
    while (true) {
      const ActionSample act = sac_sample_action(agent, st.observation, null_rng, true);
      const StepResult res = env.step(st, act.action);
      pair.true_return += res.reward;
      st = res.state;
      if (res.done) break;
    }

    Rng model_rng(derive_seed(pair_seed, "model"));
    Vector s = start.observation;
    for (int t = 0; t < env.spec().horizon; ++t) {
      const ActionSample act = sac_sample_action(agent, s, null_rng, true);
      auto [s_next, reward] = ensemble_sample_step(model, s, act.action, model_rng);
      if (!s_next.allFinite() || !std::isfinite(reward)) break;
      pair.model_return += reward;
      s = std::move(s_next);
    }
    report.pairs.push_back(pair);
  }
  std::vector<double> model_returns, true_returns;
  for (const auto& p : report.pairs) {
    model_returns.push_back(p.model_return);
    true_returns.push_back(p.true_return);
    report.mean_gap += p.model_return - p.true_return;
  }
  report.mean_gap /= static_cast<double>(report.pairs.size());
  const PearsonResult pr = pearson(model_returns, true_returns);
  report.pearson_r = pr.r;
  report.pearson_defined = pr.defined;
  return report;
}

}  // namespace branchrl
