#pragma once

#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "branchrl/ensemble.hpp"
#include "branchrl/envs.hpp"
#include "branchrl/replay.hpp"
#include "branchrl/sac.hpp"
#include "branchrl/value_expansion.hpp"

namespace branchrl {

/// Thresholded-linear rollout-length schedule: k_start -> k_end over epochs
/// [epoch_start, epoch_end], constant outside, constant schedules encoded as
/// k_start == k_end.
struct RolloutSchedule {
  int k_start = 1;
  int k_end = 1;
  int epoch_start = 0;
  int epoch_end = 1;

  void validate() const {
    if (k_start > k_end)
      throw std::invalid_argument("RolloutSchedule: k_start must not exceed k_end");
    if (k_start != k_end && epoch_start >= epoch_end)
      throw std::invalid_argument("RolloutSchedule: need epoch_start < epoch_end");
  }
};

/// f(e) = min(max(x + (e-a)/(b-a) * (y-x), x), y), floored to an integer >= 1.
inline int schedule_value(const RolloutSchedule& sched, int epoch) {
  if (epoch < 0) throw std::invalid_argument("schedule_value: epoch < 0");
  sched.validate();
  if (sched.k_start == sched.k_end) return std::max(1, sched.k_start);
  double f = sched.k_start + static_cast<double>(epoch - sched.epoch_start) /
                                 (sched.epoch_end - sched.epoch_start) *
                                 (sched.k_end - sched.k_start);
  f = std::min(std::max(f, static_cast<double>(sched.k_start)),
               static_cast<double>(sched.k_end));
  return std::max(1, static_cast<int>(std::floor(f + 1e-9)));
}

struct LoopConfig {
  int n_epochs = 100;                      // N
  int env_steps_per_epoch = 1000;          // E
  int model_rollouts_per_env_step = 400;   // M
  int gradient_updates_per_env_step = 20;  // G
  int ensemble_size = 7;                   // B
  double real_data_fraction = 0.05;
  double discount = 0.99;
  int random_steps = 500;         // uniform-random warmup before epoch 0
  int eval_episodes = 5;
  std::size_t env_buffer_capacity = 200000;
  int model_retention_epochs = 2;  // model buffer holds this many epochs of rollouts

  void validate() const {
    if (n_epochs < 1 || env_steps_per_epoch < 1 || gradient_updates_per_env_step < 0 ||
        model_rollouts_per_env_step < 0 || ensemble_size < 1)
      throw std::invalid_argument("LoopConfig: counts must be positive");
    if (real_data_fraction < 0.0 || real_data_fraction > 1.0)
      throw std::invalid_argument("LoopConfig: real_data_fraction must lie in [0,1]");
    if (!(discount > 0.0 && discount < 1.0))
      throw std::invalid_argument("LoopConfig: discount must lie in (0,1)");
  }

  std::size_t model_buffer_capacity(int k_max) const {
    const long long per_epoch = static_cast<long long>(model_rollouts_per_env_step) *
                                env_steps_per_epoch * std::max(1, k_max);
    return static_cast<std::size_t>(
        std::max<long long>(1000, per_epoch * model_retention_epochs));
  }
};

/// Draws m start states uniformly from the environment buffer and rolls the
/// model k steps under the current policy from each, appending every
/// generated transition (branch_depth 1..k) to the model buffer. Rollouts
/// truncate early on non-finite predictions or the environment's termination
/// predicate. Returns the number of transitions appended.
inline long long branch_rollouts(const GaussianEnsemble& model, const SacAgent& agent,
                                 const Env& env, const ReplayBuffer& env_buffer,
                                 ReplayBuffer& model_buffer, int k, int m, Rng& rng) {
  if (env_buffer.empty()) throw std::runtime_error("branch_rollouts: empty environment buffer");
  if (k < 0) throw std::invalid_argument("branch_rollouts: k < 0");
  if (k == 0 || m <= 0) return 0;
  std::vector<std::size_t> starts(static_cast<std::size_t>(m));
  for (auto& idx : starts)
    idx = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(env_buffer.size())));
  const std::uint64_t base = rng.next_u64();
  long long appended = 0;
  for (int i = 0; i < m; ++i) {
    Rng rollout_rng(derive_seed(base, "rollout." + std::to_string(i)));
    Vector s = env_buffer[starts[static_cast<std::size_t>(i)]].s;
    for (int depth = 1; depth <= k; ++depth) {
      const ActionSample act = sac_sample_action(agent, s, rollout_rng);
      auto [s_next, reward] = ensemble_sample_step(model, s, act.action, rollout_rng);
      if (!s_next.allFinite() || !std::isfinite(reward)) break;
      Transition t;
      t.s = s;
      t.a = act.action;
      t.r = reward;
      t.s_next = s_next;
      t.done = false;
      t.branch_depth = depth;
      model_buffer.push(std::move(t));
      ++appended;
      if (env.terminal(s_next)) break;
      s = std::move(s_next);
    }
  }
  return appended;
}

struct EpochMetrics {
  int epoch = 0;
  long long env_steps = 0;  // cumulative real environment steps
  int k = 0;
  double eps_m_hat = 0.0;
  double model_holdout_nll = 0.0;
  double critic_loss = 0.0;
  double actor_loss = 0.0;
  double alpha = 0.0;
  double eval_return_mean = 0.0;
  double eval_return_std = 0.0;
  long long model_buffer_size = 0;
  double wall_seconds = 0.0;
  int expansion_h = 0;
  bool partial = false;
  std::string error;
};

/// The training outer loop: per epoch, refit the model on real data, then per
/// environment step take one real action, generate M branched model rollouts
/// of the scheduled length, and run G policy-update steps on minibatches
/// mixed from model and real data.
class MbpoLoop {
 public:
  MbpoLoop(const Env& env, GaussianEnsemble& model, SacAgent& agent, ReplayBuffer& env_buffer,
           ReplayBuffer& model_buffer, LoopConfig loop, RolloutSchedule schedule,
           ExpansionConfig expansion, std::uint64_t master_seed)
      : env_(env),
        model_(model),
        agent_(agent),
        env_buffer_(env_buffer),
        model_buffer_(model_buffer),
        loop_(loop),
        schedule_(schedule),
        expansion_(expansion),
        master_seed_(master_seed),
        act_rng_(derive_seed(master_seed, "env.actions")) {
    loop_.validate();
    schedule_.validate();
    expansion_.validate();
  }

  bool model_enabled() const {
    return loop_.model_rollouts_per_env_step > 0 || expansion_.enabled;
  }

  long long total_env_steps() const { return env_steps_; }
  long long clamped_actions() const { return clamped_actions_; }
  long long expansion_fallbacks() const { return expansion_fallbacks_; }

  /// Uniform-random warmup steps collected before the first epoch so the
  /// first model fit and the first minibatches have data.
  void warmup() {
    Rng rng(derive_seed(master_seed_, "warmup"));
    const auto& spec = env_.spec();
    for (int i = 0; i < loop_.random_steps; ++i) {
      Vector a(spec.action_dim);
      for (int d = 0; d < spec.action_dim; ++d)
        a(d) = rng.uniform(spec.action_low(d), spec.action_high(d));
      take_env_step(a);
    }
  }

  EpochMetrics run_epoch(int epoch) {
    EpochMetrics metrics;
    metrics.epoch = epoch;
    metrics.expansion_h = expansion_.enabled ? expansion_.horizon : 0;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      const int k = schedule_value(schedule_, epoch);
      metrics.k = k;

      if (model_enabled()) {
        const auto report = ensemble_fit(
            model_, env_buffer_.raw(), derive_seed(master_seed_, "model.fit." + std::to_string(epoch)));
        metrics.model_holdout_nll = report.mean_holdout_nll;
        metrics.eps_m_hat = estimate_eps_m(model_, report.holdout);
      }

      Rng update_rng(derive_seed(master_seed_, "updates." + std::to_string(epoch)));
      Rng rollout_rng(derive_seed(master_seed_, "rollouts." + std::to_string(epoch)));
      double critic_loss_sum = 0.0, actor_loss_sum = 0.0;
      long long updates = 0;
      for (int step = 0; step < loop_.env_steps_per_epoch; ++step) {
        const ActionSample act = sac_sample_action(agent_, current_obs(), act_rng_);
        take_env_step(act.action);

        if (model_enabled() && loop_.model_rollouts_per_env_step > 0)
          branch_rollouts(model_, agent_, env_, env_buffer_, model_buffer_, k,
                          loop_.model_rollouts_per_env_step, rollout_rng);

        for (int g = 0; g < loop_.gradient_updates_per_env_step; ++g) {
          const auto batch = mixed_batch(update_rng);
          SacUpdateReport critic_rep;
          if (expansion_.enabled) {
            std::vector<QTarget> targets;
            targets.reserve(batch.size() * static_cast<std::size_t>(expansion_.horizon + 1));
            for (const auto& t : batch) {
              auto expanded = expanded_target_set(model_, agent_, t, expansion_.horizon,
                                                  loop_.discount, update_rng);
              if (expanded.fell_back) ++expansion_fallbacks_;
              for (auto& qt : expanded.anchors) targets.push_back(std::move(qt));
            }
            critic_rep = sac_critic_update_targets(agent_, targets);
          } else {
            critic_rep = sac_critic_update(agent_, batch, loop_.discount, update_rng);
          }
          const auto actor_rep = sac_actor_update(agent_, batch, update_rng);
          sac_alpha_update(agent_, batch, update_rng);
          critic_loss_sum += critic_rep.critic_loss;
          actor_loss_sum += actor_rep.actor_loss;
          ++updates;
        }
      }
      metrics.critic_loss = updates ? critic_loss_sum / updates : 0.0;
      metrics.actor_loss = updates ? actor_loss_sum / updates : 0.0;
      metrics.alpha = agent_.alpha();
      const auto [eval_mean, eval_std] = evaluate();
      metrics.eval_return_mean = eval_mean;
      metrics.eval_return_std = eval_std;
    } catch (const std::exception& e) {
      metrics.partial = true;
      metrics.error = e.what();
    }
    metrics.env_steps = env_steps_;
    metrics.model_buffer_size = static_cast<long long>(model_buffer_.size());
    metrics.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return metrics;
  }

  /// Deterministic-policy evaluation episodes on fixed start states
  /// (population statistics across episodes).
  std::pair<double, double> evaluate() {
    std::vector<double> returns;
    Rng null_rng(0);
    for (int ep = 0; ep < loop_.eval_episodes; ++ep) {
      EnvState st = env_.reset(derive_seed(master_seed_, "eval." + std::to_string(ep)));
      double total = 0.0;
      while (true) {
        const ActionSample act = sac_sample_action(agent_, st.observation, null_rng, true);
        const StepResult res = env_.step(st, act.action);
        total += res.reward;
        st = res.state;
        if (res.done) break;
      }
      returns.push_back(total);
    }
    double mean = 0.0;
    for (double r : returns) mean += r;
    mean /= static_cast<double>(returns.size());
    double var = 0.0;
    for (double r : returns) var += (r - mean) * (r - mean);
    var /= static_cast<double>(returns.size());
    return {mean, std::sqrt(var)};
  }

 private:
  const Vector& current_obs() {
    if (need_reset_) {
      state_ = env_.reset(derive_seed(master_seed_, "env.reset." + std::to_string(episodes_)));
      ++episodes_;
      need_reset_ = false;
    }
    return state_.observation;
  }

  void take_env_step(const Vector& action) {
    current_obs();
    const StepResult res = env_.step(state_, action);
    if (res.action_clamped) ++clamped_actions_;
    Transition t;
    t.s = state_.observation;
    t.a = action;
    t.r = res.reward;
    t.s_next = res.state.observation;
    // built-in environments end episodes only at the time limit, which is a
    // truncation, not a termination: bootstrap through it
    t.done = false;
    t.branch_depth = 0;
    env_buffer_.push(std::move(t));
    ++env_steps_;
    state_ = res.state;
    if (res.done) need_reset_ = true;
  }

  std::vector<Transition> mixed_batch(Rng& rng) {
    const int batch = agent_.cfg.batch_size;
    int n_real = batch;
    if (model_enabled() && !model_buffer_.empty())
      n_real = static_cast<int>(std::lround(loop_.real_data_fraction * batch));
    const int n_model = batch - n_real;
    std::vector<Transition> out;
    out.reserve(static_cast<std::size_t>(batch));
    if (n_real > 0) {
      auto real = env_buffer_.sample(static_cast<std::size_t>(n_real), rng);
      for (auto& t : real) out.push_back(std::move(t));
    }
    if (n_model > 0) {
      auto modeled = model_buffer_.sample(static_cast<std::size_t>(n_model), rng);
      for (auto& t : modeled) out.push_back(std::move(t));
    }
    return out;
  }

  const Env& env_;
  GaussianEnsemble& model_;
  SacAgent& agent_;
  ReplayBuffer& env_buffer_;
  ReplayBuffer& model_buffer_;
  LoopConfig loop_;
  RolloutSchedule schedule_;
  ExpansionConfig expansion_;
  std::uint64_t master_seed_;
  Rng act_rng_;
  EnvState state_;
  bool need_reset_ = true;
  long long episodes_ = 0;
  long long env_steps_ = 0;
  long long clamped_actions_ = 0;
  long long expansion_fallbacks_ = 0;
};

}  // namespace branchrl
