#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "branchrl/envs.hpp"
#include "branchrl/nn.hpp"
#include "branchrl/replay.hpp"
#include "branchrl/rng.hpp"

namespace branchrl {

struct SacConfig {
  std::vector<int> actor_hidden = {64, 64};
  std::vector<int> critic_hidden = {64, 64};
  double learning_rate = 3e-4;
  double tau = 0.005;  // polyak coefficient for target critics
  double init_alpha = 0.2;
  bool auto_alpha = true;
  double target_entropy = std::numeric_limits<double>::quiet_NaN();  // default -dim(A)
  LogVarBounds log_std_bounds{-5.0, 2.0};
  int batch_size = 128;
  double squash_eps = 1e-6;  // guard inside log(1 - tanh^2 + eps)
};

/// Squashed-Gaussian actor with twin Q-critics, delayed target copies and a
/// log-space entropy temperature.
struct SacAgent {
  SacConfig cfg;
  int obs_dim = 0;
  int act_dim = 0;
  Vector action_scale, action_center;
  Mlp actor;
  Mlp critic1, critic2;
  Mlp target1, target2;
  double log_alpha = 0.0;
  MlpOptimizer actor_opt, critic1_opt, critic2_opt;
  ScalarAdam alpha_opt;

  double alpha() const { return std::exp(log_alpha); }
};

inline SacAgent make_sac_agent(const EnvSpec& spec, const SacConfig& cfg, std::uint64_t seed) {
  SacAgent agent;
  agent.cfg = cfg;
  if (std::isnan(agent.cfg.target_entropy))
    agent.cfg.target_entropy = -static_cast<double>(spec.action_dim);
  agent.obs_dim = spec.state_dim;
  agent.act_dim = spec.action_dim;
  agent.action_scale = 0.5 * (spec.action_high - spec.action_low);
  agent.action_center = 0.5 * (spec.action_high + spec.action_low);

  std::vector<int> actor_widths{spec.state_dim};
  actor_widths.insert(actor_widths.end(), cfg.actor_hidden.begin(), cfg.actor_hidden.end());
  actor_widths.push_back(2 * spec.action_dim);
  std::vector<int> critic_widths{spec.state_dim + spec.action_dim};
  critic_widths.insert(critic_widths.end(), cfg.critic_hidden.begin(), cfg.critic_hidden.end());
  critic_widths.push_back(1);

  Rng rng(derive_seed(seed, "sac.init"));
  agent.actor = make_mlp(actor_widths, Activation::Tanh, rng);
  agent.critic1 = make_mlp(critic_widths, Activation::Tanh, rng);
  agent.critic2 = make_mlp(critic_widths, Activation::Tanh, rng);
  agent.target1 = agent.critic1;
  agent.target2 = agent.critic2;
  agent.log_alpha = std::log(cfg.init_alpha);

  agent.actor_opt.cfg.learning_rate = cfg.learning_rate;
  agent.critic1_opt.cfg.learning_rate = cfg.learning_rate;
  agent.critic2_opt.cfg.learning_rate = cfg.learning_rate;
  agent.alpha_opt.cfg.learning_rate = cfg.learning_rate;
  agent.actor_opt.init(agent.actor);
  agent.critic1_opt.init(agent.critic1);
  agent.critic2_opt.init(agent.critic2);
  return agent;
}

struct ActionSample {
  Vector action;
  double log_prob = 0.0;
};

struct BatchedActions {
  Matrix mean, log_std, u, a_unit, a;  // n x act_dim
  Matrix z;                            // the noise actually used
  Vector log_prob;                     // n
  Matrix raw;                          // actor outputs pre-split
  MlpTrace trace;                      // actor trace for the backward pass
};

namespace detail {

/// Forward + squash for a batch of states. Noise comes from rng unless
/// deterministic, in which case z = 0 and the action is tanh(mean), scaled.
inline BatchedActions sample_actions_batch(const SacAgent& agent, const Matrix& obs, Rng& rng,
                                           bool deterministic = false) {
  BatchedActions out;
  out.raw = mlp_forward(agent.actor, obs, &out.trace);
  const int n = static_cast<int>(obs.rows());
  const int d = agent.act_dim;
  out.mean = out.raw.leftCols(d);
  out.log_std = out.raw.rightCols(d).unaryExpr(
      [&agent](double v) { return clamp_log_var(v, agent.cfg.log_std_bounds); });
  out.z = Matrix::Zero(n, d);
  if (!deterministic)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) out.z(i, j) = rng.normal();
  const Matrix sigma = out.log_std.array().exp().matrix();
  out.u = out.mean + sigma.cwiseProduct(out.z);
  out.a_unit = out.u.array().tanh().matrix();
  out.a = (out.a_unit.array().rowwise() * agent.action_scale.transpose().array()).matrix();
  out.a.rowwise() += agent.action_center.transpose();

  const double log_scale_sum = agent.action_scale.array().log().sum();
  out.log_prob = Vector(n);
  for (int i = 0; i < n; ++i) {
    double lp = 0.0;
    for (int j = 0; j < d; ++j) {
      lp += -0.5 * out.z(i, j) * out.z(i, j) - 0.5 * kLog2Pi - out.log_std(i, j);
      lp -= std::log(1.0 - out.a_unit(i, j) * out.a_unit(i, j) + agent.cfg.squash_eps);
    }
    out.log_prob(i) = lp - log_scale_sum;
  }
  return out;
}

inline Matrix stack_state_action(const Matrix& s, const Matrix& a) {
  Matrix sa(s.rows(), s.cols() + a.cols());
  sa << s, a;
  return sa;
}

}  // namespace detail

/// Draws a (squashed, box-scaled) action with its log-density. With the
/// deterministic flag the noise is zero and repeated calls coincide.
inline ActionSample sac_sample_action(const SacAgent& agent, const Vector& obs, Rng& rng,
                                      bool deterministic = false) {
  const auto batch = detail::sample_actions_batch(agent, obs.transpose(), rng, deterministic);
  ActionSample out;
  out.action = batch.a.row(0).transpose();
  out.log_prob = batch.log_prob(0);
  return out;
}

struct SacUpdateReport {
  double critic_loss = 0.0;
  double actor_loss = 0.0;
  double alpha_loss = 0.0;
  double mean_q = 0.0;
  double mean_entropy = 0.0;
};

/// Regression triple for the critics; the value-expansion path produces
/// several of these per real transition.
struct QTarget {
  Vector s;
  Vector a;
  double y = 0.0;
};

namespace detail {

/// Loss and parameter gradients of 0.5 * mean_i (Q(s_i, a_i) - y_i)^2.
inline double critic_loss_grads(const Mlp& critic, const Matrix& sa, const Vector& y,
                                MlpGrads& grads, double* mean_q = nullptr) {
  MlpTrace trace;
  const Matrix q = mlp_forward(critic, sa, &trace);
  const int bad = first_nonfinite_layer(trace);
  if (bad >= 0) throw NonFiniteError(bad);
  const double n = static_cast<double>(sa.rows());
  const Vector resid = q.col(0) - y;
  if (mean_q) *mean_q = q.col(0).mean();
  mlp_backward(critic, trace, resid / n, grads);
  return 0.5 * resid.squaredNorm() / n;
}

/// Loss and actor-parameter gradients of
///   mean_i [ alpha * log pi(a_i|s_i) - min(Q1, Q2)(s_i, a_i) ]
/// with reparameterized actions a_i built from the fixed noise z. Critic
/// parameters are read-only; gradients flow through the action input.
inline double actor_loss_grads(const SacAgent& agent, const Matrix& obs, const Matrix& z,
                               MlpGrads& actor_grads, double* mean_q = nullptr,
                               double* mean_entropy = nullptr) {
  const int n = static_cast<int>(obs.rows());
  const int d = agent.act_dim;
  const double alpha = agent.alpha();

  BatchedActions acts;
  acts.raw = mlp_forward(agent.actor, obs, &acts.trace);
  const int bad = first_nonfinite_layer(acts.trace);
  if (bad >= 0) throw NonFiniteError(bad);
  acts.mean = acts.raw.leftCols(d);
  acts.log_std = acts.raw.rightCols(d).unaryExpr(
      [&agent](double v) { return clamp_log_var(v, agent.cfg.log_std_bounds); });
  const Matrix sigma = acts.log_std.array().exp().matrix();
  acts.u = acts.mean + sigma.cwiseProduct(z);
  acts.a_unit = acts.u.array().tanh().matrix();
  acts.a = (acts.a_unit.array().rowwise() * agent.action_scale.transpose().array()).matrix();
  acts.a.rowwise() += agent.action_center.transpose();

  const Matrix sa = stack_state_action(obs, acts.a);
  MlpTrace t1, t2;
  const Vector q1 = mlp_forward(agent.critic1, sa, &t1).col(0);
  const Vector q2 = mlp_forward(agent.critic2, sa, &t2).col(0);
  const Vector qmin = q1.cwiseMin(q2);

  const double log_scale_sum = agent.action_scale.array().log().sum();
  Vector log_prob(n);
  for (int i = 0; i < n; ++i) {
    double lp = 0.0;
    for (int j = 0; j < d; ++j) {
      lp += -0.5 * z(i, j) * z(i, j) - 0.5 * kLog2Pi - acts.log_std(i, j);
      lp -= std::log(1.0 - acts.a_unit(i, j) * acts.a_unit(i, j) + agent.cfg.squash_eps);
    }
    log_prob(i) = lp - log_scale_sum;
  }
  const double loss = (alpha * log_prob - qmin).mean();
  if (mean_q) *mean_q = qmin.mean();
  if (mean_entropy) *mean_entropy = -log_prob.mean();

  // dL/da through the selected critic's action input
  Matrix d_q1 = Matrix::Zero(n, 1), d_q2 = Matrix::Zero(n, 1);
  for (int i = 0; i < n; ++i)
    (q1(i) <= q2(i) ? d_q1(i, 0) : d_q2(i, 0)) = -1.0 / n;
  MlpGrads scratch1 = MlpGrads::zeros_like(agent.critic1);
  MlpGrads scratch2 = MlpGrads::zeros_like(agent.critic2);
  const Matrix d_sa1 = mlp_backward(agent.critic1, t1, d_q1, scratch1);
  const Matrix d_sa2 = mlp_backward(agent.critic2, t2, d_q2, scratch2);
  const Matrix d_a = d_sa1.rightCols(d) + d_sa2.rightCols(d);

  // chain into the pre-squash variable u and the head outputs
  Matrix d_u(n, d), d_mean(n, d), d_log_std(n, d);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) {
      const double au = acts.a_unit(i, j);
      const double one_m_sq = 1.0 - au * au;
      const double dlogpi_du = 2.0 * au * one_m_sq / (one_m_sq + agent.cfg.squash_eps);
      const double du = d_a(i, j) * agent.action_scale(j) * one_m_sq +
                        (alpha / n) * dlogpi_du;
      d_u(i, j) = du;
      d_mean(i, j) = du;
      d_log_std(i, j) = du * sigma(i, j) * z(i, j) - alpha / n;
    }
  }
  Matrix d_raw(n, 2 * d);
  d_raw.leftCols(d) = d_mean;
  d_raw.rightCols(d) =
      d_log_std.array() * acts.raw.rightCols(d)
                              .unaryExpr([&agent](double v) {
                                return clamp_log_var_grad(v, agent.cfg.log_std_bounds);
                              })
                              .array();
  mlp_backward(agent.actor, acts.trace, d_raw, actor_grads);
  return loss;
}

inline void polyak_update(Mlp& target, const Mlp& online, double tau) {
  for (std::size_t l = 0; l < target.w.size(); ++l) {
    target.w[l] = (1.0 - tau) * target.w[l] + tau * online.w[l];
    target.b[l] = (1.0 - tau) * target.b[l] + tau * online.b[l];
  }
}

}  // namespace detail

/// Regresses both critics toward explicit targets, then polyak-updates the
/// target networks. The standard one-step SAC target and the expanded
/// multi-step targets both route through here.
inline SacUpdateReport sac_critic_update_targets(SacAgent& agent,
                                                 const std::vector<QTarget>& targets) {
  if (targets.empty()) throw std::invalid_argument("critic update: empty target set");
  const int n = static_cast<int>(targets.size());
  Matrix s(n, agent.obs_dim), a(n, agent.act_dim);
  Vector y(n);
  for (int i = 0; i < n; ++i) {
    s.row(i) = targets[static_cast<std::size_t>(i)].s.transpose();
    a.row(i) = targets[static_cast<std::size_t>(i)].a.transpose();
    y(i) = targets[static_cast<std::size_t>(i)].y;
  }
  if (!y.allFinite()) throw std::runtime_error("critic update: non-finite target");
  const Matrix sa = detail::stack_state_action(s, a);
  MlpGrads g1 = MlpGrads::zeros_like(agent.critic1);
  MlpGrads g2 = MlpGrads::zeros_like(agent.critic2);
  double mean_q = 0.0;
  SacUpdateReport rep;
  rep.critic_loss = 0.5 * (detail::critic_loss_grads(agent.critic1, sa, y, g1, &mean_q) +
                           detail::critic_loss_grads(agent.critic2, sa, y, g2));
  rep.mean_q = mean_q;
  agent.critic1_opt.step(agent.critic1, g1);
  agent.critic2_opt.step(agent.critic2, g2);
  detail::polyak_update(agent.target1, agent.critic1, agent.cfg.tau);
  detail::polyak_update(agent.target2, agent.critic2, agent.cfg.tau);
  return rep;
}

/// One-step soft Bellman targets from a transition batch:
///   y = r + gamma (1 - done) [ min(target Q)(s', a') - alpha log pi(a'|s') ].
inline std::vector<QTarget> sac_standard_targets(const SacAgent& agent,
                                                 const std::vector<Transition>& batch,
                                                 double gamma, Rng& rng) {
  const int n = static_cast<int>(batch.size());
  Matrix s_next(n, agent.obs_dim);
  for (int i = 0; i < n; ++i) s_next.row(i) = batch[static_cast<std::size_t>(i)].s_next.transpose();
  const auto next_acts = detail::sample_actions_batch(agent, s_next, rng);
  const Matrix sa = detail::stack_state_action(s_next, next_acts.a);
  const Vector q1 = mlp_forward(agent.target1, sa).col(0);
  const Vector q2 = mlp_forward(agent.target2, sa).col(0);
  const double alpha = agent.alpha();
  std::vector<QTarget> targets(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const auto& t = batch[static_cast<std::size_t>(i)];
    const double soft_next = std::min(q1(i), q2(i)) - alpha * next_acts.log_prob(i);
    targets[static_cast<std::size_t>(i)] = {
        t.s, t.a, t.r + gamma * (t.done ? 0.0 : 1.0) * soft_next};
  }
  return targets;
}

inline SacUpdateReport sac_critic_update(SacAgent& agent, const std::vector<Transition>& batch,
                                         double gamma, Rng& rng) {
  if (batch.empty()) throw std::invalid_argument("critic update: empty batch");
  return sac_critic_update_targets(agent, sac_standard_targets(agent, batch, gamma, rng));
}

inline SacUpdateReport sac_actor_update(SacAgent& agent, const std::vector<Transition>& batch,
                                        Rng& rng) {
  if (batch.empty()) throw std::invalid_argument("actor update: empty batch");
  const int n = static_cast<int>(batch.size());
  Matrix obs(n, agent.obs_dim), z(n, agent.act_dim);
  for (int i = 0; i < n; ++i) obs.row(i) = batch[static_cast<std::size_t>(i)].s.transpose();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < agent.act_dim; ++j) z(i, j) = rng.normal();
  MlpGrads grads = MlpGrads::zeros_like(agent.actor);
  SacUpdateReport rep;
  rep.actor_loss =
      detail::actor_loss_grads(agent, obs, z, grads, &rep.mean_q, &rep.mean_entropy);
  if (!std::isfinite(rep.actor_loss)) throw std::runtime_error("actor update: non-finite loss");
  agent.actor_opt.step(agent.actor, grads);
  return rep;
}

/// Temperature adaptation: descend  -log_alpha * (E[log pi] + target_entropy)
/// so alpha rises when entropy is below target and falls when above.
inline SacUpdateReport sac_alpha_update(SacAgent& agent, const std::vector<Transition>& batch,
                                        Rng& rng) {
  if (batch.empty()) throw std::invalid_argument("alpha update: empty batch");
  const int n = static_cast<int>(batch.size());
  Matrix obs(n, agent.obs_dim);
  for (int i = 0; i < n; ++i) obs.row(i) = batch[static_cast<std::size_t>(i)].s.transpose();
  const auto acts = detail::sample_actions_batch(agent, obs, rng);
  const double mean_log_pi = acts.log_prob.mean();
  SacUpdateReport rep;
  rep.mean_entropy = -mean_log_pi;
  rep.alpha_loss = -agent.log_alpha * (mean_log_pi + agent.cfg.target_entropy);
  if (agent.cfg.auto_alpha) {
    const double grad = -agent.alpha() * (mean_log_pi + agent.cfg.target_entropy);
    agent.alpha_opt.step(agent.log_alpha, grad);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Checkpoint: section table over the network checkpoint format.
// ---------------------------------------------------------------------------

constexpr std::uint32_t kSacMagic = 0x41535242;  // "BRSA"

enum class SacSection : std::uint32_t {
  Actor = 1,
  Critic1 = 2,
  Critic2 = 3,
  Target1 = 4,
  Target2 = 5,
  LogAlpha = 6,
};

inline void save_sac_agent(std::ostream& out, const SacAgent& agent) {
  detail::write_pod(out, kSacMagic);
  detail::write_pod(out, kMlpVersion);
  detail::write_pod(out, static_cast<std::uint32_t>(6));  // section count
  auto section = [&out](SacSection tag) {
    detail::write_pod(out, static_cast<std::uint32_t>(tag));
  };
  section(SacSection::Actor);
  save_mlp(out, agent.actor);
  section(SacSection::Critic1);
  save_mlp(out, agent.critic1);
  section(SacSection::Critic2);
  save_mlp(out, agent.critic2);
  section(SacSection::Target1);
  save_mlp(out, agent.target1);
  section(SacSection::Target2);
  save_mlp(out, agent.target2);
  section(SacSection::LogAlpha);
  detail::write_pod(out, agent.log_alpha);
}

/// Restores networks and temperature into an agent built from the same
/// spec/config (optimizer moments restart cold).
inline void load_sac_agent(std::istream& in, SacAgent& agent) {
  if (detail::read_pod<std::uint32_t>(in) != kSacMagic)
    throw std::runtime_error("sac checkpoint: bad magic");
  if (detail::read_pod<std::uint32_t>(in) != kMlpVersion)
    throw std::runtime_error("sac checkpoint: unsupported version");
  const auto sections = detail::read_pod<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < sections; ++i) {
    const auto tag = static_cast<SacSection>(detail::read_pod<std::uint32_t>(in));
    switch (tag) {
      case SacSection::Actor: agent.actor = load_mlp(in); break;
      case SacSection::Critic1: agent.critic1 = load_mlp(in); break;
      case SacSection::Critic2: agent.critic2 = load_mlp(in); break;
      case SacSection::Target1: agent.target1 = load_mlp(in); break;
      case SacSection::Target2: agent.target2 = load_mlp(in); break;
      case SacSection::LogAlpha: agent.log_alpha = detail::read_pod<double>(in); break;
      default: throw std::runtime_error("sac checkpoint: unknown section");
    }
  }
  agent.actor_opt.init(agent.actor);
  agent.critic1_opt.init(agent.critic1);
  agent.critic2_opt.init(agent.critic2);
}

inline std::uint64_t sac_param_hash(const SacAgent& agent) {
  std::uint64_t h = mlp_param_hash(agent.actor);
  for (const Mlp* net : {&agent.critic1, &agent.critic2, &agent.target1, &agent.target2}) {
    const std::uint64_t mh = mlp_param_hash(*net);
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(&mh), sizeof(mh)), h);
  }
  h = fnv1a64(std::string_view(reinterpret_cast<const char*>(&agent.log_alpha), sizeof(double)),
              h);
  return h;
}

}  // namespace branchrl
