#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "branchrl/bounds.hpp"
#include "branchrl/csv.hpp"
#include "branchrl/tabular.hpp"

namespace branchrl {

struct VerificationRow {
  long long trial_id = 0;
  double lhs = 0.0;
  double rhs = 0.0;
  double slack = 0.0;  // rhs - lhs for "lhs <= rhs" checks; negative means violated
  bool violated = false;
};

struct VerificationReport {
  std::string name;
  std::string note;  // methodology flags carried into the report header
  double tolerance = 1e-9;
  std::vector<VerificationRow> rows;

  long long violations() const {
    long long n = 0;
    for (const auto& r : rows) n += r.violated ? 1 : 0;
    return n;
  }

  double min_slack() const {
    double m = std::numeric_limits<double>::infinity();
    for (const auto& r : rows) m = std::min(m, r.slack);
    return m;
  }

  void write_csv(const std::filesystem::path& path) const {
    std::vector<std::string> comments;
    comments.push_back("suite: " + name);
    if (!note.empty()) comments.push_back(note);
    CsvWriter w(path, {"trial_id", "quantity_lhs", "quantity_rhs", "slack", "violated"},
                comments);
    for (const auto& r : rows)
      w.write_row({std::to_string(r.trial_id), format_double(r.lhs), format_double(r.rhs),
                   format_double(r.slack), r.violated ? "1" : "0"});
  }
};

namespace detail {

inline void push_check(VerificationReport& rep, long long trial_id, double lhs, double rhs) {
  VerificationRow row;
  row.trial_id = trial_id;
  row.lhs = lhs;
  row.rhs = rhs;
  row.slack = rhs - lhs;
  row.violated = row.slack < -rep.tolerance;
  rep.rows.push_back(row);
}

constexpr const char* kBranchWeightNote =
    "branch_point_weighting: geometric gamma^t, normalized, truncated at the "
    "evaluation horizon (chosen; proportionality constant is not pinned down "
    "by the bound statements)";

}  // namespace detail

/// Joint-distribution TV decomposition: for joints p_i(x, y) = p_i(x) p_i(y|x),
///   TV(joint) <= TV(marginal) + max_x TV(conditional)
/// and the tighter  TV(joint) <= TV(marginal) + E_{x~p1} TV(conditional).
inline VerificationReport verify_lemma_joint_tvd(long long trials, std::uint64_t seed,
                                                 int support = 4) {
  VerificationReport rep;
  rep.name = "lemma_joint_tvd";
  Rng rng(seed);
  for (long long trial = 0; trial < trials; ++trial) {
    Matrix cond1(support, support), cond2(support, support);
    Vector marg1(support), marg2(support);
    const auto m1 = rng.dirichlet_flat(support);
    const auto m2 = rng.dirichlet_flat(support);
    for (int x = 0; x < support; ++x) {
      marg1(x) = m1[static_cast<std::size_t>(x)];
      marg2(x) = m2[static_cast<std::size_t>(x)];
      const auto c1 = rng.dirichlet_flat(support);
      const auto c2 = rng.dirichlet_flat(support);
      for (int y = 0; y < support; ++y) {
        cond1(x, y) = c1[static_cast<std::size_t>(y)];
        cond2(x, y) = c2[static_cast<std::size_t>(y)];
      }
    }
    double tv_joint = 0.0;
    for (int x = 0; x < support; ++x)
      for (int y = 0; y < support; ++y)
        tv_joint += std::abs(marg1(x) * cond1(x, y) - marg2(x) * cond2(x, y));
    tv_joint *= 0.5;
    const double tv_marg = tv_distance(marg1, marg2);
    double tv_cond_max = 0.0, tv_cond_exp = 0.0;
    for (int x = 0; x < support; ++x) {
      const double tv_x = 0.5 * (cond1.row(x) - cond2.row(x)).cwiseAbs().sum();
      tv_cond_max = std::max(tv_cond_max, tv_x);
      tv_cond_exp += marg1(x) * tv_x;
    }
    detail::push_check(rep, 2 * trial, tv_joint, tv_marg + tv_cond_max);
    detail::push_check(rep, 2 * trial + 1, tv_joint, tv_marg + tv_cond_exp);
  }
  return rep;
}

/// Time-varying Markov chain marginal bound: with shared initial distribution
/// and delta = max_t E_{s~p1^t} TV(p1(.|s), p2(.|s)),
///   TV(p1^t, p2^t) <= t * delta   for all t <= horizon.
inline VerificationReport verify_lemma_marginal_tvd(long long trials, std::uint64_t seed,
                                                    int horizon = 30) {
  VerificationReport rep;
  rep.name = "lemma_marginal_tvd";
  Rng rng(seed);
  for (long long trial = 0; trial < trials; ++trial) {
    const int s = 2 + rng.uniform_int(5);
    const double lambda = rng.uniform(0.0, 0.5);
    Matrix p1(s, s), p2(s, s);
    for (int i = 0; i < s; ++i) {
      const auto row = rng.dirichlet_flat(s);
      const auto mix = rng.dirichlet_flat(s);
      for (int j = 0; j < s; ++j) {
        p1(i, j) = row[static_cast<std::size_t>(j)];
        p2(i, j) = (1.0 - lambda) * p1(i, j) + lambda * mix[static_cast<std::size_t>(j)];
      }
    }
    const auto init = rng.dirichlet_flat(s);
    Vector mu1(s), mu2(s);
    for (int i = 0; i < s; ++i) mu1(i) = mu2(i) = init[static_cast<std::size_t>(i)];

    Vector per_state(s);
    for (int i = 0; i < s; ++i)
      per_state(i) = 0.5 * (p1.row(i) - p2.row(i)).cwiseAbs().sum();

    // delta = max_t E_{s ~ p1^t} [per-step TV], over the checked window
    double delta = 0.0;
    {
      Vector mu = mu1;
      for (int t = 0; t <= horizon; ++t) {
        delta = std::max(delta, mu.dot(per_state));
        mu = p1.transpose() * mu;
      }
    }
    double worst_slack = std::numeric_limits<double>::infinity();
    double worst_lhs = 0.0, worst_rhs = 0.0;
    for (int t = 0; t <= horizon; ++t) {
      const double lhs = tv_distance(mu1, mu2);
      const double rhs = static_cast<double>(t) * delta;
      if (rhs - lhs < worst_slack) {
        worst_slack = rhs - lhs;
        worst_lhs = lhs;
        worst_rhs = rhs;
      }
      mu1 = p1.transpose() * mu1;
      mu2 = p2.transpose() * mu2;
    }
    detail::push_check(rep, trial, worst_lhs, worst_rhs);
  }
  return rep;
}

/// Plain returns gap: |eta_1 - eta_2| <= 2 r_max [ gamma (eps_pi + eps_m) /
/// (1-gamma)^2 + eps_pi / (1-gamma) ] with eps_m from model_epsilon_m and
/// eps_pi from policy_divergences.
inline VerificationReport verify_lemma_returns_gap(long long trials, std::uint64_t seed,
                                                   TabularInstanceParams params = {}) {
  VerificationReport rep;
  rep.name = "lemma_returns_gap";
  Rng rng(seed);
  for (long long trial = 0; trial < trials; ++trial) {
    const TabularInstance inst = sample_instance(params, rng);
    const double gamma = inst.truth.gamma;
    const int h = horizon_for_tail(gamma, params.r_max, 1e-10);
    const double eps_m = model_epsilon_m(inst.truth, inst.model, inst.data_policy, h);
    const double eps_pi =
        policy_divergences(inst.current_policy, inst.data_policy).eps_pi_max;
    const double eta1 = exact_returns(inst.truth, inst.data_policy);
    const double eta2 = exact_returns(inst.model, inst.current_policy);
    const double om = 1.0 - gamma;
    const double rhs =
        2.0 * params.r_max * (gamma * (eps_pi + eps_m) / (om * om) + eps_pi / om);
    detail::push_check(rep, trial, std::abs(eta1 - eta2), rhs);
  }
  return rep;
}

/// Branched returns gap (four-epsilon form) against branched_returns:
/// two branched processes share rho0, reward and k but differ in pre and post
/// policy/dynamics; the gap must not exceed
///   2 r_max [ gamma^{k+1}/(1-gamma)^2 (eps_m_pre + eps_pi_pre)
///           + k/(1-gamma) (eps_m_post + eps_pi_post)
///           + gamma^k/(1-gamma) eps_pi_pre + 1/(1-gamma) eps_pi_post ].
inline VerificationReport verify_lemma_branched_gap(long long trials, std::uint64_t seed,
                                                    TabularInstanceParams params = {}) {
  VerificationReport rep;
  rep.name = "lemma_branched_gap";
  rep.note = detail::kBranchWeightNote;
  Rng rng(seed);
  for (long long trial = 0; trial < trials; ++trial) {
    const TabularInstance inst = sample_instance(params, rng);
    const double gamma = inst.truth.gamma;
    const int k = rng.uniform_int(6);
    const int h = horizon_for_tail(gamma, params.r_max, 1e-10);

    // process 1: pre (pi_D, truth), post (pi, truth)
    // process 2: pre (pi', truth), post (pi, model)  with pi' near pi_D
    const TabularPolicy pre2 = mix_policies(
        inst.data_policy,
        sample_random_policy(inst.truth.num_states, inst.truth.num_actions, rng),
        rng.uniform(0.0, 0.5));
    const double eta1 = branched_returns(inst.truth, inst.data_policy, inst.truth,
                                         inst.current_policy, k, h);
    const double eta2 =
        branched_returns(inst.truth, pre2, inst.model, inst.current_policy, k, h);

    const double eps_pi_pre = policy_divergences(inst.data_policy, pre2).eps_pi_max;
    const double eps_m_pre = 0.0;  // both pre segments run the true kernel
    const double eps_pi_post = 0.0;
    // post marginals are not anchored at rho0, so use the worst-state version
    const double eps_m_post = kernel_tv_max_state(inst.truth, inst.model, inst.current_policy);

    const double om = 1.0 - gamma;
    const double gk = std::pow(gamma, k);
    const double rhs = 2.0 * params.r_max *
                       (gk * gamma / (om * om) * (eps_m_pre + eps_pi_pre) +
                        static_cast<double>(k) / om * (eps_m_post + eps_pi_post) +
                        gk / om * eps_pi_pre + eps_pi_post / om);
    detail::push_check(rep, trial, std::abs(eta1 - eta2), rhs);
  }
  return rep;
}

/// Soundness of the full-rollout penalty on random tabular instances:
///   eta[pi] >= eta_hat[pi] - C(eps_m, eps_pi), all quantities exact/measured.
inline VerificationReport verify_monotonic_soundness(long long trials, std::uint64_t seed,
                                                     TabularInstanceParams params = {}) {
  VerificationReport rep;
  rep.name = "bound_soundness_monotonic";
  Rng rng(seed);
  for (long long trial = 0; trial < trials; ++trial) {
    const TabularInstance inst = sample_instance(params, rng);
    const int h = horizon_for_tail(inst.truth.gamma, params.r_max, 1e-10);
    BoundParams bp;
    bp.gamma = inst.truth.gamma;
    bp.r_max = params.r_max;
    bp.eps_m = model_epsilon_m(inst.truth, inst.model, inst.data_policy, h);
    bp.eps_pi = policy_divergences(inst.current_policy, inst.data_policy).eps_pi_max;
    const double eta_true = exact_returns(inst.truth, inst.current_policy);
    const double eta_model = exact_returns(inst.model, inst.current_policy);
    // check eta_model - C <= eta_true
    detail::push_check(rep, trial, eta_model - penalty_monotonic(bp), eta_true);
  }
  return rep;
}

/// Soundness of both branched penalties against exact branched returns:
///   eta[pi] >= eta_branch - penalty_branched          (eps_m under pi_D)
///   eta[pi] >= eta_branch - penalty_branched_current  (eps_m' under pi)
/// Rows come in pairs per (trial, k); trial_id = trial * 2*|ks| + 2*ki (+1).
inline VerificationReport verify_branched_soundness(long long trials, std::uint64_t seed,
                                                    const std::vector<int>& ks = {0, 1, 2, 5},
                                                    TabularInstanceParams params = {}) {
  VerificationReport rep;
  rep.name = "bound_soundness_branched";
  rep.note = detail::kBranchWeightNote;
  Rng rng(seed);
  for (long long trial = 0; trial < trials; ++trial) {
    const TabularInstance inst = sample_instance(params, rng);
    const int h = horizon_for_tail(inst.truth.gamma, params.r_max, 1e-10);
    BoundParams bp;
    bp.gamma = inst.truth.gamma;
    bp.r_max = params.r_max;
    bp.eps_m = model_epsilon_m(inst.truth, inst.model, inst.data_policy, h);
    bp.eps_m_prime = model_epsilon_m(inst.truth, inst.model, inst.current_policy, h);
    bp.eps_pi = policy_divergences(inst.current_policy, inst.data_policy).eps_pi_max;
    const double eta_true = exact_returns(inst.truth, inst.current_policy);
    for (std::size_t ki = 0; ki < ks.size(); ++ki) {
      bp.k = ks[ki];
      const double eta_branch = branched_returns(inst.truth, inst.data_policy, inst.model,
                                                 inst.current_policy, bp.k, h);
      const long long base = trial * 2 * static_cast<long long>(ks.size()) +
                             2 * static_cast<long long>(ki);
      detail::push_check(rep, base, eta_branch - penalty_branched(bp), eta_true);
      detail::push_check(rep, base + 1, eta_branch - penalty_branched_current(bp), eta_true);
    }
  }
  return rep;
}

}  // namespace branchrl
