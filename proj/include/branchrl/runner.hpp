#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "branchrl/config.hpp"
#include "branchrl/csv.hpp"
#include "branchrl/manifest.hpp"
#include "branchrl/mbpo.hpp"

namespace branchrl {

inline std::vector<std::string> metrics_columns(bool with_expansion) {
  std::vector<std::string> cols{"epoch",        "env_steps",       "k",
                                "eps_m_hat",    "model_holdout_nll", "critic_loss",
                                "actor_loss",   "alpha",           "eval_return_mean",
                                "eval_return_std", "model_buffer_size", "wall_seconds"};
  if (with_expansion) cols.push_back("expansion_H");
  return cols;
}

inline std::vector<std::string> metrics_row_cells(const EpochMetrics& m, bool deterministic_timing,
                                                  bool with_expansion) {
  std::vector<std::string> cells{
      std::to_string(m.epoch),
      std::to_string(m.env_steps),
      std::to_string(m.k),
      format_double(m.eps_m_hat),
      format_double(m.model_holdout_nll),
      format_double(m.critic_loss),
      format_double(m.actor_loss),
      format_double(m.alpha),
      format_double(m.eval_return_mean),
      format_double(m.eval_return_std),
      std::to_string(m.model_buffer_size),
      format_double(deterministic_timing ? 0.0 : m.wall_seconds)};
  if (with_expansion) cells.push_back(std::to_string(m.expansion_h));
  return cells;
}

struct RunOutcome {
  std::filesystem::path run_dir;
  std::vector<EpochMetrics> rows;
  bool failed = false;
  std::string error;
  double wall_seconds = 0.0;
  long long env_steps = 0;
};

/// End-to-end training run: builds every component from the configuration,
/// executes the epoch loop, and leaves config snapshot + metrics CSV +
/// checkpoints + manifest in the run directory. A failing epoch stops the
/// run with a partial metrics row and a failure record in the manifest.
inline RunOutcome run_training(const ExperimentConfig& cfg, const std::filesystem::path& run_dir,
                               std::ostream* log = nullptr) {
  const auto wall0 = std::chrono::steady_clock::now();
  RunOutcome outcome;
  outcome.run_dir = run_dir;
  std::filesystem::create_directories(run_dir);

  const std::string snapshot = serialize_config(cfg);
  {
    std::ofstream out(run_dir / "config.cfg", std::ios::binary);
    out << snapshot;
  }
  RunManifest manifest;
  manifest.config_hash = hex64(fnv1a64(snapshot));
  manifest.started_at = timestamp_utc_now();
  manifest.notes["branch_point_weighting"] =
      "geometric gamma^t, normalized, truncated at the evaluation horizon";

  const bool with_expansion = cfg.expansion.enabled;
  try {
    const auto env = make_env(cfg.env_name, cfg.env_params);
    SacAgent agent = make_sac_agent(env->spec(), cfg.sac, derive_seed(cfg.seed, "agent"));
    EnsembleConfig model_cfg = cfg.model;
    model_cfg.members = cfg.loop.ensemble_size;
    GaussianEnsemble model = make_ensemble(env->spec().state_dim, env->spec().action_dim,
                                           model_cfg, derive_seed(cfg.seed, "model"));
    ReplayBuffer env_buffer(cfg.loop.env_buffer_capacity);
    ReplayBuffer model_buffer(cfg.loop.model_buffer_capacity(cfg.schedule.k_end));
    MbpoLoop loop(*env, model, agent, env_buffer, model_buffer, cfg.loop, cfg.schedule,
                  cfg.expansion, cfg.seed);

    CsvWriter metrics(run_dir / "metrics.csv", metrics_columns(with_expansion));
    loop.warmup();
    for (int epoch = 0; epoch < cfg.loop.n_epochs; ++epoch) {
      EpochMetrics row = loop.run_epoch(epoch);
      outcome.rows.push_back(row);
      metrics.write_row(metrics_row_cells(row, cfg.deterministic_timing, with_expansion));
      metrics.flush();
      if (log)
        (*log) << "epoch " << row.epoch << " steps " << row.env_steps << " k " << row.k
               << " eval " << format_double(row.eval_return_mean) << " +- "
               << format_double(row.eval_return_std) << "\n";
      if (row.partial) {
        outcome.failed = true;
        outcome.error = row.error;
        break;
      }
    }
    outcome.env_steps = loop.total_env_steps();
    manifest.notes["clamped_actions"] = std::to_string(loop.clamped_actions());
    if (with_expansion)
      manifest.notes["expansion_fallbacks"] = std::to_string(loop.expansion_fallbacks());

    {
      std::ofstream out(run_dir / "agent.bin", std::ios::binary);
      save_sac_agent(out, agent);
    }
    if (loop.model_enabled() && model.trained) {
      std::ofstream out(run_dir / "ensemble.bin", std::ios::binary);
      save_ensemble(out, model);
    }
  } catch (const std::exception& e) {
    outcome.failed = true;
    outcome.error = e.what();
  }

  outcome.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
  manifest.finished_at = timestamp_utc_now();
  manifest.status = outcome.failed ? "failed" : "ok";
  manifest.error = outcome.error;
  if (!cfg.deterministic_timing)
    manifest.notes["wall_seconds"] = format_double(outcome.wall_seconds);
  manifest.checksum_outputs(run_dir, {"metrics.csv", "config.cfg", "agent.bin", "ensemble.bin"});
  write_manifest_atomic(run_dir, manifest);
  return outcome;
}

}  // namespace branchrl
