#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>

#include "branchrl/nn.hpp"
#include "branchrl/rng.hpp"

namespace branchrl {

struct EnvSpec {
  std::string name;
  int state_dim = 0;
  int action_dim = 0;
  Vector action_low, action_high;
  int horizon = 200;
  double r_max = 1.0;  // bound on |reward|, feeds the penalty formulas
};

struct EnvState {
  Vector observation;
  int step_index = 0;
  Rng rng;  // only consumed by stochastic dynamics; copied by value
};

struct StepResult {
  EnvState state;
  double reward = 0.0;
  bool done = false;
  bool action_clamped = false;
};

/// Fixed-horizon continuous-control environment. step() is a pure function
/// of (state, action): replaying a recorded trajectory reproduces rewards
/// bitwise. done fires only at the horizon (time-limit truncation, never a
/// real termination).
class Env {
 public:
  virtual ~Env() = default;
  virtual const EnvSpec& spec() const = 0;
  virtual EnvState reset(std::uint64_t seed) const = 0;
  virtual StepResult step(const EnvState& state, const Vector& action) const = 0;
  /// Termination predicate applied to (possibly model-predicted) states.
  virtual bool terminal(const Vector& /*observation*/) const { return false; }
};

/// Wraps an angle to (-pi, pi], stable for arbitrarily large magnitudes.
inline double wrap_angle(double theta) {
  double w = std::remainder(theta, 2.0 * M_PI);
  if (w <= -M_PI) w += 2.0 * M_PI;
  return w;
}

namespace detail {

inline Vector clamp_action(const Vector& action, const EnvSpec& spec, bool* clamped) {
  if (action.size() != spec.action_dim)
    throw std::invalid_argument(spec.name + ": action dimension mismatch");
  if (!action.allFinite()) throw std::invalid_argument(spec.name + ": non-finite action");
  Vector a = action.cwiseMax(spec.action_low).cwiseMin(spec.action_high);
  *clamped = (a - action).cwiseAbs().maxCoeff() > 0.0;
  return a;
}

}  // namespace detail

/// Torque-limited pendulum swing-up. The angle is measured from upright;
/// observation is (cos theta, sin theta, omega) so the model never sees the
/// wrap discontinuity.
class PendulumEnv final : public Env {
 public:
  PendulumEnv(double dt, double g, double m, double l, double max_torque, double max_speed,
              int horizon)
      : dt_(dt), g_(g), m_(m), l_(l), max_speed_(max_speed) {
    spec_.name = "pendulum";
    spec_.state_dim = 3;
    spec_.action_dim = 1;
    spec_.action_low = Vector::Constant(1, -max_torque);
    spec_.action_high = Vector::Constant(1, max_torque);
    spec_.horizon = horizon;
    spec_.r_max = M_PI * M_PI + 0.1 * max_speed * max_speed + 0.001 * max_torque * max_torque;
  }

  const EnvSpec& spec() const override { return spec_; }

  EnvState reset(std::uint64_t seed) const override {
    EnvState st;
    st.rng = Rng(seed);
    const double theta = st.rng.uniform(-M_PI, M_PI);
    const double omega = st.rng.uniform(-1.0, 1.0);
    st.observation = obs(theta, omega);
    st.step_index = 0;
    return st;
  }

  StepResult step(const EnvState& state, const Vector& action) const override {
    StepResult out;
    const Vector a = detail::clamp_action(action, spec_, &out.action_clamped);
    const double u = a(0);
    const double theta = std::atan2(state.observation(1), state.observation(0));
    const double omega = state.observation(2);
    out.reward = -(theta * theta + 0.1 * omega * omega + 0.001 * u * u);
    // semi-implicit Euler
    const double omega_dot = 3.0 * g_ / (2.0 * l_) * std::sin(theta) + 3.0 / (m_ * l_ * l_) * u;
    const double omega_next =
        std::min(std::max(omega + dt_ * omega_dot, -max_speed_), max_speed_);
    const double theta_next = theta + dt_ * omega_next;
    out.state.observation = obs(theta_next, omega_next);
    out.state.step_index = state.step_index + 1;
    out.state.rng = state.rng;
    out.done = out.state.step_index >= spec_.horizon;
    return out;
  }

 private:
  Vector obs(double theta, double omega) const {
    Vector o(3);
    o << std::cos(theta), std::sin(theta), omega;
    return o;
  }

  EnvSpec spec_;
  double dt_, g_, m_, l_, max_speed_;
};

/// Planar double integrator with quadratic state/action cost. Positions are
/// kept inside a box so rewards stay bounded.
class PointMassEnv final : public Env {
 public:
  PointMassEnv(double dt, int horizon) : dt_(dt) {
    spec_.name = "pointmass";
    spec_.state_dim = 4;  // (px, py, vx, vy)
    spec_.action_dim = 2;
    spec_.action_low = Vector::Constant(2, -1.0);
    spec_.action_high = Vector::Constant(2, 1.0);
    spec_.horizon = horizon;
    spec_.r_max = 2.0 * kPosBound * kPosBound + 0.01 * 2.0;
  }

  const EnvSpec& spec() const override { return spec_; }

  EnvState reset(std::uint64_t seed) const override {
    EnvState st;
    st.rng = Rng(seed);
    st.observation = Vector::Zero(4);
    st.observation(0) = st.rng.uniform(-1.0, 1.0);
    st.observation(1) = st.rng.uniform(-1.0, 1.0);
    st.step_index = 0;
    return st;
  }

  StepResult step(const EnvState& state, const Vector& action) const override {
    StepResult out;
    const Vector a = detail::clamp_action(action, spec_, &out.action_clamped);
    const Vector pos = state.observation.head(2);
    const Vector vel = state.observation.tail(2);
    out.reward = -(pos.squaredNorm() + 0.01 * a.squaredNorm());
    const Vector vel_next = vel + dt_ * a;
    const Vector pos_next =
        (pos + dt_ * vel_next).cwiseMax(-kPosBound).cwiseMin(kPosBound);
    out.state.observation = Vector(4);
    out.state.observation << pos_next, vel_next;
    out.state.step_index = state.step_index + 1;
    out.state.rng = state.rng;
    out.done = out.state.step_index >= spec_.horizon;
    return out;
  }

 private:
  static constexpr double kPosBound = 2.0;
  EnvSpec spec_;
  double dt_;
};

/// Stable linear system with additive Gaussian noise:
///   s' = decay * s + gain * a + w,  w ~ N(0, noise_std^2 I),  r = -|s|^2.
/// Exists so the model's likelihood floor and error are analytically known.
class LinGaussEnv final : public Env {
 public:
  LinGaussEnv(int dim, double decay, double gain, double noise_std, int horizon)
      : decay_(decay), gain_(gain), noise_std_(noise_std) {
    spec_.name = "lingauss";
    spec_.state_dim = dim;
    spec_.action_dim = dim;
    spec_.action_low = Vector::Constant(dim, -1.0);
    spec_.action_high = Vector::Constant(dim, 1.0);
    spec_.horizon = horizon;
    spec_.r_max = kStateBound * kStateBound * dim;
  }

  const EnvSpec& spec() const override { return spec_; }

  EnvState reset(std::uint64_t seed) const override {
    EnvState st;
    st.rng = Rng(seed);
    st.observation = Vector(spec_.state_dim);
    for (int d = 0; d < spec_.state_dim; ++d) st.observation(d) = st.rng.normal();
    st.step_index = 0;
    return st;
  }

  StepResult step(const EnvState& state, const Vector& action) const override {
    StepResult out;
    const Vector a = detail::clamp_action(action, spec_, &out.action_clamped);
    out.reward = -state.observation.squaredNorm();
    out.state.rng = state.rng;
    Vector next = decay_ * state.observation + gain_ * a;
    if (noise_std_ > 0.0)
      for (int d = 0; d < next.size(); ++d) next(d) += noise_std_ * out.state.rng.normal();
    // clip far outside the operating range so r_max is a hard bound
    out.state.observation = next.cwiseMax(-kStateBound).cwiseMin(kStateBound);
    out.state.step_index = state.step_index + 1;
    out.done = out.state.step_index >= spec_.horizon;
    return out;
  }

  double noise_std() const { return noise_std_; }
  double decay() const { return decay_; }
  double gain() const { return gain_; }

 private:
  static constexpr double kStateBound = 10.0;
  EnvSpec spec_;
  double decay_, gain_, noise_std_;
};

/// Builds a named environment; params hold env.params.* overrides with
/// unknown keys rejected.
inline std::unique_ptr<Env> make_env(const std::string& name,
                                     const std::map<std::string, double>& params = {}) {
  auto take = [&params](std::map<std::string, double>& seen, const std::string& key,
                        double fallback) {
    seen[key] = fallback;
    auto it = params.find(key);
    return it == params.end() ? fallback : it->second;
  };
  std::map<std::string, double> known;
  std::unique_ptr<Env> env;
  if (name == "pendulum") {
    const double dt = take(known, "dt", 0.05);
    const double g = take(known, "g", 10.0);
    const double m = take(known, "m", 1.0);
    const double l = take(known, "l", 1.0);
    const double max_torque = take(known, "max_torque", 2.0);
    const double max_speed = take(known, "max_speed", 8.0);
    const int horizon = static_cast<int>(take(known, "horizon", 200));
    env = std::make_unique<PendulumEnv>(dt, g, m, l, max_torque, max_speed, horizon);
  } else if (name == "pointmass") {
    const double dt = take(known, "dt", 0.1);
    const int horizon = static_cast<int>(take(known, "horizon", 200));
    env = std::make_unique<PointMassEnv>(dt, horizon);
  } else if (name == "lingauss") {
    const int dim = static_cast<int>(take(known, "dim", 2));
    const double decay = take(known, "decay", 0.9);
    const double gain = take(known, "gain", 0.1);
    const double noise_std = take(known, "noise_std", 0.1);
    const int horizon = static_cast<int>(take(known, "horizon", 200));
    env = std::make_unique<LinGaussEnv>(dim, decay, gain, noise_std, horizon);
  } else {
    throw std::invalid_argument("unknown environment: " + name);
  }
  for (const auto& [key, value] : params)
    if (!known.count(key))
      throw std::invalid_argument("unknown env param for " + name + ": " + key);
  return env;
}

}  // namespace branchrl
