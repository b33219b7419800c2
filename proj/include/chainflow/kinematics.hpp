#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace chainflow {

constexpr double kPi = 3.14159265358979323846;

// Wraps an angle to (-pi, pi].
inline double wrap_angle(double a) {
  double r = std::fmod(a + kPi, 2.0 * kPi);
  if (r <= 0.0) r += 2.0 * kPi;
  return r - kPi;
}

// Vehicle pose-velocity state. Heading stays in (-pi, pi] and speed is
// clamped at zero by every operation that produces a state.
struct EgoState {
  double x = 0.0;        // m
  double y = 0.0;        // m
  double heading = 0.0;  // rad, (-pi, pi]
  double speed = 0.0;    // m/s, >= 0

  bool finite() const {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(heading) &&
           std::isfinite(speed);
  }
};

// Per-step control variables.
struct ControlInput {
  double accel = 0.0;     // m/s^2
  double yaw_rate = 0.0;  // rad/s

  bool finite() const { return std::isfinite(accel) && std::isfinite(yaw_rate); }
};

struct ControlLimits {
  double a_max = 4.0;      // m/s^2
  double omega_max = 1.0;  // rad/s

  ControlInput clamp(const ControlInput& u) const {
    ControlInput c;
    c.accel = std::max(-a_max, std::min(a_max, u.accel));
    c.yaw_rate = std::max(-omega_max, std::min(omega_max, u.yaw_rate));
    return c;
  }
};

// T future states at a fixed step; the start state is not included.
struct Trajectory {
  std::vector<EgoState> states;
  double dt = 0.5;

  std::size_t size() const { return states.size(); }
};

// Forward-Euler bicycle transition with yaw rate applied directly to the
// heading. Position advances with the pre-step speed and heading.
inline EgoState bicycle_step(const EgoState& s, const ControlInput& u, double dt) {
  if (!s.finite() || !u.finite()) {
    throw std::domain_error("bicycle_step: non-finite state or control");
  }
  if (!(dt > 0.0)) {
    throw std::invalid_argument("bicycle_step: dt must be > 0");
  }
  EgoState n;
  n.x = s.x + s.speed * std::cos(s.heading) * dt;
  n.y = s.y + s.speed * std::sin(s.heading) * dt;
  n.heading = wrap_angle(s.heading + u.yaw_rate * dt);
  n.speed = std::max(0.0, s.speed + u.accel * dt);
  return n;
}

// Applies bicycle_step once per control; state i of the result is the
// start state advanced i+1 times.
inline Trajectory rollout_controls(const EgoState& start,
                                   const std::vector<ControlInput>& controls,
                                   double dt) {
  if (controls.empty()) {
    throw std::invalid_argument("rollout_controls: empty control sequence");
  }
  Trajectory traj;
  traj.dt = dt;
  traj.states.reserve(controls.size());
  EgoState s = start;
  for (const ControlInput& u : controls) {
    s = bicycle_step(s, u, dt);
    traj.states.push_back(s);
  }
  return traj;
}

namespace detail {
inline void check_same_length(const Trajectory& a, const Trajectory& b,
                              const char* what) {
  if (a.states.size() != b.states.size()) {
    throw std::invalid_argument(std::string(what) + ": length mismatch (" +
                                std::to_string(a.states.size()) + " vs " +
                                std::to_string(b.states.size()) + ")");
  }
}
}  // namespace detail

// Mean Euclidean displacement over (x, y).
inline double ade(const Trajectory& pred, const Trajectory& ref) {
  detail::check_same_length(pred, ref, "ade");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.states.size(); ++i) {
    const double dx = pred.states[i].x - ref.states[i].x;
    const double dy = pred.states[i].y - ref.states[i].y;
    sum += std::sqrt(dx * dx + dy * dy);
  }
  return sum / static_cast<double>(pred.states.size());
}

// Final-point Euclidean displacement over (x, y).
inline double fde(const Trajectory& pred, const Trajectory& ref) {
  detail::check_same_length(pred, ref, "fde");
  const double dx = pred.states.back().x - ref.states.back().x;
  const double dy = pred.states.back().y - ref.states.back().y;
  return std::sqrt(dx * dx + dy * dy);
}

// Zero-control coasting rollout from the start state; the reference
// baseline used to normalize displacement thresholds.
inline Trajectory constant_velocity_baseline(const EgoState& start, int steps,
                                             double dt) {
  std::vector<ControlInput> zeros(static_cast<std::size_t>(steps));
  return rollout_controls(start, zeros, dt);
}

}  // namespace chainflow
