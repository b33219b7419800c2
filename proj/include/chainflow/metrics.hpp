#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "chainflow/geometry.hpp"
#include "chainflow/kinematics.hpp"
#include "chainflow/scenario.hpp"

namespace chainflow::eval {

// Fixed sub-metric constants. The benchmark this mirrors publishes the
// metric names but not their internals, so these are declared here once
// and documented in the config echo.
struct EvalConfig {
  double ego_radius = 1.0;        // m
  int nc_substeps = 10;           // interpolation density per step
  double ttc_horizon = 3.0;       // s; score 1 at/after this
  double comfort_accel = 4.0;     // m/s^2
  double comfort_jerk = 8.0;      // m/s^3
  double comfort_yaw_accel = 2.0; // rad/s^2
};

// 1 when the ego disc never intersects any obstacle disc over linearly
// interpolated motion (strictly stricter than endpoint checking).
inline int no_collision(const Trajectory& traj, const Scenario& scn,
                        const EvalConfig& cfg = {}) {
  return trajectory_collides(traj, scn.ego_init, scn.obstacles, cfg.ego_radius,
                             cfg.nc_substeps)
             ? 0
             : 1;
}

// 1 when every waypoint stays within half_width of the centerline.
inline int drivable_compliance(const Trajectory& traj, const Scenario& scn,
                               const EvalConfig& = {}) {
  return trajectory_in_corridor(traj, scn.corridor) ? 1 : 0;
}

// Net arc-length progress along the corridor, measured by projection.
inline double corridor_progress(const Trajectory& traj, const Scenario& scn) {
  const Polyline line = scn.corridor.polyline();
  const double s0 = line.project({scn.ego_init.x, scn.ego_init.y});
  const EgoState& last = traj.states.back();
  return line.project({last.x, last.y}) - s0;
}

// Progress ratio against the expert, clipped to [0, 1].
inline double ego_progress(const Trajectory& traj, const Scenario& scn,
                           const EvalConfig& = {}) {
  const double own = corridor_progress(traj, scn);
  const double ref = corridor_progress(scn.expert, scn);
  if (ref < 1e-6) return own >= ref ? 1.0 : 0.0;
  return std::clamp(own / ref, 0.0, 1.0);
}

// Minimum forward time-to-collision under constant-velocity extrapolation
// of both ego (per-waypoint velocity) and obstacles, mapped linearly:
// 1 at >= ttc_horizon seconds, 0 at 0.
inline double time_to_collision(const Trajectory& traj, const Scenario& scn,
                                const EvalConfig& cfg = {}) {
  if (scn.obstacles.empty()) return 1.0;
  double min_ttc = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < traj.states.size(); ++i) {
    const EgoState& s = traj.states[i];
    const double t = (static_cast<double>(i) + 1.0) * traj.dt;
    const Vec2 ep{s.x, s.y};
    const Vec2 ev{s.speed * std::cos(s.heading), s.speed * std::sin(s.heading)};
    for (const Obstacle& ob : scn.obstacles) {
      const Vec2 dp = ep - ob.position_at(t);
      const Vec2 dv = ev - ob.velocity;
      const double tau = disc_collision_time(dp, dv, cfg.ego_radius + ob.radius);
      min_ttc = std::min(min_ttc, tau);
    }
  }
  if (!std::isfinite(min_ttc) || min_ttc >= cfg.ttc_horizon) return 1.0;
  return std::max(0.0, min_ttc / cfg.ttc_horizon);
}

// Binary: finite-difference accel, jerk and yaw accel of the waypoint
// states all within limits.
inline int comfort(const Trajectory& traj, const EvalConfig& cfg = {}) {
  const std::size_t n = traj.states.size();
  if (n < 2) return 1;
  const double dt = traj.dt;
  std::vector<double> acc, yaw_rate;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    acc.push_back((traj.states[i + 1].speed - traj.states[i].speed) / dt);
    yaw_rate.push_back(
        wrap_angle(traj.states[i + 1].heading - traj.states[i].heading) / dt);
  }
  for (double a : acc)
    if (std::abs(a) > cfg.comfort_accel + 1e-9) return 0;
  for (std::size_t i = 0; i + 1 < acc.size(); ++i) {
    if (std::abs((acc[i + 1] - acc[i]) / dt) > cfg.comfort_jerk + 1e-9) return 0;
  }
  for (std::size_t i = 0; i + 1 < yaw_rate.size(); ++i) {
    if (std::abs((yaw_rate[i + 1] - yaw_rate[i]) / dt) > cfg.comfort_yaw_accel + 1e-9)
      return 0;
  }
  return 1;
}

// nc * dac * (5*ttc + 5*ep + 2*comfort) / 12
inline double mini_pdms(int nc, int dac, double ep, double ttc, double comf) {
  return nc * dac * (5.0 * ttc + 5.0 * ep + 2.0 * comf) / 12.0;
}

struct ScenarioScore {
  std::string scenario_id;
  int nc = 0;
  int dac = 0;
  double ep = 0.0;
  double ttc = 0.0;
  double comfort = 0.0;
  double pdms = 0.0;
};

inline ScenarioScore score_trajectory(const Trajectory& traj, const Scenario& scn,
                                      const EvalConfig& cfg = {}) {
  ScenarioScore s;
  s.scenario_id = scn.id;
  s.nc = no_collision(traj, scn, cfg);
  s.dac = drivable_compliance(traj, scn, cfg);
  s.ep = ego_progress(traj, scn, cfg);
  s.ttc = time_to_collision(traj, scn, cfg);
  s.comfort = comfort(traj, cfg);
  s.pdms = mini_pdms(s.nc, s.dac, s.ep, s.ttc, s.comfort);
  return s;
}

struct AggregateScore {
  double nc = 0, dac = 0, ep = 0, ttc = 0, comfort = 0, pdms = 0;
  int count = 0;
};

inline AggregateScore aggregate(const std::vector<ScenarioScore>& rows) {
  AggregateScore a;
  a.count = static_cast<int>(rows.size());
  if (rows.empty()) return a;
  for (const ScenarioScore& r : rows) {
    a.nc += r.nc;
    a.dac += r.dac;
    a.ep += r.ep;
    a.ttc += r.ttc;
    a.comfort += r.comfort;
    a.pdms += r.pdms;
  }
  const double inv = 1.0 / a.count;
  a.nc *= inv;
  a.dac *= inv;
  a.ep *= inv;
  a.ttc *= inv;
  a.comfort *= inv;
  a.pdms *= inv;
  return a;
}

}  // namespace chainflow::eval
