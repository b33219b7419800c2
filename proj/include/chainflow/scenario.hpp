#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "chainflow/geometry.hpp"
#include "chainflow/kinematics.hpp"
#include "chainflow/rng.hpp"
#include "chainflow/tensor.hpp"

namespace chainflow {

enum class Maneuver {
  straight,
  left_turn,
  right_turn,
  lane_follow_curve,
  stop_for_obstacle,
  overtake_static,
};

constexpr int kNumManeuvers = 6;

inline const char* maneuver_name(Maneuver m) {
  switch (m) {
    case Maneuver::straight: return "straight";
    case Maneuver::left_turn: return "left_turn";
    case Maneuver::right_turn: return "right_turn";
    case Maneuver::lane_follow_curve: return "lane_follow_curve";
    case Maneuver::stop_for_obstacle: return "stop_for_obstacle";
    case Maneuver::overtake_static: return "overtake_static";
  }
  return "?";
}

inline Maneuver maneuver_from_name(const std::string& s) {
  for (int i = 0; i < kNumManeuvers; ++i) {
    if (s == maneuver_name(static_cast<Maneuver>(i))) return static_cast<Maneuver>(i);
  }
  throw std::invalid_argument("unknown maneuver '" + s + "'");
}

struct LaneCorridor {
  std::vector<Vec2> centerline;
  double half_width = 4.0;

  Polyline polyline() const { return Polyline(centerline); }
};

struct Obstacle {
  Vec2 center;
  double radius = 0.5;
  Vec2 velocity;  // zero for static

  Vec2 position_at(double t) const { return center + velocity * t; }
};

struct ScenarioConfig {
  int horizon_steps = 8;
  double dt = 0.5;
  ControlLimits limits;

  int n_tok = 16;  // 1 ego + obstacle slots + lane slots
  int d_tok = 16;
  int n_sem = 8;
  int d_sem = 32;
  std::uint64_t codebook_seed = 7;

  int max_obstacles = 6;
  bool moving_obstacles = false;

  // maneuver mix: straight, left, right, curve, stop, overtake
  std::array<double, kNumManeuvers> maneuver_mix{0.30, 0.15, 0.15, 0.20, 0.10, 0.10};

  int max_expert_retries = 12;
  double world_offset_range = 12.0;  // rigid placement of the whole scene

  // margins used during synthesis so type invariants hold with slack
  double ego_radius = 1.0;
  double corridor_margin = 0.35;
  double collision_margin = 0.25;

  int obstacle_slots() const { return max_obstacles; }
  int lane_slots() const { return n_tok - 1 - obstacle_slots(); }
};

struct Scenario {
  std::string id;
  std::uint64_t seed = 0;
  Maneuver maneuver = Maneuver::straight;
  LaneCorridor corridor;
  std::vector<Obstacle> obstacles;
  EgoState ego_init;
  Trajectory expert;
  Array scene_tokens;   // [n_tok x d_tok], recomputed on load
  Array semantic_ctx;   // [n_sem x d_sem], recomputed on load
};

// ---------------------------------------------------------------------------
// Featurizers
// ---------------------------------------------------------------------------

// Deterministic geometric featurization in the ego-init frame: one ego
// token, fixed obstacle slots, lane-segment samples, zero padding. Layout
// per token: [f0..f4 | one-hot(ego, obstacle, lane) | valid | 0...] with
// f0, f1 the position relative to the ego.
inline Array encode_scene_tokens(const Scenario& scn, const ScenarioConfig& cfg) {
  if (cfg.d_tok < 10) throw std::invalid_argument("encode_scene_tokens: d_tok must be >= 10");
  if (cfg.lane_slots() < 1) {
    throw std::invalid_argument("encode_scene_tokens: n_tok too small for obstacle slots");
  }
  Array tok(cfg.n_tok, cfg.d_tok);
  const Pose2 frame = ego_pose(scn.ego_init);
  const int kOneHot = cfg.d_tok - 5;  // 3 one-hot dims + valid at kOneHot+3... keep fixed:
  const int oh = 5;                   // one-hot starts after the 5 feature dims
  const int valid = oh + 3;

  // ego token
  tok.at(0, 2) = scn.ego_init.speed;
  tok.at(0, oh + 0) = 1.0;
  tok.at(0, valid) = 1.0;
  (void)kOneHot;

  // obstacle tokens
  const int n_obs = std::min<int>(static_cast<int>(scn.obstacles.size()), cfg.obstacle_slots());
  for (int i = 0; i < n_obs; ++i) {
    const Obstacle& ob = scn.obstacles[static_cast<std::size_t>(i)];
    const Vec2 rel = frame.to_local(ob.center);
    const Vec2 rvel = frame.vec_to_local(ob.velocity);
    const int r = 1 + i;
    tok.at(r, 0) = rel.x;
    tok.at(r, 1) = rel.y;
    tok.at(r, 2) = ob.radius;
    tok.at(r, 3) = rvel.x;
    tok.at(r, 4) = rvel.y;
    tok.at(r, oh + 1) = 1.0;
    tok.at(r, valid) = 1.0;
  }

  // lane-segment tokens sampled uniformly by arc length
  const Polyline line = scn.corridor.polyline();
  const int n_lane = cfg.lane_slots();
  for (int j = 0; j < n_lane; ++j) {
    const double s = (j + 0.5) / static_cast<double>(n_lane) * line.length();
    const Vec2 rel = frame.to_local(line.point_at(s));
    const Vec2 tan = frame.vec_to_local(line.tangent_at(s));
    const int r = 1 + cfg.obstacle_slots() + j;
    tok.at(r, 0) = rel.x;
    tok.at(r, 1) = rel.y;
    tok.at(r, 2) = tan.x;
    tok.at(r, 3) = tan.y;
    tok.at(r, 4) = scn.corridor.half_width;
    tok.at(r, oh + 2) = 1.0;
    tok.at(r, valid) = 1.0;
  }
  return tok;
}

namespace detail {

inline Array codebook_vector(std::uint64_t codebook_seed, int slot, int value, int dim) {
  RngStream rng = RngStream::derived(codebook_seed, "sem_code", slot, value);
  Array v(1, dim);
  const double s = 1.0 / std::sqrt(static_cast<double>(dim));
  for (double& e : v.data) e = rng.normal(0.0, s);
  return v;
}

inline double centerline_net_turn(const LaneCorridor& c) {
  const Polyline line = c.polyline();
  const Vec2 t0 = line.tangent_at(0.0);
  const Vec2 t1 = line.tangent_at(line.length());
  return wrap_angle(std::atan2(t1.y, t1.x) - std::atan2(t0.y, t0.x));
}

}  // namespace detail

// Discrete scene attributes embedded through a fixed hash-seeded codebook.
// Rows: maneuver class, obstacle layout, speed regime, goal direction,
// route curvature bucket, route length bucket, then constant slot markers.
// Attributes are piecewise-constant, so small geometric jitter leaves the
// embedding unchanged.
inline Array synth_semantic_ctx(const Scenario& scn, const ScenarioConfig& cfg) {
  if (cfg.n_sem < 6) throw std::invalid_argument("synth_semantic_ctx: n_sem must be >= 6");
  Array ctx(cfg.n_sem, cfg.d_sem);
  auto set_row = [&](int row, int slot, int value) {
    const Array v = detail::codebook_vector(cfg.codebook_seed, slot, value, cfg.d_sem);
    for (int c = 0; c < cfg.d_sem; ++c) ctx.at(row, c) = v.at(0, c);
  };

  set_row(0, 0, static_cast<int>(scn.maneuver));

  const Polyline line = scn.corridor.polyline();
  bool on_path = false;
  for (const Obstacle& ob : scn.obstacles) {
    if (line.distance(ob.center) <= 0.5 * scn.corridor.half_width) on_path = true;
  }
  const int layout = std::min<int>(static_cast<int>(scn.obstacles.size()), 3) * 2 +
                     (on_path ? 1 : 0);
  set_row(1, 1, layout);

  const double v0 = scn.ego_init.speed;
  const int regime = v0 < 5.0 ? 0 : (v0 < 9.0 ? 1 : 2);
  set_row(2, 2, regime);

  const double net_turn = detail::centerline_net_turn(scn.corridor);
  const int goal_dir = net_turn > 0.25 ? 0 : (net_turn < -0.25 ? 2 : 1);
  set_row(3, 3, goal_dir);

  const int curv_bucket =
      std::clamp(static_cast<int>(std::lround(net_turn / 0.5)), -3, 3) + 3;
  set_row(4, 4, curv_bucket);

  const int len_bucket = std::clamp(static_cast<int>(std::lround(line.length() / 25.0)), 0, 6);
  set_row(5, 5, len_bucket);

  for (int r = 6; r < cfg.n_sem; ++r) set_row(r, r, 0);
  return ctx;
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

struct ValidationResult {
  bool ok = true;
  std::string why;
};

// Swept disc-vs-disc check over linearly interpolated ego motion with
// constant-velocity obstacle extrapolation. substeps per trajectory step.
inline bool trajectory_collides(const Trajectory& traj, const EgoState& start,
                                const std::vector<Obstacle>& obstacles,
                                double ego_radius, int substeps = 10,
                                double margin = 0.0) {
  Vec2 prev{start.x, start.y};
  double t_prev = 0.0;
  for (std::size_t i = 0; i < traj.states.size(); ++i) {
    const Vec2 cur{traj.states[i].x, traj.states[i].y};
    const double t_cur = (static_cast<double>(i) + 1.0) * traj.dt;
    for (int k = 1; k <= substeps; ++k) {
      const double f = static_cast<double>(k) / substeps;
      const Vec2 p = prev + (cur - prev) * f;
      const double t = t_prev + (t_cur - t_prev) * f;
      for (const Obstacle& ob : obstacles) {
        const double d = (p - ob.position_at(t)).norm();
        if (d < ego_radius + ob.radius + margin) return true;
      }
    }
    prev = cur;
    t_prev = t_cur;
  }
  return false;
}

inline bool trajectory_in_corridor(const Trajectory& traj, const LaneCorridor& corridor,
                                   double margin = 0.0) {
  const Polyline line = corridor.polyline();
  for (const EgoState& s : traj.states) {
    if (line.distance({s.x, s.y}) > corridor.half_width - margin) return false;
  }
  return true;
}

// Checks that consecutive expert states are reachable by bicycle_step under
// some admissible control; recovers (a, omega) from the state pair.
inline ValidationResult expert_kinematically_consistent(const Trajectory& traj,
                                                        const EgoState& start,
                                                        const ControlLimits& limits) {
  EgoState prev = start;
  for (std::size_t i = 0; i < traj.states.size(); ++i) {
    const EgoState& cur = traj.states[i];
    ControlInput u;
    u.yaw_rate = wrap_angle(cur.heading - prev.heading) / traj.dt;
    if (cur.speed > 0.0) {
      u.accel = (cur.speed - prev.speed) / traj.dt;
    } else {
      u.accel = -std::min(limits.a_max, prev.speed / traj.dt);
    }
    if (std::abs(u.accel) > limits.a_max + 1e-9 ||
        std::abs(u.yaw_rate) > limits.omega_max + 1e-9) {
      return {false, "expert step " + std::to_string(i) + " needs inadmissible control"};
    }
    const EgoState replay = bicycle_step(prev, u, traj.dt);
    const double err = std::abs(replay.x - cur.x) + std::abs(replay.y - cur.y) +
                       std::abs(wrap_angle(replay.heading - cur.heading)) +
                       std::abs(replay.speed - cur.speed);
    if (err > 1e-9) {
      return {false, "expert step " + std::to_string(i) + " not a bicycle transition"};
    }
    prev = cur;
  }
  return {};
}

inline ValidationResult validate_scenario(const Scenario& scn, const ScenarioConfig& cfg) {
  if (scn.corridor.centerline.size() < 2) return {false, "centerline has < 2 points"};
  for (std::size_t i = 1; i < scn.corridor.centerline.size(); ++i) {
    if ((scn.corridor.centerline[i] - scn.corridor.centerline[i - 1]).norm() <= 0.0) {
      return {false, "centerline has duplicate consecutive points"};
    }
  }
  if (!(scn.corridor.half_width > 0.0)) return {false, "half_width must be > 0"};
  for (const Obstacle& ob : scn.obstacles) {
    if (!(ob.radius > 0.0)) return {false, "obstacle radius must be > 0"};
  }
  if (static_cast<int>(scn.expert.states.size()) != cfg.horizon_steps) {
    return {false, "expert length != horizon"};
  }
  if (scn.expert.dt != cfg.dt) return {false, "expert dt mismatch"};
  if (!trajectory_in_corridor(scn.expert, scn.corridor)) {
    return {false, "expert leaves the corridor"};
  }
  if (trajectory_collides(scn.expert, scn.ego_init, scn.obstacles, cfg.ego_radius)) {
    return {false, "expert collides with an obstacle"};
  }
  ValidationResult kin = expert_kinematically_consistent(scn.expert, scn.ego_init, cfg.limits);
  if (!kin.ok) return kin;
  if (!scn.scene_tokens.finite() || !scn.semantic_ctx.finite()) {
    return {false, "non-finite features"};
  }
  return {};
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

namespace detail {

struct Blueprint {
  Maneuver maneuver;
  std::vector<Vec2> centerline;
  double half_width = 4.0;
  std::vector<Vec2> reference;  // tracking path; equals centerline except overtake
  double v0 = 8.0;
  std::vector<double> v_ref;    // length T+1
  std::vector<Obstacle> obstacles;
};

inline std::vector<Vec2> straight_line(double length, double step = 5.0) {
  std::vector<Vec2> pts;
  const int n = std::max(2, static_cast<int>(std::ceil(length / step)) + 1);
  for (int i = 0; i < n; ++i) {
    pts.push_back({length * i / (n - 1), 0.0});
  }
  return pts;
}

// Jerk-limited speed ramp toward v_target.
inline std::vector<double> speed_profile(double v0, double v_target, int steps, double dt,
                                         double a_cap, double jerk_cap) {
  std::vector<double> v_ref(static_cast<std::size_t>(steps) + 1);
  v_ref[0] = v0;
  double v = v0, a_prev = 0.0;
  for (int i = 0; i < steps; ++i) {
    double a_des = std::clamp((v_target - v) / dt, -a_cap, a_cap);
    a_des = std::clamp(a_des, a_prev - jerk_cap * dt, a_prev + jerk_cap * dt);
    v = std::max(0.0, v + a_des * dt);
    a_prev = a_des;
    v_ref[static_cast<std::size_t>(i) + 1] = v;
  }
  return v_ref;
}

inline Blueprint make_blueprint(Maneuver m, RngStream& rng, const ScenarioConfig& cfg) {
  Blueprint bp;
  bp.maneuver = m;
  const int regime = m == Maneuver::stop_for_obstacle
                         ? static_cast<int>(rng.uniform_int(2))       // low or mid
                         : static_cast<int>(rng.uniform_int(3));
  const double lo[3] = {2.5, 5.5, 9.5};
  const double hi[3] = {4.5, 8.5, 12.5};
  bp.v0 = rng.uniform(lo[regime], hi[regime]);
  const double horizon = cfg.horizon_steps * cfg.dt;
  const double reach = bp.v0 * horizon;

  const double a_cap = 2.2, jerk_cap = 3.5;

  switch (m) {
    case Maneuver::straight: {
      bp.centerline = straight_line(std::max(40.0, reach + 25.0));
      bp.half_width = rng.uniform(3.8, 4.6);
      const double v1 = bp.v0 * rng.uniform(0.85, 1.15);
      bp.v_ref = speed_profile(bp.v0, v1, cfg.horizon_steps, cfg.dt, a_cap, jerk_cap);
      break;
    }
    case Maneuver::left_turn:
    case Maneuver::right_turn: {
      const double sign = m == Maneuver::left_turn ? 1.0 : -1.0;
      const double radius = rng.uniform(12.0, 22.0);
      const double lead_in = rng.uniform(6.0, 12.0);
      const double arc = rng.uniform(1.05, 1.65);  // rad
      const double lead_out = std::max(12.0, reach);
      std::vector<Vec2> pts;
      for (double s = 0.0; s < lead_in; s += 2.0) pts.push_back({s, 0.0});
      const Vec2 center{lead_in, sign * radius};
      const int n_arc = std::max(6, static_cast<int>(arc * radius / 2.0));
      for (int i = 0; i <= n_arc; ++i) {
        const double phi = arc * i / n_arc;
        pts.push_back({center.x + radius * std::sin(phi),
                       center.y - sign * radius * std::cos(phi)});
      }
      const double end_heading = sign * arc;
      const Vec2 tail = pts.back();
      for (double s = 2.0; s <= lead_out; s += 2.0) {
        pts.push_back({tail.x + s * std::cos(end_heading), tail.y + s * std::sin(end_heading)});
      }
      bp.centerline = std::move(pts);
      bp.half_width = rng.uniform(3.8, 4.6);
      const double v_turn = std::min(bp.v0, std::sqrt(2.0 * radius));
      bp.v_ref = speed_profile(bp.v0, v_turn, cfg.horizon_steps, cfg.dt, a_cap, jerk_cap);
      break;
    }
    case Maneuver::lane_follow_curve: {
      const double length = std::max(45.0, reach + 25.0);
      const double amp = rng.uniform(2.0, 4.0);
      const double wavelength = rng.uniform(50.0, 80.0);
      std::vector<Vec2> pts;
      for (double x = 0.0; x <= length; x += 2.5) {
        pts.push_back({x, amp * (1.0 - std::cos(2.0 * kPi * x / wavelength))});
      }
      bp.centerline = std::move(pts);
      bp.half_width = rng.uniform(3.8, 4.6);
      const double v1 = bp.v0 * rng.uniform(0.85, 1.1);
      bp.v_ref = speed_profile(bp.v0, v1, cfg.horizon_steps, cfg.dt, a_cap, jerk_cap);
      break;
    }
    case Maneuver::stop_for_obstacle: {
      bp.centerline = straight_line(std::max(40.0, reach + 25.0));
      bp.half_width = rng.uniform(3.8, 4.6);
      const double a_brake = rng.uniform(1.6, 2.4);
      bp.v_ref = speed_profile(bp.v0, 0.0, cfg.horizon_steps, cfg.dt, a_brake, jerk_cap);
      // position updates use the pre-step speed, so this is the exact travel
      double travel = 0.0;
      for (int i = 0; i < cfg.horizon_steps; ++i)
        travel += bp.v_ref[static_cast<std::size_t>(i)] * cfg.dt;
      const double obs_radius = rng.uniform(0.4, 0.7);
      const double gap = obs_radius + cfg.ego_radius + rng.uniform(1.5, 3.0);
      Obstacle ob;
      ob.center = {travel + gap, 0.0};
      ob.radius = obs_radius;
      bp.obstacles.push_back(ob);
      break;
    }
    case Maneuver::overtake_static: {
      const double length = std::max(45.0, reach + 25.0);
      bp.centerline = straight_line(length);
      bp.half_width = rng.uniform(4.4, 5.4);
      const double obs_radius = rng.uniform(0.4, 0.7);
      const double d_obs = std::max(8.0, reach * rng.uniform(0.45, 0.62));
      Obstacle ob;
      ob.center = {d_obs, 0.0};
      ob.radius = obs_radius;
      bp.obstacles.push_back(ob);
      // laterally offset reference path around the obstacle
      const double offset = obs_radius + cfg.ego_radius + 0.8;
      const double span = std::max(9.0, bp.v0 * 1.4);
      std::vector<Vec2> ref;
      for (double x = 0.0; x <= length; x += 1.0) {
        double y = 0.0;
        if (std::abs(x - d_obs) < span) {
          y = offset * 0.5 * (1.0 + std::cos(kPi * (x - d_obs) / span));
        }
        ref.push_back({x, y});
      }
      bp.reference = std::move(ref);
      bp.v_ref = speed_profile(bp.v0, bp.v0, cfg.horizon_steps, cfg.dt, a_cap, jerk_cap);
      break;
    }
  }
  if (bp.reference.empty()) bp.reference = bp.centerline;
  return bp;
}

// Pure-pursuit tracking of the reference path at the target speed profile,
// rolled through the bicycle transition with admissible controls.
inline Trajectory track_reference(const Blueprint& bp, const EgoState& start,
                                  const ScenarioConfig& cfg) {
  const Polyline path(bp.reference);
  EgoState s = start;
  std::vector<ControlInput> controls;
  for (int i = 0; i < cfg.horizon_steps; ++i) {
    ControlInput u;
    u.accel = (bp.v_ref[static_cast<std::size_t>(i) + 1] - s.speed) / cfg.dt;
    const double lookahead = std::clamp(0.9 * s.speed, 3.0, 10.0);
    const double s_proj = path.project({s.x, s.y});
    const Vec2 target = path.point_at(std::min(s_proj + lookahead, path.length()));
    const Pose2 pose{{s.x, s.y}, s.heading};
    const Vec2 local = pose.to_local(target);
    const double alpha = std::atan2(local.y, local.x);
    const double curvature = 2.0 * std::sin(alpha) / lookahead;
    u.yaw_rate = s.speed * curvature;
    u = cfg.limits.clamp(u);
    controls.push_back(u);
    s = bicycle_step(s, u, cfg.dt);
  }
  return rollout_controls(start, controls, cfg.dt);
}

inline void place_extra_obstacles(Blueprint& bp, const Trajectory& expert,
                                  const EgoState& start, RngStream& rng,
                                  const ScenarioConfig& cfg) {
  const Polyline line(bp.centerline);
  const int already = static_cast<int>(bp.obstacles.size());
  const int budget = cfg.max_obstacles - already;
  if (budget <= 0) return;
  const int want = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(budget) + 1));
  int placed = 0, attempts = 0;
  while (placed < want && attempts < 60) {
    ++attempts;
    const double s = rng.uniform(4.0, line.length() - 4.0);
    const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
    const double radius = rng.uniform(0.3, 0.6);
    const double lat = rng.uniform(bp.half_width * 0.62, bp.half_width * 0.95 - radius);
    const Vec2 base = line.point_at(s);
    const Vec2 tan = line.tangent_at(s);
    Obstacle ob;
    ob.center = base + Vec2{-tan.y, tan.x} * (side * lat);
    ob.radius = radius;
    if (cfg.moving_obstacles && rng.uniform() < 0.5) {
      const double speed = rng.uniform(0.5, 2.0);
      const double jitter = rng.uniform(-0.5, 0.5);
      ob.velocity = rotate(tan, jitter) * speed;
    }
    // keep clear of the expert sweep
    bool clear = true;
    Vec2 prev{start.x, start.y};
    double t_prev = 0.0;
    for (std::size_t i = 0; i < expert.states.size() && clear; ++i) {
      const Vec2 cur{expert.states[i].x, expert.states[i].y};
      const double t_cur = (static_cast<double>(i) + 1.0) * expert.dt;
      for (int k = 0; k <= 10; ++k) {
        const double f = k / 10.0;
        const Vec2 p = prev + (cur - prev) * f;
        const double t = t_prev + (t_cur - t_prev) * f;
        if ((p - ob.position_at(t)).norm() <
            cfg.ego_radius + ob.radius + cfg.collision_margin + 0.35) {
          clear = false;
          break;
        }
      }
      prev = cur;
      t_prev = t_cur;
    }
    if (!clear) continue;
    bp.obstacles.push_back(ob);
    ++placed;
  }
}

inline void apply_world_pose(Scenario& scn, const Pose2& pose) {
  for (Vec2& p : scn.corridor.centerline) p = pose.to_world(p);
  for (Obstacle& ob : scn.obstacles) {
    ob.center = pose.to_world(ob.center);
    ob.velocity = rotate(ob.velocity, pose.heading);
  }
  const Vec2 e = pose.to_world({scn.ego_init.x, scn.ego_init.y});
  scn.ego_init.x = e.x;
  scn.ego_init.y = e.y;
  scn.ego_init.heading = wrap_angle(scn.ego_init.heading + pose.heading);
  for (EgoState& s : scn.expert.states) {
    const Vec2 p = pose.to_world({s.x, s.y});
    s.x = p.x;
    s.y = p.y;
    s.heading = wrap_angle(s.heading + pose.heading);
  }
}

}  // namespace detail

inline Maneuver sample_maneuver(RngStream& rng, const ScenarioConfig& cfg) {
  double total = 0.0;
  for (double w : cfg.maneuver_mix) total += w;
  double u = rng.uniform() * total;
  for (int i = 0; i < kNumManeuvers; ++i) {
    u -= cfg.maneuver_mix[static_cast<std::size_t>(i)];
    if (u <= 0.0) return static_cast<Maneuver>(i);
  }
  return Maneuver::overtake_static;
}

// Procedurally generates one scenario from its seed: corridor geometry,
// deliberate + incidental obstacles, a pure-pursuit expert rolled through
// the bicycle transition, then a random rigid placement of the whole scene.
// Deterministic given (seed, config).
inline Scenario generate_scenario(std::uint64_t seed, const ScenarioConfig& cfg,
                                  std::string id = "") {
  RngStream rng = RngStream::derived(seed, "scenario");
  const Maneuver maneuver = sample_maneuver(rng, cfg);

  for (int attempt = 0; attempt < cfg.max_expert_retries; ++attempt) {
    RngStream arng = RngStream::derived(seed, "attempt", attempt);
    detail::Blueprint bp = detail::make_blueprint(maneuver, arng, cfg);

    Scenario scn;
    scn.seed = seed;
    scn.maneuver = maneuver;
    scn.corridor.centerline = bp.centerline;
    scn.corridor.half_width = bp.half_width;

    const Polyline ref(bp.reference);
    const Vec2 t0 = ref.tangent_at(0.0);
    scn.ego_init.x = bp.reference.front().x;
    scn.ego_init.y = bp.reference.front().y;
    scn.ego_init.heading = std::atan2(t0.y, t0.x);
    scn.ego_init.speed = bp.v0;

    scn.expert = detail::track_reference(bp, scn.ego_init, cfg);
    detail::place_extra_obstacles(bp, scn.expert, scn.ego_init, arng, cfg);
    scn.obstacles = bp.obstacles;

    if (!trajectory_in_corridor(scn.expert, scn.corridor, cfg.corridor_margin)) continue;
    if (trajectory_collides(scn.expert, scn.ego_init, scn.obstacles, cfg.ego_radius, 10,
                            cfg.collision_margin)) {
      continue;
    }

    const Pose2 world{{arng.uniform(-cfg.world_offset_range, cfg.world_offset_range),
                       arng.uniform(-cfg.world_offset_range, cfg.world_offset_range)},
                      wrap_angle(arng.uniform(-kPi, kPi))};
    detail::apply_world_pose(scn, world);

    scn.id = id.empty() ? "scn-" + std::to_string(seed) : id;
    scn.scene_tokens = encode_scene_tokens(scn, cfg);
    scn.semantic_ctx = synth_semantic_ctx(scn, cfg);

    ValidationResult v = validate_scenario(scn, cfg);
    if (!v.ok) continue;
    return scn;
  }
  throw std::runtime_error("generate_scenario: seed " + std::to_string(seed) +
                           " produced no valid expert after " +
                           std::to_string(cfg.max_expert_retries) + " attempts (" +
                           maneuver_name(maneuver) + ")");
}

struct Dataset {
  int T = 8;
  double dt = 0.5;
  std::vector<Scenario> scenarios;
};

inline Dataset make_dataset(std::uint64_t master_seed, int count, const ScenarioConfig& cfg) {
  Dataset ds;
  ds.T = cfg.horizon_steps;
  ds.dt = cfg.dt;
  ds.scenarios.resize(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "scn-%06d", i);
    ds.scenarios[static_cast<std::size_t>(i)] =
        generate_scenario(seed_combine(master_seed, "scenario", i), cfg, buf);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Persistence: line-delimited JSON, one scenario per line, header first.
// Features are recomputed on load so featurizers stay swappable.
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json scenario_to_json(const Scenario& s) {
  nlohmann::json j;
  j["version"] = 1;
  j["id"] = s.id;
  j["seed"] = s.seed;
  j["maneuver"] = maneuver_name(s.maneuver);
  nlohmann::json cl = nlohmann::json::array();
  for (const Vec2& p : s.corridor.centerline) cl.push_back({p.x, p.y});
  j["corridor"] = {{"centerline", cl}, {"half_width", s.corridor.half_width}};
  nlohmann::json obs = nlohmann::json::array();
  for (const Obstacle& o : s.obstacles) {
    obs.push_back({{"center", {o.center.x, o.center.y}},
                   {"radius", o.radius},
                   {"velocity", {o.velocity.x, o.velocity.y}}});
  }
  j["obstacles"] = obs;
  j["ego_init"] = {{"x", s.ego_init.x},
                   {"y", s.ego_init.y},
                   {"heading", s.ego_init.heading},
                   {"speed", s.ego_init.speed}};
  nlohmann::json states = nlohmann::json::array();
  for (const EgoState& st : s.expert.states) {
    states.push_back({st.x, st.y, st.heading, st.speed});
  }
  j["expert"] = {{"dt", s.expert.dt}, {"states", states}};
  return j;
}

inline Scenario scenario_from_json(const nlohmann::json& j, const ScenarioConfig& cfg) {
  Scenario s;
  s.id = j.at("id").get<std::string>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.maneuver = maneuver_from_name(j.at("maneuver").get<std::string>());
  for (const auto& p : j.at("corridor").at("centerline")) {
    s.corridor.centerline.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
  }
  s.corridor.half_width = j.at("corridor").at("half_width").get<double>();
  for (const auto& o : j.at("obstacles")) {
    Obstacle ob;
    ob.center = {o.at("center").at(0).get<double>(), o.at("center").at(1).get<double>()};
    ob.radius = o.at("radius").get<double>();
    ob.velocity = {o.at("velocity").at(0).get<double>(), o.at("velocity").at(1).get<double>()};
    s.obstacles.push_back(ob);
  }
  const auto& e = j.at("ego_init");
  s.ego_init = {e.at("x").get<double>(), e.at("y").get<double>(),
                e.at("heading").get<double>(), e.at("speed").get<double>()};
  s.expert.dt = j.at("expert").at("dt").get<double>();
  for (const auto& st : j.at("expert").at("states")) {
    s.expert.states.push_back({st.at(0).get<double>(), st.at(1).get<double>(),
                               st.at(2).get<double>(), st.at(3).get<double>()});
  }
  s.scene_tokens = encode_scene_tokens(s, cfg);
  s.semantic_ctx = synth_semantic_ctx(s, cfg);
  return s;
}

}  // namespace detail

inline void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("save_dataset: cannot open for write: " + path);
  nlohmann::json header = {{"format_version", 1}, {"T", ds.T}, {"dt", ds.dt}};
  f << header.dump() << "\n";
  for (const Scenario& s : ds.scenarios) {
    f << detail::scenario_to_json(s).dump() << "\n";
  }
  if (!f) throw std::runtime_error("save_dataset: write failed: " + path);
}

inline Dataset load_dataset(const std::string& path, const ScenarioConfig& cfg) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_dataset: cannot open: " + path);
  Dataset ds;
  ds.T = cfg.horizon_steps;
  ds.dt = cfg.dt;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("load_dataset: " + path + " line " +
                               std::to_string(line_no) + ": malformed record (" +
                               e.what() + ")");
    }
    try {
      if (line_no == 1) {
        const int ver = j.at("format_version").get<int>();
        if (ver != 1) {
          throw std::runtime_error("load_dataset: " + path +
                                   ": unsupported format_version " + std::to_string(ver));
        }
        if (j.at("T").get<int>() != cfg.horizon_steps || j.at("dt").get<double>() != cfg.dt) {
          throw std::runtime_error("load_dataset: " + path +
                                   ": header (T, dt) does not match the active config");
        }
        continue;
      }
      if (j.at("version").get<int>() != 1) {
        throw std::runtime_error("load_dataset: " + path + " line " +
                                 std::to_string(line_no) + ": unsupported record version");
      }
      ds.scenarios.push_back(detail::scenario_from_json(j, cfg));
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("load_dataset: " + path + " line " +
                               std::to_string(line_no) + ": malformed record (" +
                               e.what() + ")");
    }
  }
  return ds;
}

}  // namespace chainflow
