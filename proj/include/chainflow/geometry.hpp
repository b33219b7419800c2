#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "chainflow/kinematics.hpp"

namespace chainflow {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  double dot(const Vec2& o) const { return x * o.x + y * o.y; }
  double norm() const { return std::sqrt(x * x + y * y); }
};

inline Vec2 rotate(const Vec2& v, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  return {c * v.x - s * v.y, s * v.x + c * v.y};
}

// Rigid pose; maps points between the world frame and the pose-local frame.
struct Pose2 {
  Vec2 origin;
  double heading = 0.0;

  Vec2 to_local(const Vec2& world) const {
    return rotate(world - origin, -heading);
  }
  Vec2 to_world(const Vec2& local) const {
    return origin + rotate(local, heading);
  }
  Vec2 vec_to_local(const Vec2& world_vec) const { return rotate(world_vec, -heading); }
};

inline Pose2 ego_pose(const EgoState& s) { return Pose2{{s.x, s.y}, s.heading}; }

inline double dist_point_segment(const Vec2& p, const Vec2& a, const Vec2& b) {
  const Vec2 ab = b - a;
  const double len2 = ab.dot(ab);
  if (len2 <= 0.0) return (p - a).norm();
  const double t = std::clamp((p - a).dot(ab) / len2, 0.0, 1.0);
  return (p - (a + ab * t)).norm();
}

// Piecewise-linear centerline with cached cumulative arc lengths.
class Polyline {
 public:
  Polyline() = default;
  explicit Polyline(std::vector<Vec2> pts) : pts_(std::move(pts)) {
    if (pts_.size() < 2) {
      throw std::invalid_argument("Polyline: needs at least 2 points");
    }
    cum_.resize(pts_.size(), 0.0);
    for (std::size_t i = 1; i < pts_.size(); ++i) {
      const double seg = (pts_[i] - pts_[i - 1]).norm();
      if (seg <= 0.0) {
        throw std::invalid_argument("Polyline: consecutive points must be distinct");
      }
      cum_[i] = cum_[i - 1] + seg;
    }
  }

  const std::vector<Vec2>& points() const { return pts_; }
  double length() const { return cum_.back(); }

  // Distance from p to the polyline.
  double distance(const Vec2& p) const {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 1; i < pts_.size(); ++i) {
      best = std::min(best, dist_point_segment(p, pts_[i - 1], pts_[i]));
    }
    return best;
  }

  // Arc-length coordinate of the closest point on the polyline to p.
  double project(const Vec2& p) const {
    double best = std::numeric_limits<double>::infinity();
    double best_s = 0.0;
    for (std::size_t i = 1; i < pts_.size(); ++i) {
      const Vec2 a = pts_[i - 1], b = pts_[i];
      const Vec2 ab = b - a;
      const double len2 = ab.dot(ab);
      const double t = std::clamp((p - a).dot(ab) / len2, 0.0, 1.0);
      const Vec2 q = a + ab * t;
      const double d = (p - q).norm();
      if (d < best) {
        best = d;
        best_s = cum_[i - 1] + std::sqrt(len2) * t;
      }
    }
    return best_s;
  }

  // Point at arc-length s (clamped to the ends).
  Vec2 point_at(double s) const {
    s = std::clamp(s, 0.0, length());
    const std::size_t i = segment_index(s);
    const double t = (s - cum_[i]) / (cum_[i + 1] - cum_[i]);
    return pts_[i] + (pts_[i + 1] - pts_[i]) * t;
  }

  // Unit tangent of the segment containing arc-length s.
  Vec2 tangent_at(double s) const {
    s = std::clamp(s, 0.0, length());
    const std::size_t i = segment_index(s);
    const Vec2 d = pts_[i + 1] - pts_[i];
    const double n = d.norm();
    return {d.x / n, d.y / n};
  }

 private:
  std::size_t segment_index(double s) const {
    auto it = std::upper_bound(cum_.begin(), cum_.end(), s);
    std::size_t i = static_cast<std::size_t>(it - cum_.begin());
    if (i > 0) --i;
    return std::min(i, pts_.size() - 2);
  }

  std::vector<Vec2> pts_;
  std::vector<double> cum_;
};

// Earliest collision of two constant-velocity discs, or +inf. Solves
// ||dp + dv*tau|| = r for the smallest tau >= 0.
inline double disc_collision_time(const Vec2& dp, const Vec2& dv, double r) {
  const double c = dp.dot(dp) - r * r;
  if (c <= 0.0) return 0.0;  // already overlapping
  const double a = dv.dot(dv);
  const double b = 2.0 * dp.dot(dv);
  if (a <= 1e-12) return std::numeric_limits<double>::infinity();
  const double disc = b * b - 4.0 * a * c;
  if (disc < 0.0) return std::numeric_limits<double>::infinity();
  const double tau = (-b - std::sqrt(disc)) / (2.0 * a);
  return tau >= 0.0 ? tau : std::numeric_limits<double>::infinity();
}

}  // namespace chainflow
