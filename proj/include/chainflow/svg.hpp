#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "chainflow/pipeline.hpp"
#include "chainflow/scenario.hpp"

namespace chainflow {

// Plain SVG emission for the `plan` command: corridor band, obstacles,
// expert, proposals, refined candidates, selected trajectory. Y is flipped
// so the scene reads in conventional orientation.
class SvgPlot {
 public:
  void polyline(const std::vector<Vec2>& pts, const std::string& stroke, double width,
                const std::string& dash = "", double opacity = 1.0) {
    if (pts.size() < 2) return;
    for (const Vec2& p : pts) grow(p);
    std::string d = "M";
    char buf[64];
    for (const Vec2& p : pts) {
      std::snprintf(buf, sizeof(buf), " %.3f %.3f", p.x, -p.y);
      d += buf;
    }
    char elem[256];
    std::snprintf(elem, sizeof(elem),
                  "<path d=\"%s\" fill=\"none\" stroke=\"%s\" stroke-width=\"%.3f\" "
                  "stroke-linecap=\"round\" stroke-linejoin=\"round\" opacity=\"%.2f\"%s/>\n",
                  "%PATH%", stroke.c_str(), width, opacity,
                  dash.empty() ? "" : (" stroke-dasharray=\"" + dash + "\"").c_str());
    std::string e = elem;
    e.replace(e.find("%PATH%"), 6, d);
    body_ += e;
  }

  void circle(const Vec2& c, double r, const std::string& fill, double opacity = 1.0) {
    grow({c.x - r, c.y - r});
    grow({c.x + r, c.y + r});
    char buf[192];
    std::snprintf(buf, sizeof(buf),
                  "<circle cx=\"%.3f\" cy=\"%.3f\" r=\"%.3f\" fill=\"%s\" opacity=\"%.2f\"/>\n",
                  c.x, -c.y, r, fill.c_str(), opacity);
    body_ += buf;
  }

  void marker(const Vec2& c, double heading, const std::string& fill) {
    grow(c);
    const double a = heading;
    const Vec2 tip{c.x + 1.6 * std::cos(a), c.y + 1.6 * std::sin(a)};
    const Vec2 l{c.x + 0.8 * std::cos(a + 2.5), c.y + 0.8 * std::sin(a + 2.5)};
    const Vec2 r{c.x + 0.8 * std::cos(a - 2.5), c.y + 0.8 * std::sin(a - 2.5)};
    char buf[224];
    std::snprintf(buf, sizeof(buf),
                  "<polygon points=\"%.3f,%.3f %.3f,%.3f %.3f,%.3f\" fill=\"%s\"/>\n",
                  tip.x, -tip.y, l.x, -l.y, r.x, -r.y, fill.c_str());
    body_ += buf;
  }

  void save(const std::string& path) const {
    const double pad = 4.0;
    const double x0 = min_x_ - pad, y0 = -max_y_ - pad;
    const double w = (max_x_ - min_x_) + 2 * pad, h = (max_y_ - min_y_) + 2 * pad;
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("SvgPlot: cannot open " + path);
    char head[256];
    std::snprintf(head, sizeof(head),
                  "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"%.3f %.3f %.3f %.3f\" "
                  "width=\"900\">\n<rect x=\"%.3f\" y=\"%.3f\" width=\"%.3f\" height=\"%.3f\" "
                  "fill=\"white\"/>\n",
                  x0, y0, w, h, x0, y0, w, h);
    f << head << body_ << "</svg>\n";
    if (!f) throw std::runtime_error("SvgPlot: write failed: " + path);
  }

 private:
  void grow(const Vec2& p) {
    min_x_ = std::min(min_x_, p.x);
    max_x_ = std::max(max_x_, p.x);
    min_y_ = std::min(min_y_, p.y);
    max_y_ = std::max(max_y_, p.y);
  }

  std::string body_;
  double min_x_ = 1e18, max_x_ = -1e18, min_y_ = 1e18, max_y_ = -1e18;
};

inline std::vector<Vec2> trajectory_points(const EgoState& start, const Trajectory& t) {
  std::vector<Vec2> pts{{start.x, start.y}};
  for (const EgoState& s : t.states) pts.push_back({s.x, s.y});
  return pts;
}

// Scene + planner output in one frame: corridor band in gray, expert
// dashed green, proposals thin blue, refined purple, selection orange.
inline void plot_plan(const Scenario& scn, const PlannerOutput& out, const std::string& path) {
  SvgPlot svg;
  svg.polyline(scn.corridor.centerline, "#d8d8d8", 2.0 * scn.corridor.half_width);
  svg.polyline(scn.corridor.centerline, "#9a9a9a", 0.15, "1.2,1.2");
  for (const Obstacle& ob : scn.obstacles) {
    svg.circle(ob.center, ob.radius, "#c03030", 0.85);
    if (ob.velocity.norm() > 1e-9) {
      svg.polyline({ob.center, ob.center + ob.velocity * 1.5}, "#c03030", 0.12);
    }
  }
  for (const Trajectory& p : out.proposals.trajectories) {
    svg.polyline(trajectory_points(scn.ego_init, p), "#5b8ac5", 0.16, "", 0.8);
  }
  for (const Trajectory& r : out.refined) {
    svg.polyline(trajectory_points(scn.ego_init, r), "#7a4fb0", 0.2, "", 0.85);
  }
  svg.polyline(trajectory_points(scn.ego_init, scn.expert), "#2e8b2e", 0.28, "0.8,0.5");
  svg.polyline(trajectory_points(scn.ego_init, out.selected_trajectory), "#e07b00", 0.4);
  svg.marker({scn.ego_init.x, scn.ego_init.y}, scn.ego_init.heading, "#222222");
  svg.save(path);
}

}  // namespace chainflow
