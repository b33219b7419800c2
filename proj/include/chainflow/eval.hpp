#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "chainflow/metrics.hpp"
#include "chainflow/parallel.hpp"
#include "chainflow/pipeline.hpp"

namespace chainflow::eval {

enum class Arm { full, ar_only, expert_ref };

inline const char* arm_name(Arm a) {
  switch (a) {
    case Arm::full: return "full";
    case Arm::ar_only: return "ar-only";
    case Arm::expert_ref: return "expert";
  }
  return "?";
}

struct ArmReport {
  std::string arm;
  std::vector<ScenarioScore> rows;
  AggregateScore mean;
};

// Runs the planner over the dataset under one arm and scores the selected
// trajectory of every scenario. Scenario order in the report is dataset
// order; per-scenario work is independent and thread-safe.
inline ArmReport evaluate_arm(const Dataset& data, ParamStore& ps, const Pipeline& pipe,
                              Arm arm, std::uint64_t eval_seed, int threads = 0) {
  ArmReport rep;
  rep.arm = arm_name(arm);
  rep.rows.resize(data.scenarios.size());
  parallel_for(static_cast<int>(data.scenarios.size()), threads, [&](int i) {
    const Scenario& scn = data.scenarios[static_cast<std::size_t>(i)];
    Trajectory chosen;
    if (arm == Arm::expert_ref) {
      chosen = scn.expert;
    } else {
      PlannerOutput out = run_planner(scn, ps, pipe, eval_seed, arm == Arm::full);
      chosen = out.selected_trajectory;
    }
    rep.rows[static_cast<std::size_t>(i)] = score_trajectory(chosen, scn, pipe.eval_cfg);
  });
  rep.mean = aggregate(rep.rows);
  return rep;
}

// One row per scenario per arm, then an `aggregate` footer per arm with
// means scaled by 100 (table-style display).
inline void write_report_csv(const std::vector<ArmReport>& reports, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("write_report_csv: cannot open " + path);
  f << "scenario_id,arm,nc,dac,ep,ttc,comfort,pdms\n";
  char buf[256];
  for (const ArmReport& rep : reports) {
    for (const ScenarioScore& r : rep.rows) {
      std::snprintf(buf, sizeof(buf), "%s,%s,%d,%d,%.6f,%.6f,%.0f,%.6f\n",
                    r.scenario_id.c_str(), rep.arm.c_str(), r.nc, r.dac, r.ep, r.ttc,
                    r.comfort, r.pdms);
      f << buf;
    }
  }
  for (const ArmReport& rep : reports) {
    std::snprintf(buf, sizeof(buf), "aggregate,%s,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f\n",
                  rep.arm.c_str(), 100.0 * rep.mean.nc, 100.0 * rep.mean.dac,
                  100.0 * rep.mean.ep, 100.0 * rep.mean.ttc, 100.0 * rep.mean.comfort,
                  100.0 * rep.mean.pdms);
    f << buf;
  }
  if (!f) throw std::runtime_error("write_report_csv: write failed: " + path);
}

// Summary in the usual leaderboard column order, x100.
inline std::string format_summary(const std::vector<ArmReport>& reports) {
  std::string out = "arm             PDMS    NC     DAC    EP     TTC    Comf.\n";
  char buf[160];
  for (const ArmReport& rep : reports) {
    std::snprintf(buf, sizeof(buf), "%-15s %-7.2f %-6.2f %-6.2f %-6.2f %-6.2f %-6.2f\n",
                  rep.arm.c_str(), 100.0 * rep.mean.pdms, 100.0 * rep.mean.nc,
                  100.0 * rep.mean.dac, 100.0 * rep.mean.ep, 100.0 * rep.mean.ttc,
                  100.0 * rep.mean.comfort);
    out += buf;
  }
  return out;
}

}  // namespace chainflow::eval
