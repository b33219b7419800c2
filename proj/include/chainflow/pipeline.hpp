#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "chainflow/chain.hpp"
#include "chainflow/flow.hpp"
#include "chainflow/metrics.hpp"
#include "chainflow/scenario.hpp"
#include "chainflow/scorer.hpp"
#include "chainflow/tensor.hpp"

namespace chainflow {

// Everything needed to run the planner end to end. Model wrappers are
// stateless; parameters live in a ParamStore owned by the caller.
struct Pipeline {
  ScenarioConfig scn_cfg;
  chain::ChainConfig chain_cfg;
  flow::FlowConfig flow_cfg;
  scorer::ScorerConfig scorer_cfg;
  eval::EvalConfig eval_cfg;

  chain::ChainModel chain_model;
  flow::FlowModel flow_model;
  scorer::ScorerModel scorer_model;
  flow::NoiseSchedule schedule;

  static int cond_dim(const flow::FlowConfig& fc, const ScenarioConfig& sc) {
    return fc.conditioning_source == flow::CondSource::semantic_ctx ? sc.d_sem : sc.d_tok;
  }

  static Pipeline make(const ScenarioConfig& sc, const chain::ChainConfig& cc,
                       const flow::FlowConfig& fc, const scorer::ScorerConfig& rc,
                       const eval::EvalConfig& ec) {
    chain::ChainConfig cc2 = cc;
    cc2.T = sc.horizon_steps;
    return Pipeline{sc,
                    cc2,
                    fc,
                    rc,
                    ec,
                    chain::ChainModel(cc2, sc, sc.limits),
                    flow::FlowModel(fc, sc.horizon_steps, cond_dim(fc, sc)),
                    scorer::ScorerModel(rc, sc),
                    flow::build_schedule(fc.n_train_steps)};
  }

  void init_params(ParamStore& ps, std::uint64_t seed) const {
    chain_model.init_params(ps, seed_combine(seed, "chain"));
    flow_model.init_params(ps, seed_combine(seed, "flow"));
    scorer_model.init_params(ps, seed_combine(seed, "scorer"));
  }

  const Array& conditioning(const Scenario& scn) const {
    return flow::conditioning_of(scn, flow_cfg.conditioning_source);
  }
};

struct PlannerOutput {
  chain::ProposalSet proposals;
  std::vector<Trajectory> refined;  // empty when refinement is skipped
  std::vector<scorer::ScoreVector> scores;
  int selected = 0;
  Trajectory selected_trajectory;
};

// Chain rollout -> optional per-mode DDIM refinement -> scorer selection.
// DDIM noise streams derive from (seed, scenario id, mode index).
inline PlannerOutput run_planner(const Scenario& scn, ParamStore& ps, const Pipeline& pipe,
                                 std::uint64_t seed, bool refine = true) {
  PlannerOutput out;
  out.proposals = chain::rollout_modes(scn, ps, pipe.chain_model);

  std::vector<Trajectory> candidates;
  if (refine) {
    for (int k = 0; k < static_cast<int>(out.proposals.trajectories.size()); ++k) {
      const Trajectory& prop = out.proposals.trajectories[static_cast<std::size_t>(k)];
      Trajectory scratch;
      const Trajectory& eff = flow::effective_proposal(pipe.flow_cfg.space, prop, scratch);
      RngStream rng = RngStream::derived(seed, scn.id, k);
      out.refined.push_back(flow::ddim_refine(eff, scn.ego_init, pipe.conditioning(scn), ps,
                                              pipe.flow_model, pipe.schedule,
                                              pipe.flow_cfg.n_infer_steps, rng));
    }
    candidates = out.refined;
  } else {
    candidates = out.proposals.trajectories;
  }

  out.scores = pipe.scorer_model.score_candidates(candidates, scn, ps);
  out.selected = scorer::select_best(out.scores);
  out.selected_trajectory = candidates[static_cast<std::size_t>(out.selected)];
  return out;
}

}  // namespace chainflow
