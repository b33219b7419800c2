#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "chainflow/geometry.hpp"
#include "chainflow/kinematics.hpp"
#include "chainflow/metrics.hpp"
#include "chainflow/scenario.hpp"
#include "chainflow/tensor.hpp"

namespace chainflow::scorer {

struct ScorerConfig {
  int hidden_dim = 64;
  double pos_feat_scale = 0.05;
};

// Per-candidate utility sub-scores. The logits predict "collision-free"
// and "inside the drivable corridor"; progress_estimate is already in
// [0, 1]. aggregate = sigmoid(cl) * sigmoid(dl) * (0.5 + 0.5 * progress).
struct ScoreVector {
  double collision_logit = 0.0;
  double drivable_logit = 0.0;
  double progress_estimate = 0.0;
  double aggregate = 0.0;
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double aggregate_of(double collision_logit, double drivable_logit,
                           double progress_estimate) {
  return sigmoid(collision_logit) * sigmoid(drivable_logit) *
         (0.5 + 0.5 * progress_estimate);
}

// Ground-truth supervision from scenario geometry.
struct ScorerTargets {
  int collides = 0;
  int off_drivable = 0;
  double progress = 0.0;
};

inline ScorerTargets scorer_targets(const Trajectory& candidate, const Scenario& scn,
                                    const eval::EvalConfig& ecfg = {}) {
  ScorerTargets t;
  t.collides = eval::no_collision(candidate, scn, ecfg) ? 0 : 1;
  t.off_drivable = eval::drivable_compliance(candidate, scn, ecfg) ? 0 : 1;
  t.progress = eval::ego_progress(candidate, scn, ecfg);
  return t;
}

// Small feed-forward head: candidate waypoints are embedded per step and
// mean-pooled, one cross-attention reads the scene tokens, and a two-layer
// head emits the three sub-scores.
class ScorerModel {
 public:
  ScorerModel(const ScorerConfig& cfg, const ScenarioConfig& scn_cfg)
      : cfg_(cfg), d_tok_(scn_cfg.d_tok) {}

  void init_params(ParamStore& ps, std::uint64_t seed) const {
    auto mat = [&](const std::string& name, int r, int c) {
      RngStream rng = RngStream::derived(seed, "init", name);
      const double sigma = std::sqrt(2.0 / static_cast<double>(r + c));
      ps.create(name, Array::randn(r, c, rng, sigma));
    };
    const int H = cfg_.hidden_dim;
    mat("scorer.emb.w", 5, H);
    ps.create("scorer.emb.b", Array::zeros(1, H));
    mat("scorer.tok.w", d_tok_, H);
    ps.create("scorer.tok.b", Array::zeros(1, H));
    mat("scorer.attn.wq", H, H);
    mat("scorer.attn.wk", H, H);
    mat("scorer.attn.wv", H, H);
    mat("scorer.mlp.w1", 2 * H, H);
    ps.create("scorer.mlp.b1", Array::zeros(1, H));
    mat("scorer.mlp.w2", H, 3);
    ps.create("scorer.mlp.b2", Array::zeros(1, 3));
  }

  // Builds the [1 x 3] raw head (collision logit, drivable logit,
  // progress raw) for one candidate on the tape.
  Tape::Id head(Tape& t, ParamStore& ps, const Trajectory& candidate,
                const Scenario& scn) const {
    const Pose2 frame = ego_pose(scn.ego_init);
    const int T = static_cast<int>(candidate.states.size());
    Array feats(T, 5);
    for (int i = 0; i < T; ++i) {
      const EgoState& s = candidate.states[static_cast<std::size_t>(i)];
      const Vec2 rel = frame.to_local({s.x, s.y});
      feats.at(i, 0) = rel.x * cfg_.pos_feat_scale;
      feats.at(i, 1) = rel.y * cfg_.pos_feat_scale;
      feats.at(i, 2) = std::cos(s.heading - scn.ego_init.heading);
      feats.at(i, 3) = std::sin(s.heading - scn.ego_init.heading);
      feats.at(i, 4) = s.speed * 0.1;
    }
    Tape::Id emb = t.gelu(t.linear(t.input(feats), t.param(ps, "scorer.emb.w"),
                                   t.param(ps, "scorer.emb.b")));
    Tape::Id pooled = t.mean_rows(emb);
    Tape::Id tok = t.gelu(t.linear(t.input(scn.scene_tokens), t.param(ps, "scorer.tok.w"),
                                   t.param(ps, "scorer.tok.b")));
    Tape::Id q = t.linear(pooled, t.param(ps, "scorer.attn.wq"));
    Tape::Id k = t.linear(tok, t.param(ps, "scorer.attn.wk"));
    Tape::Id v = t.linear(tok, t.param(ps, "scorer.attn.wv"));
    Tape::Id read = t.attention(q, k, v, 1);
    Tape::Id joint = t.concat_cols(pooled, read);
    Tape::Id h = t.gelu(t.linear(joint, t.param(ps, "scorer.mlp.w1"),
                                 t.param(ps, "scorer.mlp.b1")));
    return t.linear(h, t.param(ps, "scorer.mlp.w2"), t.param(ps, "scorer.mlp.b2"));
  }

  std::vector<ScoreVector> score_candidates(const std::vector<Trajectory>& candidates,
                                            const Scenario& scn, ParamStore& ps) const {
    if (candidates.empty()) {
      throw std::invalid_argument("score_candidates: empty candidate list");
    }
    std::vector<ScoreVector> out;
    out.reserve(candidates.size());
    for (const Trajectory& c : candidates) {
      Tape t;
      const Array& raw = t.val(head(t, ps, c, scn));
      ScoreVector sv;
      sv.collision_logit = raw.at(0, 0);
      sv.drivable_logit = raw.at(0, 1);
      sv.progress_estimate = sigmoid(raw.at(0, 2));
      sv.aggregate = aggregate_of(sv.collision_logit, sv.drivable_logit,
                                  sv.progress_estimate);
      out.push_back(sv);
    }
    return out;
  }

 private:
  ScorerConfig cfg_;
  int d_tok_;
};

// argmax of the aggregate; ties break to the lowest index.
inline int select_best(const std::vector<ScoreVector>& scores) {
  if (scores.empty()) throw std::invalid_argument("select_best: empty score list");
  int best = 0;
  for (int i = 1; i < static_cast<int>(scores.size()); ++i) {
    if (scores[static_cast<std::size_t>(i)].aggregate >
        scores[static_cast<std::size_t>(best)].aggregate) {
      best = i;
    }
  }
  return best;
}

// BCE on both logits plus squared error on progress, equally weighted.
// Candidates enter as constants; this trains the scorer head only.
inline Tape::Id scorer_loss(Tape& t, ParamStore& ps, const ScorerModel& model,
                            const std::vector<Trajectory>& candidates,
                            const Scenario& scn, const eval::EvalConfig& ecfg = {}) {
  if (candidates.empty()) throw std::invalid_argument("scorer_loss: empty candidate list");
  std::vector<Tape::Id> heads;
  Array targets(static_cast<int>(candidates.size()), 3);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    heads.push_back(model.head(t, ps, candidates[i], scn));
    const ScorerTargets tg = scorer_targets(candidates[i], scn, ecfg);
    targets.at(static_cast<int>(i), 0) = 1.0 - tg.collides;
    targets.at(static_cast<int>(i), 1) = 1.0 - tg.off_drivable;
    targets.at(static_cast<int>(i), 2) = tg.progress;
  }
  Tape::Id all = t.concat_rows(heads);
  Tape::Id tgt = t.input(targets);
  const int n = static_cast<int>(candidates.size());
  Tape::Id bce_cl = t.bce_with_logits(t.slice_cols(all, 0, 1), t.slice_cols(tgt, 0, 1));
  Tape::Id bce_dr = t.bce_with_logits(t.slice_cols(all, 1, 1), t.slice_cols(tgt, 1, 1));
  Tape::Id prog = t.mse(t.sigmoid(t.slice_cols(all, 2, 1)), t.slice_cols(tgt, 2, 1));
  (void)n;
  return t.add(t.add(bce_cl, bce_dr), prog);
}

}  // namespace chainflow::scorer
