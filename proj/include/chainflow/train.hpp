#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "chainflow/checkpoint.hpp"
#include "chainflow/parallel.hpp"
#include "chainflow/pipeline.hpp"

namespace chainflow::train {

struct LossWeights {
  double lambda1 = 1.0;   // scorer term, stage I
  double lambda2 = 10.0;  // diffusion term, stage II
  double lambda3 = 20.0;  // trajectory term on refined outputs, stage II
  double lambda4 = 4.0;   // scorer term, stage II
};

struct TrainConfig {
  int batch_size = 8;
  double base_lr = 2e-4;      // at reference batch 64; scaled by sqrt(B/64)
  double warmup_frac = 0.10;
  int epochs_stage1 = 25;
  int epochs_stage2 = 40;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  int threads = 0;
  LossWeights weights;
};

// Linear warmup over the first warmup_frac of steps, then cosine decay
// from the sqrt-scaled peak to zero.
inline double lr_at(int step, int total_steps, const TrainConfig& cfg) {
  if (total_steps <= 0) throw std::invalid_argument("lr_at: total_steps must be > 0");
  if (step < 0 || step > total_steps) {
    throw std::invalid_argument("lr_at: step " + std::to_string(step) + " outside [0, " +
                                std::to_string(total_steps) + "]");
  }
  const double peak = cfg.base_lr * std::sqrt(cfg.batch_size / 64.0);
  const int warm = static_cast<int>(std::floor(cfg.warmup_frac * total_steps));
  if (step < warm) return peak * static_cast<double>(step) / static_cast<double>(warm);
  if (total_steps == warm) return peak;
  const double progress =
      static_cast<double>(step - warm) / static_cast<double>(total_steps - warm);
  return peak * 0.5 * (1.0 + std::cos(kPi * progress));
}

// Index of the proposal with the smallest total L2 waypoint distance to
// the expert; ties break to the lowest index.
inline int wta_assign(const chain::ProposalSet& proposals, const Trajectory& expert) {
  if (proposals.trajectories.empty()) {
    throw std::invalid_argument("wta_assign: empty proposal set");
  }
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int k = 0; k < static_cast<int>(proposals.trajectories.size()); ++k) {
    const Trajectory& p = proposals.trajectories[static_cast<std::size_t>(k)];
    detail::check_same_length(p, expert, "wta_assign");
    double d = 0.0;
    for (std::size_t i = 0; i < p.states.size(); ++i) {
      const double dx = p.states[i].x - expert.states[i].x;
      const double dy = p.states[i].y - expert.states[i].y;
      d += dx * dx + dy * dy;
    }
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

inline Array trajectory_xy(const Trajectory& t) {
  Array xy(static_cast<int>(t.states.size()), 2);
  for (int i = 0; i < xy.rows(); ++i) {
    xy.at(i, 0) = t.states[static_cast<std::size_t>(i)].x;
    xy.at(i, 1) = t.states[static_cast<std::size_t>(i)].y;
  }
  return xy;
}

// Mean squared waypoint error of the WTA-selected mode; gradients flow
// only into that mode's rollout.
inline Tape::Id loss_traj_stage1(Tape& t, const chain::ChainRollout& rollout,
                                 const Trajectory& expert) {
  const int k = wta_assign(rollout.proposals, expert);
  return t.mse(rollout.mode_xy[static_cast<std::size_t>(k)], t.input(trajectory_xy(expert)));
}

inline double loss_traj_stage1_value(const chain::ProposalSet& proposals,
                                     const Trajectory& expert) {
  const int k = wta_assign(proposals, expert);
  const Trajectory& p = proposals.trajectories[static_cast<std::size_t>(k)];
  double s = 0.0;
  for (std::size_t i = 0; i < p.states.size(); ++i) {
    const double dx = p.states[i].x - expert.states[i].x;
    const double dy = p.states[i].y - expert.states[i].y;
    s += dx * dx + dy * dy;
  }
  return s / static_cast<double>(2 * p.states.size());
}

// One diffusion-supervision batch entry, built only from the WTA-selected
// proposal of its scenario.
struct DiffBatchItem {
  Array z;
  int t = 0;
  Array eps;
  EgoState ego;
  const Array* conditioning = nullptr;
  const Trajectory* proposal = nullptr;
};

// || eps - eps_theta ||^2 averaged over the batch.
inline Tape::Id loss_diff(Tape& t, ParamStore& ps, const flow::FlowModel& model,
                          const std::vector<DiffBatchItem>& batch) {
  if (batch.empty()) throw std::invalid_argument("loss_diff: empty batch");
  std::vector<Tape::Id> preds, targets;
  for (const DiffBatchItem& item : batch) {
    preds.push_back(model.eps_predict(t, ps, t.input(item.z), item.t, item.ego,
                                      *item.conditioning, *item.proposal));
    targets.push_back(t.input(item.eps));
  }
  return t.mse(t.concat_rows(preds), t.concat_rows(targets));
}

struct StepMetrics {
  double loss_total = 0.0;
  double loss_traj = 0.0;
  double loss_diff = 0.0;
  double loss_scorer = 0.0;
  double min_ade = 0.0;
  double lr = 0.0;
};

namespace detail_train {

inline void check_finite_loss(double loss, int global_step) {
  if (!std::isfinite(loss)) {
    throw std::runtime_error("training diverged: non-finite loss at step " +
                             std::to_string(global_step));
  }
}

// Deterministic reduction: per-sample gradient maps are summed in sample
// order regardless of how threads interleaved.
inline void reduce_and_step(ParamStore& ps, std::vector<GradMap>& sinks,
                            const std::vector<std::string>& names, double inv_batch,
                            double lr, const TrainConfig& cfg) {
  ps.zero_grads();
  for (GradMap& gm : sinks) accumulate_grads(ps, gm, inv_batch);
  const double norm = ps.grad_norm(names);
  if (cfg.clip_norm > 0.0 && norm > cfg.clip_norm) {
    ps.scale_grads(names, cfg.clip_norm / norm);
  }
  AdamWConfig acfg;
  acfg.lr = lr;
  acfg.weight_decay = cfg.weight_decay;
  adamw_step(ps, names, acfg);
}

}  // namespace detail_train

// Stage I: chain + scorer, WTA trajectory supervision.
// loss = L_traj + lambda1 * L_scorer
inline StepMetrics stage1_step(const Pipeline& pipe, ParamStore& ps,
                               const std::vector<const Scenario*>& batch,
                               const TrainConfig& cfg, double lr, int global_step) {
  const int B = static_cast<int>(batch.size());
  std::vector<GradMap> sinks(static_cast<std::size_t>(B));
  std::vector<StepMetrics> locals(static_cast<std::size_t>(B));

  parallel_for(B, cfg.threads, [&](int i) {
    const Scenario& scn = *batch[static_cast<std::size_t>(i)];
    Tape t;
    chain::ChainRollout ro = pipe.chain_model.rollout(t, ps, scn);
    Tape::Id l_traj = loss_traj_stage1(t, ro, scn.expert);
    Tape::Id l_scorer = scorer::scorer_loss(t, ps, pipe.scorer_model,
                                            ro.proposals.trajectories, scn, pipe.eval_cfg);
    Tape::Id loss = t.add(l_traj, t.scale(l_scorer, cfg.weights.lambda1));
    t.backward(loss, &sinks[static_cast<std::size_t>(i)]);

    StepMetrics& m = locals[static_cast<std::size_t>(i)];
    m.loss_traj = t.scalar(l_traj);
    m.loss_scorer = t.scalar(l_scorer);
    m.loss_total = t.scalar(loss);
    double best = std::numeric_limits<double>::infinity();
    for (const Trajectory& p : ro.proposals.trajectories) {
      best = std::min(best, ade(p, scn.expert));
    }
    m.min_ade = best;
  });

  StepMetrics out;
  for (const StepMetrics& m : locals) {
    out.loss_total += m.loss_total / B;
    out.loss_traj += m.loss_traj / B;
    out.loss_scorer += m.loss_scorer / B;
    out.min_ade += m.min_ade / B;
  }
  detail_train::check_finite_loss(out.loss_total, global_step);
  out.lr = lr;

  std::vector<std::string> names = ps.names_with_prefix("chain.");
  for (const auto& n : ps.names_with_prefix("scorer.")) names.push_back(n);
  detail_train::reduce_and_step(ps, sinks, names, 1.0 / B, lr, cfg);
  return out;
}

// Stage II: flow + scorer on frozen chain rollouts. Per scenario: WTA
// assignment on the raw proposals, one (t, eps) draw for the diffusion
// loss, a differentiable short DDIM refinement of the selected mode for
// the trajectory loss, and scorer supervision on all refined candidates.
// loss = lambda2 * L_diff + lambda3 * L_traj + lambda4 * L_scorer
inline StepMetrics stage2_step(const Pipeline& pipe, ParamStore& ps,
                               const std::vector<const Scenario*>& batch,
                               const TrainConfig& cfg, double lr, int global_step,
                               int epoch, int step_in_epoch) {
  const int B = static_cast<int>(batch.size());
  const int T = pipe.scn_cfg.horizon_steps;
  std::vector<GradMap> sinks(static_cast<std::size_t>(B));
  std::vector<StepMetrics> locals(static_cast<std::size_t>(B));

  parallel_for(B, cfg.threads, [&](int i) {
    const Scenario& scn = *batch[static_cast<std::size_t>(i)];
    const Array& cond = pipe.conditioning(scn);

    // frozen chain: proposals are plain values on a scratch tape
    chain::ProposalSet props = chain::rollout_modes(scn, ps, pipe.chain_model);
    const int K = static_cast<int>(props.trajectories.size());
    const int kstar = wta_assign(props, scn.expert);

    std::vector<Trajectory> eff(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k) {
      Trajectory scratch;
      eff[static_cast<std::size_t>(k)] = flow::effective_proposal(
          pipe.flow_cfg.space, props.trajectories[static_cast<std::size_t>(k)], scratch);
    }
    const Trajectory& eff_k = eff[static_cast<std::size_t>(kstar)];

    // asymmetric WTA: diffusion supervision only in the selected mode
    RngStream draw = RngStream::derived(cfg.seed, "stage2", epoch, step_in_epoch, i);
    const int tdraw =
        1 + static_cast<int>(draw.uniform_int(
                static_cast<std::uint64_t>(pipe.schedule.n_train_steps)));
    Array eps(T, 2);
    for (double& v : eps.data) v = draw.normal();
    const flow::ResidualSample target =
        flow::residual_target(scn.expert, eff_k, kstar);
    const flow::NoisySample noisy = flow::q_sample(target.residual, tdraw, eps,
                                                   pipe.schedule);

    Tape t;
    DiffBatchItem item{noisy.z, tdraw, eps, scn.ego_init, &cond, &eff_k};
    Tape::Id l_diff = loss_diff(t, ps, pipe.flow_model, {item});

    // differentiable refinement of the selected mode
    flow::NoisePredictor pred = [&](Tape& tape, Tape::Id z, int step_t) {
      return pipe.flow_model.eps_predict(tape, ps, z, step_t, scn.ego_init, cond, eff_k);
    };
    Array z0(T, 2);
    RngStream zdraw = RngStream::derived(cfg.seed, "stage2z", epoch, step_in_epoch, i, kstar);
    for (double& v : z0.data) v = zdraw.normal();
    Tape::Id resid = flow::ddim_reverse(t, pred, pipe.schedule,
                                        pipe.flow_cfg.n_infer_steps, t.input(z0));
    Tape::Id refined_xy = t.add(resid, t.input(trajectory_xy(eff_k)));
    Tape::Id l_traj = t.mse(refined_xy, t.input(trajectory_xy(scn.expert)));

    // scorer supervision on all refined candidates (values only)
    std::vector<Trajectory> candidates(static_cast<std::size_t>(K));
    candidates[static_cast<std::size_t>(kstar)] =
        flow::trajectory_from_positions(t.val(refined_xy), scn.ego_init, scn.expert.dt);
    for (int k = 0; k < K; ++k) {
      if (k == kstar) continue;
      RngStream kdraw = RngStream::derived(cfg.seed, "stage2z", epoch, step_in_epoch, i, k);
      candidates[static_cast<std::size_t>(k)] =
          flow::ddim_refine(eff[static_cast<std::size_t>(k)], scn.ego_init, cond, ps,
                            pipe.flow_model, pipe.schedule, pipe.flow_cfg.n_infer_steps,
                            kdraw);
    }
    Tape::Id l_scorer =
        scorer::scorer_loss(t, ps, pipe.scorer_model, candidates, scn, pipe.eval_cfg);

    Tape::Id loss = t.add(
        t.add(t.scale(l_diff, cfg.weights.lambda2), t.scale(l_traj, cfg.weights.lambda3)),
        t.scale(l_scorer, cfg.weights.lambda4));
    t.backward(loss, &sinks[static_cast<std::size_t>(i)]);

    StepMetrics& m = locals[static_cast<std::size_t>(i)];
    m.loss_diff = t.scalar(l_diff);
    m.loss_traj = t.scalar(l_traj);
    m.loss_scorer = t.scalar(l_scorer);
    m.loss_total = t.scalar(loss);
    double best = std::numeric_limits<double>::infinity();
    for (const Trajectory& c : candidates) best = std::min(best, ade(c, scn.expert));
    m.min_ade = best;
  });

  StepMetrics out;
  for (const StepMetrics& m : locals) {
    out.loss_total += m.loss_total / B;
    out.loss_traj += m.loss_traj / B;
    out.loss_diff += m.loss_diff / B;
    out.loss_scorer += m.loss_scorer / B;
    out.min_ade += m.min_ade / B;
  }
  detail_train::check_finite_loss(out.loss_total, global_step);
  out.lr = lr;

  std::vector<std::string> names = ps.names_with_prefix("flow.");
  for (const auto& n : ps.names_with_prefix("scorer.")) names.push_back(n);
  detail_train::reduce_and_step(ps, sinks, names, 1.0 / B, lr, cfg);
  return out;
}

// ---------------------------------------------------------------------------
// Epoch loops, CSV logging, per-epoch checkpoints
// ---------------------------------------------------------------------------

class TrainLogger {
 public:
  explicit TrainLogger(const std::string& path) : out_(path, std::ios::app) {
    if (!out_) throw std::runtime_error("TrainLogger: cannot open " + path);
    out_.seekp(0, std::ios::end);
    if (out_.tellp() == 0) {
      out_ << "stage,epoch,step,lr,loss_total,loss_traj,loss_diff,loss_scorer,"
              "min_ade_train\n";
    }
  }

  void log(int stage, int epoch, int step, const StepMetrics& m) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%d,%d,%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", stage,
                  epoch, step, m.lr, m.loss_total, m.loss_traj, m.loss_diff,
                  m.loss_scorer, m.min_ade);
    out_ << buf;
    out_.flush();
  }

 private:
  std::ofstream out_;
};

using StepFn = std::function<StepMetrics(const std::vector<const Scenario*>&, double lr,
                                         int global_step, int epoch, int step_in_epoch)>;

inline StepMetrics run_epochs(const Dataset& data, const TrainConfig& cfg, int epochs,
                              int stage, const StepFn& step_fn, TrainLogger* logger,
                              const std::function<void(int)>& on_epoch_end) {
  const int N = static_cast<int>(data.scenarios.size());
  if (N == 0) throw std::invalid_argument("training: empty dataset");
  const int steps_per_epoch = (N + cfg.batch_size - 1) / cfg.batch_size;
  const int total_steps = epochs * steps_per_epoch;
  StepMetrics last;
  int global_step = 0;
  std::vector<int> order(static_cast<std::size_t>(N));
  for (int i = 0; i < N; ++i) order[static_cast<std::size_t>(i)] = i;

  for (int epoch = 0; epoch < epochs; ++epoch) {
    RngStream shuffle = RngStream::derived(cfg.seed, "shuffle", stage, epoch);
    shuffle.shuffle(order);
    for (int s = 0; s < steps_per_epoch; ++s) {
      std::vector<const Scenario*> batch;
      for (int b = s * cfg.batch_size; b < std::min(N, (s + 1) * cfg.batch_size); ++b) {
        batch.push_back(&data.scenarios[static_cast<std::size_t>(order[static_cast<std::size_t>(b)])]);
      }
      const double lr = lr_at(global_step, total_steps, cfg);
      last = step_fn(batch, lr, global_step, epoch, s);
      if (logger) logger->log(stage, epoch, s, last);
      ++global_step;
    }
    if (on_epoch_end) on_epoch_end(epoch);
  }
  return last;
}

inline StepMetrics run_stage1(const Pipeline& pipe, ParamStore& ps, const Dataset& data,
                              const TrainConfig& cfg, const std::string& out_dir,
                              std::uint64_t config_digest) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  TrainLogger logger(out_dir + "/train_log.csv");
  StepFn fn = [&](const std::vector<const Scenario*>& batch, double lr, int g, int e, int s) {
    (void)e;
    (void)s;
    return stage1_step(pipe, ps, batch, cfg, lr, g);
  };
  StepMetrics last = run_epochs(data, cfg, cfg.epochs_stage1, 1, fn, &logger, [&](int) {
    save_checkpoint(ps, out_dir + "/stage1_last.ckpt", config_digest);
  });
  save_checkpoint(ps, out_dir + "/stage1.ckpt", config_digest);
  return last;
}

inline StepMetrics run_stage2(const Pipeline& pipe, ParamStore& ps, const Dataset& data,
                              const TrainConfig& cfg, const std::string& out_dir,
                              std::uint64_t config_digest) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  TrainLogger logger(out_dir + "/train_log.csv");
  StepFn fn = [&](const std::vector<const Scenario*>& batch, double lr, int g, int e, int s) {
    return stage2_step(pipe, ps, batch, cfg, lr, g, e, s);
  };
  StepMetrics last = run_epochs(data, cfg, cfg.epochs_stage2, 2, fn, &logger, [&](int) {
    save_checkpoint(ps, out_dir + "/stage2_last.ckpt", config_digest);
  });
  save_checkpoint(ps, out_dir + "/stage2.ckpt", config_digest);
  return last;
}

}  // namespace chainflow::train
