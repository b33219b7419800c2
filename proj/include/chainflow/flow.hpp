#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "chainflow/geometry.hpp"
#include "chainflow/kinematics.hpp"
#include "chainflow/rng.hpp"
#include "chainflow/scenario.hpp"
#include "chainflow/tensor.hpp"

namespace chainflow::flow {

// ---------------------------------------------------------------------------
// Noise schedule
// ---------------------------------------------------------------------------

constexpr double kAlphaBarFloor = 1e-5;

// Discrete forward-diffusion schedule; alpha_bar[0] == 1 exactly and the
// sequence is strictly decreasing.
struct NoiseSchedule {
  int n_train_steps = 1000;
  std::vector<double> alpha_bar;  // size n_train_steps + 1

  double ab(int t) const {
    if (t < 0 || t > n_train_steps) {
      throw std::out_of_range("NoiseSchedule: t " + std::to_string(t) +
                              " outside [0, " + std::to_string(n_train_steps) + "]");
    }
    return alpha_bar[static_cast<std::size_t>(t)];
  }
};

// Squared-cosine schedule (offset s = 0.008), clipped to [1e-5, 1]. The
// tail is nudged so strict monotonicity survives the clipping.
inline NoiseSchedule build_schedule(int n_train_steps = 1000) {
  if (n_train_steps < 1) {
    throw std::invalid_argument("build_schedule: n_train_steps must be >= 1");
  }
  NoiseSchedule sched;
  sched.n_train_steps = n_train_steps;
  sched.alpha_bar.resize(static_cast<std::size_t>(n_train_steps) + 1);
  const double s = 0.008;
  auto f = [&](double t) {
    const double u = (t / n_train_steps + s) / (1.0 + s) * (kPi / 2.0);
    const double c = std::cos(u);
    return c * c;
  };
  const double denom = f(0.0);
  for (int t = 0; t <= n_train_steps; ++t) {
    double v = f(static_cast<double>(t)) / denom;
    v = std::min(1.0, std::max(kAlphaBarFloor, v));
    sched.alpha_bar[static_cast<std::size_t>(t)] = v;
  }
  for (int t = n_train_steps - 1; t >= 0; --t) {
    auto& cur = sched.alpha_bar[static_cast<std::size_t>(t)];
    const double next = sched.alpha_bar[static_cast<std::size_t>(t) + 1];
    if (cur <= next) cur = next * (1.0 + 1e-9);
  }
  sched.alpha_bar[0] = 1.0;
  return sched;
}

// ---------------------------------------------------------------------------
// Residual construction (forward process)
// ---------------------------------------------------------------------------

struct ResidualSample {
  Array residual;  // [T x 2]
  int mode_index = 0;
};

struct NoisySample {
  Array z;    // [T x 2]
  int t = 0;
  Array eps;  // the injected noise
};

// Per-waypoint (x, y) offsets from proposal to expert.
inline ResidualSample residual_target(const Trajectory& expert, const Trajectory& proposal,
                                      int mode_index = 0) {
  detail::check_same_length(expert, proposal, "residual_target");
  ResidualSample r;
  r.mode_index = mode_index;
  r.residual = Array(static_cast<int>(expert.states.size()), 2);
  for (std::size_t i = 0; i < expert.states.size(); ++i) {
    r.residual.at(static_cast<int>(i), 0) = expert.states[i].x - proposal.states[i].x;
    r.residual.at(static_cast<int>(i), 1) = expert.states[i].y - proposal.states[i].y;
  }
  return r;
}

// z = sqrt(ab_t) * x + sqrt(1 - ab_t) * eps; the caller supplies eps so the
// draw stays reproducible.
inline NoisySample q_sample(const Array& residual, int t, const Array& eps,
                            const NoiseSchedule& sched) {
  if (!residual.same_shape(eps)) {
    throw std::invalid_argument("q_sample: residual " + shape_str(residual) +
                                " vs eps " + shape_str(eps));
  }
  const double ab = sched.ab(t);  // range-checks t
  NoisySample out;
  out.t = t;
  out.eps = eps;
  out.z = residual;
  const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
  for (std::size_t i = 0; i < out.z.data.size(); ++i) {
    out.z.data[i] = sa * residual.data[i] + sb * eps.data[i];
  }
  return out;
}

// x0 = (z - sqrt(1 - ab_t) * eps_hat) / sqrt(ab_t)
inline Array x0_from_eps(const Array& z, int t, const Array& eps_hat,
                         const NoiseSchedule& sched) {
  if (!z.same_shape(eps_hat)) {
    throw std::invalid_argument("x0_from_eps: z " + shape_str(z) + " vs eps_hat " +
                                shape_str(eps_hat));
  }
  const double ab = sched.ab(t);
  if (ab < kAlphaBarFloor) {
    throw std::domain_error("x0_from_eps: alpha_bar(" + std::to_string(t) +
                            ") below the clip floor");
  }
  Array x0 = z;
  const double sb = std::sqrt(1.0 - ab), inv = 1.0 / std::sqrt(ab);
  for (std::size_t i = 0; i < x0.data.size(); ++i) {
    x0.data[i] = (z.data[i] - sb * eps_hat.data[i]) * inv;
  }
  return x0;
}

// ---------------------------------------------------------------------------
// Model configuration
// ---------------------------------------------------------------------------

enum class CondSource { semantic_ctx, scene_tokens };
enum class FlowSpace { residual, trajectory };

inline const char* cond_source_name(CondSource c) {
  return c == CondSource::semantic_ctx ? "semantic_ctx" : "scene_tokens";
}
inline const char* flow_space_name(FlowSpace s) {
  return s == FlowSpace::residual ? "residual" : "trajectory";
}

struct FlowConfig {
  int n_blocks = 4;       // 12 matches the reference setting; 4 is desk scale
  int model_dim = 128;
  int n_heads = 4;
  double mlp_ratio = 4.0;
  CondSource conditioning_source = CondSource::semantic_ctx;
  FlowSpace space = FlowSpace::residual;
  int n_train_steps = 1000;
  int n_infer_steps = 4;
  int t_embed_dim = 64;
  double pos_feat_scale = 0.05;
};

inline const Array& conditioning_of(const Scenario& scn, CondSource src) {
  return src == CondSource::semantic_ctx ? scn.semantic_ctx : scn.scene_tokens;
}

// The ablation arm that predicts the trajectory directly reuses the whole
// residual pipeline with a zeroed proposal.
inline Trajectory zero_proposal_like(const Trajectory& proposal) {
  Trajectory z = proposal;
  for (EgoState& s : z.states) s = EgoState{};
  return z;
}

inline const Trajectory& effective_proposal(FlowSpace space, const Trajectory& proposal,
                                            Trajectory& scratch) {
  if (space == FlowSpace::residual) return proposal;
  scratch = zero_proposal_like(proposal);
  return scratch;
}

// ---------------------------------------------------------------------------
// Conditional noise predictor (DiT-style)
// ---------------------------------------------------------------------------

// Transformer over one token per waypoint. The timestep and ego state
// drive adaptive layer-norm modulation in every block; the conditioning
// array enters through cross-attention; the proposal enters as per-token
// input features. Waypoint features are handled in the ego-local frame
// and the predicted noise is rotated back to world coordinates.
class FlowModel {
 public:
  FlowModel(const FlowConfig& cfg, int horizon_steps, int cond_dim)
      : cfg_(cfg), T_(horizon_steps), cond_dim_(cond_dim) {
    if (cfg_.n_blocks < 1) throw std::invalid_argument("FlowConfig: n_blocks must be >= 1");
    if (cfg_.model_dim % cfg_.n_heads != 0) {
      throw std::invalid_argument("FlowConfig: model_dim must divide into n_heads");
    }
  }

  const FlowConfig& config() const { return cfg_; }

  void init_params(ParamStore& ps, std::uint64_t seed) const {
    auto mat = [&](const std::string& name, int r, int c) {
      RngStream rng = RngStream::derived(seed, "init", name);
      const double sigma = std::sqrt(2.0 / static_cast<double>(r + c));
      ps.create(name, Array::randn(r, c, rng, sigma));
    };
    auto zeros = [&](const std::string& name, int r, int c) {
      ps.create(name, Array::zeros(r, c));
    };
    const int C = cfg_.model_dim;
    mat("flow.in.w", 9, C);
    zeros("flow.in.b", 1, C);
    mat("flow.temb.w1", cfg_.t_embed_dim, C);
    zeros("flow.temb.b1", 1, C);
    mat("flow.temb.w2", C, C);
    zeros("flow.temb.b2", 1, C);
    mat("flow.ego.w", 1, C);
    zeros("flow.ego.b", 1, C);
    mat("flow.cond.w", cond_dim_, C);
    zeros("flow.cond.b", 1, C);
    const int mlp_dim = static_cast<int>(C * cfg_.mlp_ratio);
    for (int b = 0; b < cfg_.n_blocks; ++b) {
      const std::string p = "flow.blk" + std::to_string(b) + ".";
      zeros(p + "mod.w", C, 6 * C);  // adaLN modulation starts at identity
      zeros(p + "mod.b", 1, 6 * C);
      mat(p + "attn.wq", C, C);
      zeros(p + "attn.bq", 1, C);
      mat(p + "attn.wk", C, C);
      zeros(p + "attn.bk", 1, C);
      mat(p + "attn.wv", C, C);
      zeros(p + "attn.bv", 1, C);
      mat(p + "attn.wo", C, C);
      zeros(p + "attn.bo", 1, C);
      ps.create(p + "ca.ln.g", Array::full(1, C, 1.0));
      zeros(p + "ca.ln.b", 1, C);
      mat(p + "ca.wq", C, C);
      zeros(p + "ca.bq", 1, C);
      mat(p + "ca.wk", C, C);
      zeros(p + "ca.bk", 1, C);
      mat(p + "ca.wv", C, C);
      zeros(p + "ca.bv", 1, C);
      mat(p + "ca.wo", C, C);
      zeros(p + "ca.bo", 1, C);
      mat(p + "mlp.w1", C, mlp_dim);
      zeros(p + "mlp.b1", 1, mlp_dim);
      mat(p + "mlp.w2", mlp_dim, C);
      zeros(p + "mlp.b2", 1, C);
    }
    zeros("flow.final.mod.w", C, 2 * C);
    zeros("flow.final.mod.b", 1, 2 * C);
    zeros("flow.final.w", C, 2);  // predictor starts at eps_hat == 0
    zeros("flow.final.b", 1, 2);
  }

  // Builds eps_hat [T x 2] on the tape from a [T x 2] noisy-sample node.
  Tape::Id eps_predict(Tape& t, ParamStore& ps, Tape::Id z, int step_t,
                       const EgoState& ego, const Array& conditioning,
                       const Trajectory& proposal) const {
    if (static_cast<int>(proposal.states.size()) != T_) {
      throw std::invalid_argument("eps_predict: proposal length " +
                                  std::to_string(proposal.states.size()) +
                                  " != horizon " + std::to_string(T_));
    }
    if (conditioning.cols() != cond_dim_) {
      throw std::invalid_argument("eps_predict: conditioning " + shape_str(conditioning) +
                                  " does not match configured dim " +
                                  std::to_string(cond_dim_));
    }
    const int C = cfg_.model_dim;
    const double c0 = std::cos(ego.heading), s0 = std::sin(ego.heading);
    const Pose2 frame = ego_pose(ego);

    Array m_in(2, 2), m_out(2, 2);
    m_in.at(0, 0) = c0;  m_in.at(0, 1) = -s0;
    m_in.at(1, 0) = s0;  m_in.at(1, 1) = c0;
    m_out.at(0, 0) = c0; m_out.at(0, 1) = s0;
    m_out.at(1, 0) = -s0; m_out.at(1, 1) = c0;

    Array prop_loc(T_, 2), prop_feat(T_, 5);
    for (int i = 0; i < T_; ++i) {
      const EgoState& s = proposal.states[static_cast<std::size_t>(i)];
      const Vec2 rel = frame.to_local({s.x, s.y});
      prop_loc.at(i, 0) = rel.x;
      prop_loc.at(i, 1) = rel.y;
      prop_feat.at(i, 0) = rel.x * cfg_.pos_feat_scale;
      prop_feat.at(i, 1) = rel.y * cfg_.pos_feat_scale;
      prop_feat.at(i, 2) = std::cos(s.heading - ego.heading);
      prop_feat.at(i, 3) = std::sin(s.heading - ego.heading);
      prop_feat.at(i, 4) = s.speed * 0.1;
    }

    Tape::Id z_loc = t.matmul(z, t.input(m_in));
    Tape::Id abs_feat = t.scale(t.add(z_loc, t.input(prop_loc)), cfg_.pos_feat_scale);
    Tape::Id x_in = t.concat_cols(t.concat_cols(z_loc, abs_feat), t.input(prop_feat));
    Tape::Id x = t.add(t.linear(x_in, t.param(ps, "flow.in.w"), t.param(ps, "flow.in.b")),
                       t.input(positional_encoding()));

    // conditioning vector: timestep embedding + ego speed embedding
    Tape::Id temb = t.linear(t.input(timestep_embedding(step_t)),
                             t.param(ps, "flow.temb.w1"), t.param(ps, "flow.temb.b1"));
    temb = t.mul(temb, t.sigmoid(temb));  // silu
    temb = t.linear(temb, t.param(ps, "flow.temb.w2"), t.param(ps, "flow.temb.b2"));
    Tape::Id ego_emb = t.linear(t.input(Array::row({ego.speed * 0.1})),
                                t.param(ps, "flow.ego.w"), t.param(ps, "flow.ego.b"));
    Tape::Id cvec = t.add(temb, ego_emb);
    Tape::Id c_act = t.mul(cvec, t.sigmoid(cvec));

    Tape::Id cond_tok = t.linear(t.input(conditioning), t.param(ps, "flow.cond.w"),
                                 t.param(ps, "flow.cond.b"));

    for (int b = 0; b < cfg_.n_blocks; ++b) {
      const std::string p = "flow.blk" + std::to_string(b) + ".";
      Tape::Id mod = t.linear(c_act, t.param(ps, p + "mod.w"), t.param(ps, p + "mod.b"));
      Tape::Id sa_scale = t.slice_cols(mod, 0, C);
      Tape::Id sa_shift = t.slice_cols(mod, C, C);
      Tape::Id sa_gate = t.slice_cols(mod, 2 * C, C);
      Tape::Id ml_scale = t.slice_cols(mod, 3 * C, C);
      Tape::Id ml_shift = t.slice_cols(mod, 4 * C, C);
      Tape::Id ml_gate = t.slice_cols(mod, 5 * C, C);

      Tape::Id a_in = t.adaptive_modulate(x, sa_scale, sa_shift);
      Tape::Id q = t.linear(a_in, t.param(ps, p + "attn.wq"), t.param(ps, p + "attn.bq"));
      Tape::Id k = t.linear(a_in, t.param(ps, p + "attn.wk"), t.param(ps, p + "attn.bk"));
      Tape::Id v = t.linear(a_in, t.param(ps, p + "attn.wv"), t.param(ps, p + "attn.bv"));
      Tape::Id att = t.attention(q, k, v, cfg_.n_heads);
      Tape::Id o = t.linear(att, t.param(ps, p + "attn.wo"), t.param(ps, p + "attn.bo"));
      x = t.add(x, t.mul_rowvec(o, sa_gate));

      Tape::Id ca_in = t.layer_norm(x, t.param(ps, p + "ca.ln.g"), t.param(ps, p + "ca.ln.b"));
      Tape::Id cq = t.linear(ca_in, t.param(ps, p + "ca.wq"), t.param(ps, p + "ca.bq"));
      Tape::Id ck = t.linear(cond_tok, t.param(ps, p + "ca.wk"), t.param(ps, p + "ca.bk"));
      Tape::Id cv = t.linear(cond_tok, t.param(ps, p + "ca.wv"), t.param(ps, p + "ca.bv"));
      Tape::Id ca = t.linear(t.attention(cq, ck, cv, cfg_.n_heads),
                             t.param(ps, p + "ca.wo"), t.param(ps, p + "ca.bo"));
      x = t.add(x, ca);

      Tape::Id m_in2 = t.adaptive_modulate(x, ml_scale, ml_shift);
      Tape::Id m = t.linear(
          t.gelu(t.linear(m_in2, t.param(ps, p + "mlp.w1"), t.param(ps, p + "mlp.b1"))),
          t.param(ps, p + "mlp.w2"), t.param(ps, p + "mlp.b2"));
      x = t.add(x, t.mul_rowvec(m, ml_gate));
    }

    Tape::Id fmod = t.linear(c_act, t.param(ps, "flow.final.mod.w"),
                             t.param(ps, "flow.final.mod.b"));
    Tape::Id xf = t.adaptive_modulate(x, t.slice_cols(fmod, 0, C), t.slice_cols(fmod, C, C));
    Tape::Id out_loc = t.linear(xf, t.param(ps, "flow.final.w"), t.param(ps, "flow.final.b"));
    Tape::Id out = t.matmul(out_loc, t.input(m_out));
    if (!t.val(out).finite()) {
      throw std::runtime_error("eps_predict: non-finite activations at t=" +
                               std::to_string(step_t));
    }
    return out;
  }

  // Value-level form of the module contract.
  Array eps_predict_value(ParamStore& ps, const Array& z, int step_t, const EgoState& ego,
                          const Array& conditioning, const Trajectory& proposal) const {
    Tape t;
    return t.val(eps_predict(t, ps, t.input(z), step_t, ego, conditioning, proposal));
  }

  int horizon() const { return T_; }
  int cond_dim() const { return cond_dim_; }

 private:
  Array timestep_embedding(int step_t) const {
    const int half = cfg_.t_embed_dim / 2;
    Array e(1, cfg_.t_embed_dim);
    for (int j = 0; j < half; ++j) {
      const double freq = std::exp(-std::log(10000.0) * j / half);
      e.at(0, j) = std::cos(step_t * freq);
      e.at(0, half + j) = std::sin(step_t * freq);
    }
    return e;
  }

  Array positional_encoding() const {
    Array pe(T_, cfg_.model_dim);
    for (int i = 0; i < T_; ++i) {
      for (int j = 0; j < cfg_.model_dim / 2; ++j) {
        const double freq = std::pow(10000.0, -2.0 * j / cfg_.model_dim);
        pe.at(i, 2 * j) = std::sin(i * freq);
        pe.at(i, 2 * j + 1) = std::cos(i * freq);
      }
    }
    return pe;
  }

  FlowConfig cfg_;
  int T_;
  int cond_dim_;
};

// ---------------------------------------------------------------------------
// DDIM reverse process (deterministic, eta = 0)
// ---------------------------------------------------------------------------

using NoisePredictor = std::function<Tape::Id(Tape&, Tape::Id, int)>;

// n_steps + 1 evenly spaced timesteps from n_train_steps down to 0.
inline std::vector<int> ddim_timesteps(const NoiseSchedule& sched, int n_steps) {
  if (n_steps < 1 || n_steps > sched.n_train_steps) {
    throw std::invalid_argument("ddim: n_steps " + std::to_string(n_steps) +
                                " outside [1, " + std::to_string(sched.n_train_steps) + "]");
  }
  std::vector<int> ts;
  for (int i = 0; i <= n_steps; ++i) {
    ts.push_back(static_cast<int>(
        std::llround(static_cast<double>(sched.n_train_steps) * (n_steps - i) / n_steps)));
  }
  return ts;
}

// Runs the deterministic reverse recursion on the tape and returns the
// final residual node. Each step forms x0 from the predicted noise and
// re-noises to the next grid point with the same prediction.
inline Tape::Id ddim_reverse(Tape& t, const NoisePredictor& predict,
                             const NoiseSchedule& sched, int n_steps, Tape::Id z_init) {
  const std::vector<int> ts = ddim_timesteps(sched, n_steps);
  Tape::Id z = z_init;
  for (int i = 0; i < n_steps; ++i) {
    const int t_cur = ts[static_cast<std::size_t>(i)];
    const int t_next = ts[static_cast<std::size_t>(i) + 1];
    const double ab_cur = sched.ab(t_cur);
    const double ab_next = sched.ab(t_next);
    Tape::Id eps_hat = predict(t, z, t_cur);
    // x0 = (z - sqrt(1-ab)*eps)/sqrt(ab)
    Tape::Id x0 = t.scale(t.add(z, t.scale(eps_hat, -std::sqrt(1.0 - ab_cur))),
                          1.0 / std::sqrt(ab_cur));
    z = t.add(t.scale(x0, std::sqrt(ab_next)), t.scale(eps_hat, std::sqrt(1.0 - ab_next)));
  }
  return z;
}

// Rebuilds full states around refined positions: heading and speed come
// from consecutive position differences (previous point seeds the first).
inline Trajectory trajectory_from_positions(const Array& xy, const EgoState& ego, double dt) {
  Trajectory out;
  out.dt = dt;
  Vec2 prev{ego.x, ego.y};
  double prev_heading = ego.heading;
  for (int i = 0; i < xy.rows(); ++i) {
    const Vec2 cur{xy.at(i, 0), xy.at(i, 1)};
    const Vec2 d = cur - prev;
    const double dist = d.norm();
    EgoState s;
    s.x = cur.x;
    s.y = cur.y;
    s.speed = dist / dt;
    s.heading = dist > 1e-9 ? std::atan2(d.y, d.x) : prev_heading;
    out.states.push_back(s);
    prev = cur;
    prev_heading = s.heading;
  }
  return out;
}

// Full refinement of one proposal: draw z ~ N(0, I) from the caller's
// stream, run the reverse process with the model as predictor, add the
// residual onto the proposal waypoints.
inline Trajectory ddim_refine(const Trajectory& proposal, const EgoState& ego,
                              const Array& conditioning, ParamStore& ps,
                              const FlowModel& model, const NoiseSchedule& sched,
                              int n_steps, RngStream& rng) {
  const int T = static_cast<int>(proposal.states.size());
  Array z0(T, 2);
  for (double& v : z0.data) v = rng.normal();
  Tape t;
  NoisePredictor pred = [&](Tape& tape, Tape::Id z, int step_t) {
    return model.eps_predict(tape, ps, z, step_t, ego, conditioning, proposal);
  };
  Tape::Id residual = ddim_reverse(t, pred, sched, n_steps, t.input(z0));
  Array xy = t.val(residual);
  for (int i = 0; i < T; ++i) {
    xy.at(i, 0) += proposal.states[static_cast<std::size_t>(i)].x;
    xy.at(i, 1) += proposal.states[static_cast<std::size_t>(i)].y;
  }
  return trajectory_from_positions(xy, ego, proposal.dt);
}

}  // namespace chainflow::flow
