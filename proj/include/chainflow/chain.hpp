#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "chainflow/geometry.hpp"
#include "chainflow/kinematics.hpp"
#include "chainflow/scenario.hpp"
#include "chainflow/tensor.hpp"

namespace chainflow::chain {

struct ChainConfig {
  int K = 6;
  int T = 8;
  int hidden_dim = 128;
  int n_tok_layers = 2;
  int query_dim = 32;
  int attn_dim = 64;
  int ego_embed_dim = 32;
  double feat_scale = 0.1;  // meters -> feature units
};

// K trajectory hypotheses plus the final recurrent state of each mode.
struct ProposalSet {
  std::vector<Trajectory> trajectories;
  std::vector<Array> mode_embeddings;  // [1 x hidden_dim] each
};

// Tape handles produced by a rollout; waypoint nodes stay live so losses
// can flow back into the rollout.
struct ChainRollout {
  ProposalSet proposals;
  std::vector<Tape::Id> mode_xy;      // [T x 2] node per mode
  std::vector<Tape::Id> mode_hidden;  // [1 x hidden] node per mode
  std::vector<std::vector<ControlInput>> controls;
};

// Autoregressive generator: K learnable queries share one recurrent
// control predictor; every step reads the scene tokens through attention,
// updates a gated recurrent state, squashes a 2-way control head and
// advances the bicycle transition on the tape.
class ChainModel {
 public:
  ChainModel(const ChainConfig& cfg, const ScenarioConfig& scn_cfg,
             const ControlLimits& limits)
      : cfg_(cfg), d_tok_(scn_cfg.d_tok), limits_(limits) {
    if (cfg_.K < 1 || cfg_.T < 1) {
      throw std::invalid_argument("ChainConfig: K and T must be >= 1");
    }
  }

  const ChainConfig& config() const { return cfg_; }

  // Registers every chain parameter; queries use a 0.02-sigma normal,
  // weights Xavier-normal, biases zero.
  void init_params(ParamStore& ps, std::uint64_t seed) const {
    auto mat = [&](const std::string& name, int r, int c) {
      RngStream rng = RngStream::derived(seed, "init", name);
      const double sigma = std::sqrt(2.0 / static_cast<double>(r + c));
      ps.create(name, Array::randn(r, c, rng, sigma));
    };
    auto vec = [&](const std::string& name, int c) { ps.create(name, Array::zeros(1, c)); };

    for (int k = 0; k < cfg_.K; ++k) {
      RngStream rng = RngStream::derived(seed, "init", "chain.query", k);
      ps.create(query_name(k), Array::randn(1, cfg_.query_dim, rng, 0.02));
    }
    int in_dim = d_tok_;
    for (int l = 0; l < cfg_.n_tok_layers; ++l) {
      mat("chain.tok." + std::to_string(l) + ".w", in_dim, cfg_.hidden_dim);
      vec("chain.tok." + std::to_string(l) + ".b", cfg_.hidden_dim);
      in_dim = cfg_.hidden_dim;
    }
    mat("chain.attn.wq", cfg_.hidden_dim, cfg_.attn_dim);
    mat("chain.attn.wk", cfg_.hidden_dim, cfg_.attn_dim);
    mat("chain.attn.wv", cfg_.hidden_dim, cfg_.attn_dim);
    mat("chain.ego.w", 5, cfg_.ego_embed_dim);
    vec("chain.ego.b", cfg_.ego_embed_dim);
    mat("chain.h0.w", cfg_.query_dim + cfg_.ego_embed_dim, cfg_.hidden_dim);
    vec("chain.h0.b", cfg_.hidden_dim);
    const int gi = gru_input_dim();
    mat("chain.gru.wr", cfg_.hidden_dim + gi, cfg_.hidden_dim);
    vec("chain.gru.br", cfg_.hidden_dim);
    mat("chain.gru.wz", cfg_.hidden_dim + gi, cfg_.hidden_dim);
    vec("chain.gru.bz", cfg_.hidden_dim);
    mat("chain.gru.wn_in", gi, cfg_.hidden_dim);
    vec("chain.gru.bn_in", cfg_.hidden_dim);
    mat("chain.gru.wn_h", cfg_.hidden_dim, cfg_.hidden_dim);
    mat("chain.head.w", cfg_.hidden_dim, 2);
    vec("chain.head.b", 2);
  }

  std::string query_name(int k) const { return "chain.query." + std::to_string(k); }

  // Full AR rollout for all K modes. `token_override`, when non-null, maps
  // step index -> token array for that step (supports causality probes);
  // by default every step reads the scenario's own tokens.
  ChainRollout rollout(Tape& t, ParamStore& ps, const Scenario& scn,
                       const std::vector<const Array*>* token_override = nullptr) const {
    const EgoState& ego = scn.ego_init;
    const double c0 = std::cos(ego.heading), s0 = std::sin(ego.heading);

    Tape::Id enc = -1, keys = -1, vals = -1;
    if (!token_override) {
      enc = encode_tokens(t, ps, scn.scene_tokens);
      keys = t.linear(enc, t.param(ps, "chain.attn.wk"));
      vals = t.linear(enc, t.param(ps, "chain.attn.wv"));
    }

    // shared initial ego embedding (local frame: position 0, heading 0)
    Array feats0 = Array::row({0.0, 0.0, 1.0, 0.0, ego.speed * cfg_.feat_scale});
    Tape::Id ego_emb = t.gelu(
        t.linear(t.input(feats0), t.param(ps, "chain.ego.w"), t.param(ps, "chain.ego.b")));

    struct Mode {
      Tape::Id hidden, x, y, heading, speed;
      std::vector<Tape::Id> pos_rows;
      Trajectory traj;
      std::vector<ControlInput> ctrl;
    };
    std::vector<Mode> modes(static_cast<std::size_t>(cfg_.K));
    for (int k = 0; k < cfg_.K; ++k) {
      Mode& m = modes[static_cast<std::size_t>(k)];
      Tape::Id q = t.param(ps, query_name(k));
      m.hidden = t.tanh_op(t.linear(t.concat_cols(q, ego_emb), t.param(ps, "chain.h0.w"),
                                    t.param(ps, "chain.h0.b")));
      m.x = t.input(Array::scalar(ego.x));
      m.y = t.input(Array::scalar(ego.y));
      m.heading = t.input(Array::scalar(ego.heading));
      m.speed = t.input(Array::scalar(ego.speed));
      m.traj.dt = scn.expert.dt > 0 ? scn.expert.dt : 0.5;
    }

    for (int step = 0; step < cfg_.T; ++step) {
      if (token_override) {
        const Array* tok = (*token_override)[static_cast<std::size_t>(step)];
        enc = encode_tokens(t, ps, *tok);
        keys = t.linear(enc, t.param(ps, "chain.attn.wk"));
        vals = t.linear(enc, t.param(ps, "chain.attn.wv"));
      }
      for (Mode& m : modes) {
        // ego features in the initial frame
        Tape::Id dx = t.scale(t.add(t.scale(m.x, c0), t.scale(m.y, s0)),
                              cfg_.feat_scale);
        Tape::Id dy = t.scale(t.add(t.scale(m.x, -s0), t.scale(m.y, c0)),
                              cfg_.feat_scale);
        // subtract the (constant) projected origin
        const double ox = (c0 * ego.x + s0 * ego.y) * cfg_.feat_scale;
        const double oy = (-s0 * ego.x + c0 * ego.y) * cfg_.feat_scale;
        Tape::Id fx = t.add(dx, t.input(Array::scalar(-ox)));
        Tape::Id fy = t.add(dy, t.input(Array::scalar(-oy)));
        Tape::Id relh = t.add(m.heading, t.input(Array::scalar(-ego.heading)));
        Tape::Id feats = t.concat_cols(
            t.concat_cols(t.concat_cols(fx, fy),
                          t.concat_cols(t.cos_op(relh), t.sin_op(relh))),
            t.scale(m.speed, cfg_.feat_scale));

        // one attention read of the scene tokens
        Tape::Id q = t.linear(m.hidden, t.param(ps, "chain.attn.wq"));
        Tape::Id read = t.attention(q, keys, vals, 1);
        Tape::Id inp = t.concat_cols(read, feats);

        // gated recurrent update
        Tape::Id hx = t.concat_cols(m.hidden, inp);
        Tape::Id r = t.sigmoid(
            t.linear(hx, t.param(ps, "chain.gru.wr"), t.param(ps, "chain.gru.br")));
        Tape::Id z = t.sigmoid(
            t.linear(hx, t.param(ps, "chain.gru.wz"), t.param(ps, "chain.gru.bz")));
        Tape::Id n = t.tanh_op(
            t.add(t.linear(inp, t.param(ps, "chain.gru.wn_in"), t.param(ps, "chain.gru.bn_in")),
                  t.mul(r, t.linear(m.hidden, t.param(ps, "chain.gru.wn_h")))));
        m.hidden = t.add(m.hidden, t.mul(z, t.sub(n, m.hidden)));

        // squashed 2-way control head
        Tape::Id sq = t.tanh_op(
            t.linear(m.hidden, t.param(ps, "chain.head.w"), t.param(ps, "chain.head.b")));
        Tape::Id a_node = t.scale(t.slice_cols(sq, 0, 1), limits_.a_max);
        Tape::Id w_node = t.scale(t.slice_cols(sq, 1, 1), limits_.omega_max);
        const double a_val = t.scalar(a_node), w_val = t.scalar(w_node);
        if (!std::isfinite(a_val) || !std::isfinite(w_val)) {
          throw std::runtime_error("predict_controls: non-finite activations at step " +
                                   std::to_string(step));
        }

        // bicycle transition on the tape, matching bicycle_step exactly
        const double dt = m.traj.dt;
        Tape::Id nx = t.add(m.x, t.scale(t.mul(m.speed, t.cos_op(m.heading)), dt));
        Tape::Id ny = t.add(m.y, t.scale(t.mul(m.speed, t.sin_op(m.heading)), dt));
        Tape::Id nh = t.wrap_angle_op(t.add(m.heading, t.scale(w_node, dt)));
        Tape::Id nv = t.relu(t.add(m.speed, t.scale(a_node, dt)));
        m.x = nx;
        m.y = ny;
        m.heading = nh;
        m.speed = nv;
        m.pos_rows.push_back(t.concat_cols(m.x, m.y));
        m.ctrl.push_back({a_val, w_val});
        m.traj.states.push_back(
            {t.scalar(m.x), t.scalar(m.y), t.scalar(m.heading), t.scalar(m.speed)});
      }
    }

    ChainRollout out;
    for (Mode& m : modes) {
      out.proposals.trajectories.push_back(std::move(m.traj));
      out.proposals.mode_embeddings.push_back(t.val(m.hidden));
      out.mode_xy.push_back(t.concat_rows(m.pos_rows));
      out.mode_hidden.push_back(m.hidden);
      out.controls.push_back(std::move(m.ctrl));
    }
    return out;
  }

  // Token encoder shared by all steps: n_tok_layers of linear+gelu.
  Tape::Id encode_tokens(Tape& t, ParamStore& ps, const Array& raw_tokens) const {
    Tape::Id h = t.input(raw_tokens);
    for (int l = 0; l < cfg_.n_tok_layers; ++l) {
      const std::string base = "chain.tok." + std::to_string(l);
      h = t.gelu(t.linear(h, t.param(ps, base + ".w"), t.param(ps, base + ".b")));
    }
    return h;
  }

 private:
  int gru_input_dim() const { return cfg_.attn_dim + 5; }

  ChainConfig cfg_;
  int d_tok_;
  ControlLimits limits_;
};

// Value-level convenience matching the module contract; the tape is local.
inline ProposalSet rollout_modes(const Scenario& scn, ParamStore& ps,
                                 const ChainModel& model) {
  Tape t;
  return model.rollout(t, ps, scn).proposals;
}

}  // namespace chainflow::chain
