#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "chainflow/chain.hpp"
#include "chainflow/eval.hpp"
#include "chainflow/flow.hpp"
#include "chainflow/pipeline.hpp"
#include "chainflow/scorer.hpp"
#include "chainflow/train.hpp"

namespace chainflow {

// Single merged configuration for every module; loads from one JSON file
// with dotted-path command-line overrides. Unknown keys are rejected.
struct RunConfig {
  ScenarioConfig scenario;
  chain::ChainConfig chain_cfg;
  flow::FlowConfig flow_cfg;
  scorer::ScorerConfig scorer_cfg;
  eval::EvalConfig eval_cfg;
  train::TrainConfig train_cfg;
  int threads = 0;
  std::uint64_t eval_seed = 1234;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["T"] = scenario.horizon_steps;
    j["dt"] = scenario.dt;
    j["threads"] = threads;
    j["eval_seed"] = eval_seed;
    j["kinematics"] = {{"a_max", scenario.limits.a_max},
                       {"omega_max", scenario.limits.omega_max}};
    j["scenario"] = {{"n_tok", scenario.n_tok},
                     {"d_tok", scenario.d_tok},
                     {"n_sem", scenario.n_sem},
                     {"d_sem", scenario.d_sem},
                     {"codebook_seed", scenario.codebook_seed},
                     {"max_obstacles", scenario.max_obstacles},
                     {"moving_obstacles", scenario.moving_obstacles},
                     {"maneuver_mix", scenario.maneuver_mix},
                     {"max_expert_retries", scenario.max_expert_retries},
                     {"world_offset_range", scenario.world_offset_range}};
    j["chain"] = {{"K", chain_cfg.K},
                  {"hidden_dim", chain_cfg.hidden_dim},
                  {"n_tok_layers", chain_cfg.n_tok_layers},
                  {"query_dim", chain_cfg.query_dim},
                  {"attn_dim", chain_cfg.attn_dim}};
    j["flow"] = {{"n_blocks", flow_cfg.n_blocks},
                 {"model_dim", flow_cfg.model_dim},
                 {"n_heads", flow_cfg.n_heads},
                 {"mlp_ratio", flow_cfg.mlp_ratio},
                 {"conditioning_source", flow::cond_source_name(flow_cfg.conditioning_source)},
                 {"space", flow::flow_space_name(flow_cfg.space)},
                 {"n_train_steps", flow_cfg.n_train_steps},
                 {"n_infer_steps", flow_cfg.n_infer_steps}};
    j["scorer"] = {{"hidden_dim", scorer_cfg.hidden_dim}};
    j["eval"] = {{"ego_radius", eval_cfg.ego_radius},
                 {"nc_substeps", eval_cfg.nc_substeps},
                 {"ttc_horizon", eval_cfg.ttc_horizon},
                 {"comfort_accel", eval_cfg.comfort_accel},
                 {"comfort_jerk", eval_cfg.comfort_jerk},
                 {"comfort_yaw_accel", eval_cfg.comfort_yaw_accel}};
    j["train"] = {{"batch_size", train_cfg.batch_size},
                  {"base_lr", train_cfg.base_lr},
                  {"warmup_frac", train_cfg.warmup_frac},
                  {"epochs_stage1", train_cfg.epochs_stage1},
                  {"epochs_stage2", train_cfg.epochs_stage2},
                  {"weight_decay", train_cfg.weight_decay},
                  {"clip_norm", train_cfg.clip_norm},
                  {"seed", train_cfg.seed},
                  {"lambda1", train_cfg.weights.lambda1},
                  {"lambda2", train_cfg.weights.lambda2},
                  {"lambda3", train_cfg.weights.lambda3},
                  {"lambda4", train_cfg.weights.lambda4}};
    return j;
  }

  // Digest over the model-relevant subset: checkpoints made under one
  // model shape refuse to load into another. Inference-time knobs
  // (denoising step count, thread cap, eval seed) stay out of it.
  std::uint64_t model_digest() const {
    nlohmann::json j = to_json();
    j.erase("train");
    j.erase("threads");
    j.erase("eval_seed");
    j["flow"].erase("n_infer_steps");
    return fnv1a64(j.dump());
  }

  Pipeline make_pipeline() const {
    return Pipeline::make(scenario, chain_cfg, flow_cfg, scorer_cfg, eval_cfg);
  }
};

namespace detail_cfg {

template <class T>
void read(const nlohmann::json& j, const std::string& key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void reject_unknown(const nlohmann::json& j, const std::vector<std::string>& known,
                           const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const auto& k : known)
      if (it.key() == k) ok = true;
    if (!ok) {
      throw std::invalid_argument("config: unknown key '" + where + it.key() + "'");
    }
  }
}

}  // namespace detail_cfg

inline void apply_json(RunConfig& cfg, const nlohmann::json& j) {
  using detail_cfg::read;
  detail_cfg::reject_unknown(
      j, {"T", "dt", "threads", "eval_seed", "kinematics", "scenario", "chain", "flow",
          "scorer", "eval", "train"},
      "");
  read(j, "T", cfg.scenario.horizon_steps);
  read(j, "dt", cfg.scenario.dt);
  read(j, "threads", cfg.threads);
  read(j, "eval_seed", cfg.eval_seed);
  if (j.contains("kinematics")) {
    const auto& k = j.at("kinematics");
    detail_cfg::reject_unknown(k, {"a_max", "omega_max"}, "kinematics.");
    read(k, "a_max", cfg.scenario.limits.a_max);
    read(k, "omega_max", cfg.scenario.limits.omega_max);
  }
  if (j.contains("scenario")) {
    const auto& s = j.at("scenario");
    detail_cfg::reject_unknown(s,
                               {"n_tok", "d_tok", "n_sem", "d_sem", "codebook_seed",
                                "max_obstacles", "moving_obstacles", "maneuver_mix",
                                "max_expert_retries", "world_offset_range"},
                               "scenario.");
    read(s, "n_tok", cfg.scenario.n_tok);
    read(s, "d_tok", cfg.scenario.d_tok);
    read(s, "n_sem", cfg.scenario.n_sem);
    read(s, "d_sem", cfg.scenario.d_sem);
    read(s, "codebook_seed", cfg.scenario.codebook_seed);
    read(s, "max_obstacles", cfg.scenario.max_obstacles);
    read(s, "moving_obstacles", cfg.scenario.moving_obstacles);
    read(s, "maneuver_mix", cfg.scenario.maneuver_mix);
    read(s, "max_expert_retries", cfg.scenario.max_expert_retries);
    read(s, "world_offset_range", cfg.scenario.world_offset_range);
  }
  if (j.contains("chain")) {
    const auto& c = j.at("chain");
    detail_cfg::reject_unknown(c, {"K", "hidden_dim", "n_tok_layers", "query_dim", "attn_dim"},
                               "chain.");
    read(c, "K", cfg.chain_cfg.K);
    read(c, "hidden_dim", cfg.chain_cfg.hidden_dim);
    read(c, "n_tok_layers", cfg.chain_cfg.n_tok_layers);
    read(c, "query_dim", cfg.chain_cfg.query_dim);
    read(c, "attn_dim", cfg.chain_cfg.attn_dim);
  }
  if (j.contains("flow")) {
    const auto& f = j.at("flow");
    detail_cfg::reject_unknown(f,
                               {"n_blocks", "model_dim", "n_heads", "mlp_ratio",
                                "conditioning_source", "space", "n_train_steps",
                                "n_infer_steps"},
                               "flow.");
    read(f, "n_blocks", cfg.flow_cfg.n_blocks);
    read(f, "model_dim", cfg.flow_cfg.model_dim);
    read(f, "n_heads", cfg.flow_cfg.n_heads);
    read(f, "mlp_ratio", cfg.flow_cfg.mlp_ratio);
    if (f.contains("conditioning_source")) {
      const std::string v = f.at("conditioning_source").get<std::string>();
      if (v == "semantic_ctx")
        cfg.flow_cfg.conditioning_source = flow::CondSource::semantic_ctx;
      else if (v == "scene_tokens")
        cfg.flow_cfg.conditioning_source = flow::CondSource::scene_tokens;
      else
        throw std::invalid_argument("config: flow.conditioning_source must be "
                                    "'semantic_ctx' or 'scene_tokens', got '" + v + "'");
    }
    if (f.contains("space")) {
      const std::string v = f.at("space").get<std::string>();
      if (v == "residual")
        cfg.flow_cfg.space = flow::FlowSpace::residual;
      else if (v == "trajectory")
        cfg.flow_cfg.space = flow::FlowSpace::trajectory;
      else
        throw std::invalid_argument("config: flow.space must be 'residual' or "
                                    "'trajectory', got '" + v + "'");
    }
    read(f, "n_train_steps", cfg.flow_cfg.n_train_steps);
    read(f, "n_infer_steps", cfg.flow_cfg.n_infer_steps);
  }
  if (j.contains("scorer")) {
    const auto& s = j.at("scorer");
    detail_cfg::reject_unknown(s, {"hidden_dim"}, "scorer.");
    read(s, "hidden_dim", cfg.scorer_cfg.hidden_dim);
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    detail_cfg::reject_unknown(e,
                               {"ego_radius", "nc_substeps", "ttc_horizon", "comfort_accel",
                                "comfort_jerk", "comfort_yaw_accel"},
                               "eval.");
    read(e, "ego_radius", cfg.eval_cfg.ego_radius);
    read(e, "nc_substeps", cfg.eval_cfg.nc_substeps);
    read(e, "ttc_horizon", cfg.eval_cfg.ttc_horizon);
    read(e, "comfort_accel", cfg.eval_cfg.comfort_accel);
    read(e, "comfort_jerk", cfg.eval_cfg.comfort_jerk);
    read(e, "comfort_yaw_accel", cfg.eval_cfg.comfort_yaw_accel);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    detail_cfg::reject_unknown(t,
                               {"batch_size", "base_lr", "warmup_frac", "epochs_stage1",
                                "epochs_stage2", "weight_decay", "clip_norm", "seed",
                                "lambda1", "lambda2", "lambda3", "lambda4"},
                               "train.");
    read(t, "batch_size", cfg.train_cfg.batch_size);
    read(t, "base_lr", cfg.train_cfg.base_lr);
    read(t, "warmup_frac", cfg.train_cfg.warmup_frac);
    read(t, "epochs_stage1", cfg.train_cfg.epochs_stage1);
    read(t, "epochs_stage2", cfg.train_cfg.epochs_stage2);
    read(t, "weight_decay", cfg.train_cfg.weight_decay);
    read(t, "clip_norm", cfg.train_cfg.clip_norm);
    read(t, "seed", cfg.train_cfg.seed);
    read(t, "lambda1", cfg.train_cfg.weights.lambda1);
    read(t, "lambda2", cfg.train_cfg.weights.lambda2);
    read(t, "lambda3", cfg.train_cfg.weights.lambda3);
    read(t, "lambda4", cfg.train_cfg.weights.lambda4);
  }
  if (!(cfg.train_cfg.warmup_frac >= 0.0 && cfg.train_cfg.warmup_frac < 1.0)) {
    throw std::invalid_argument("config: train.warmup_frac must be in [0, 1)");
  }
}

// Applies one "dotted.path=value" override; the value parses as JSON when
// possible and falls back to a plain string.
inline void apply_override(nlohmann::json& j, const std::string& spec) {
  const std::size_t eq = spec.find('=');
  if (eq == std::string::npos) {
    throw std::invalid_argument("override '" + spec + "' is not of the form key=value");
  }
  const std::string path = spec.substr(0, eq);
  const std::string raw = spec.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    value = raw;
  }
  nlohmann::json* cur = &j;
  std::size_t pos = 0;
  for (;;) {
    const std::size_t dot = path.find('.', pos);
    const std::string key = path.substr(pos, dot - pos);
    if (key.empty()) throw std::invalid_argument("override '" + spec + "': empty key");
    if (dot == std::string::npos) {
      (*cur)[key] = value;
      return;
    }
    cur = &(*cur)[key];
    pos = dot + 1;
  }
}

inline RunConfig load_config(const std::string& path_or_empty,
                             const std::vector<std::string>& overrides) {
  nlohmann::json j = nlohmann::json::object();
  if (!path_or_empty.empty()) {
    std::ifstream f(path_or_empty);
    if (!f) throw std::runtime_error("config: cannot open " + path_or_empty);
    f >> j;
  }
  for (const auto& o : overrides) apply_override(j, o);
  RunConfig cfg;
  apply_json(cfg, j);
  cfg.train_cfg.threads = cfg.threads;
  return cfg;
}

}  // namespace chainflow
