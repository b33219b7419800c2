#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "chainflow/config.hpp"
#include "chainflow/eval.hpp"
#include "chainflow/svg.hpp"
#include "helpers.hpp"

using namespace chainflow;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_cfg() {
  RunConfig cfg;
  cfg.chain_cfg.K = 3;
  cfg.chain_cfg.hidden_dim = 16;
  cfg.chain_cfg.query_dim = 8;
  cfg.chain_cfg.attn_dim = 8;
  cfg.chain_cfg.ego_embed_dim = 8;
  cfg.flow_cfg.n_blocks = 2;
  cfg.flow_cfg.model_dim = 16;
  cfg.flow_cfg.n_heads = 2;
  cfg.flow_cfg.mlp_ratio = 2.0;
  cfg.flow_cfg.t_embed_dim = 8;
  cfg.flow_cfg.n_infer_steps = 2;
  cfg.scorer_cfg.hidden_dim = 16;
  cfg.threads = 1;
  cfg.train_cfg.threads = 1;
  return cfg;
}

Dataset tiny_dataset(const ScenarioConfig& sc, int n, std::uint64_t seed) {
  Dataset ds;
  ds.T = sc.horizon_steps;
  ds.dt = sc.dt;
  for (int i = 0; i < n; ++i) {
    ds.scenarios.push_back(generate_scenario(seed_combine(seed, "t", i), sc));
  }
  return ds;
}

}  // namespace

TEST_CASE("planner produces K refined candidates and a selection", "[pipeline]") {
  RunConfig cfg = tiny_cfg();
  Pipeline pipe = cfg.make_pipeline();
  ParamStore ps;
  pipe.init_params(ps, 1);
  Scenario scn = generate_scenario(11, cfg.scenario);

  PlannerOutput out = run_planner(scn, ps, pipe, 42, true);
  CHECK(out.proposals.trajectories.size() == 3);
  CHECK(out.refined.size() == 3);
  CHECK(out.scores.size() == 3);
  CHECK(out.selected >= 0);
  CHECK(out.selected < 3);

  PlannerOutput ar = run_planner(scn, ps, pipe, 42, false);
  CHECK(ar.refined.empty());
  CHECK(ar.scores.size() == 3);
}

TEST_CASE("evaluating the expert itself maxes the gated metrics", "[pipeline]") {
  RunConfig cfg = tiny_cfg();
  Pipeline pipe = cfg.make_pipeline();
  ParamStore ps;
  pipe.init_params(ps, 2);
  Dataset ds = tiny_dataset(cfg.scenario, 12, 22);

  eval::ArmReport rep = eval::evaluate_arm(ds, ps, pipe, eval::Arm::expert_ref, 1, 1);
  CHECK(rep.mean.nc == 1.0);
  CHECK(rep.mean.dac == 1.0);
  CHECK(rep.mean.ep == 1.0);
}

TEST_CASE("evaluation reports are deterministic byte for byte", "[pipeline]") {
  RunConfig cfg = tiny_cfg();
  Pipeline pipe = cfg.make_pipeline();
  ParamStore ps;
  pipe.init_params(ps, 3);
  Dataset ds = tiny_dataset(cfg.scenario, 6, 33);

  const fs::path p1 = fs::temp_directory_path() / "cf_rep1.csv";
  const fs::path p2 = fs::temp_directory_path() / "cf_rep2.csv";
  // different thread counts must not change the artifact
  eval::ArmReport a = eval::evaluate_arm(ds, ps, pipe, eval::Arm::full, 7, 1);
  eval::ArmReport b = eval::evaluate_arm(ds, ps, pipe, eval::Arm::full, 7, 2);
  eval::write_report_csv({a}, p1.string());
  eval::write_report_csv({b}, p2.string());

  std::ifstream f1(p1), f2(p2);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
  CHECK(s1.find("scenario_id,arm,nc,dac,ep,ttc,comfort,pdms") == 0);
  CHECK(s1.find("aggregate,full") != std::string::npos);
  fs::remove(p1);
  fs::remove(p2);
}

TEST_CASE("checkpoint round trip drives identical planner output", "[pipeline]") {
  RunConfig cfg = tiny_cfg();
  Pipeline pipe = cfg.make_pipeline();
  ParamStore ps;
  pipe.init_params(ps, 4);
  Scenario scn = generate_scenario(44, cfg.scenario);
  const fs::path ck = fs::temp_directory_path() / "cf_pipe.ckpt";
  save_checkpoint(ps, ck.string(), cfg.model_digest());

  ParamStore loaded;
  CheckpointInfo info = load_checkpoint(loaded, ck.string());
  CHECK(info.config_digest == cfg.model_digest());

  PlannerOutput a = run_planner(scn, ps, pipe, 5, true);
  PlannerOutput b = run_planner(scn, loaded, pipe, 5, true);
  for (std::size_t i = 0; i < a.selected_trajectory.states.size(); ++i) {
    CHECK(a.selected_trajectory.states[i].x == b.selected_trajectory.states[i].x);
    CHECK(a.selected_trajectory.states[i].y == b.selected_trajectory.states[i].y);
  }
  CHECK(a.selected == b.selected);
  fs::remove(ck);
}

TEST_CASE("config: defaults, file round trip, overrides, unknown keys", "[pipeline][config]") {
  RunConfig def = load_config("", {});
  CHECK(def.scenario.horizon_steps == 8);
  CHECK(def.scenario.dt == 0.5);
  CHECK(def.chain_cfg.K == 6);
  CHECK(def.flow_cfg.n_blocks == 4);
  CHECK(def.flow_cfg.n_infer_steps == 4);
  CHECK(def.flow_cfg.n_train_steps == 1000);
  CHECK(def.train_cfg.weights.lambda1 == 1.0);
  CHECK(def.train_cfg.weights.lambda2 == 10.0);
  CHECK(def.train_cfg.weights.lambda3 == 20.0);
  CHECK(def.train_cfg.weights.lambda4 == 4.0);
  CHECK(def.train_cfg.base_lr == 2e-4);
  CHECK(def.train_cfg.batch_size == 8);
  CHECK(def.train_cfg.epochs_stage1 == 25);
  CHECK(def.train_cfg.epochs_stage2 == 40);

  RunConfig ov = load_config("", {"chain.K=4", "flow.space=trajectory",
                                  "train.epochs_stage1=2", "flow.conditioning_source=scene_tokens"});
  CHECK(ov.chain_cfg.K == 4);
  CHECK(ov.flow_cfg.space == flow::FlowSpace::trajectory);
  CHECK(ov.train_cfg.epochs_stage1 == 2);
  CHECK(ov.flow_cfg.conditioning_source == flow::CondSource::scene_tokens);

  CHECK_THROWS_WITH(load_config("", {"chain.XYZ=1"}),
                    Catch::Matchers::ContainsSubstring("unknown key"));
  CHECK_THROWS_WITH(load_config("", {"flow.space=weird"}),
                    Catch::Matchers::ContainsSubstring("flow.space"));

  // digest covers the model, not the training plan
  RunConfig a = load_config("", {});
  RunConfig b = load_config("", {"train.epochs_stage2=3"});
  RunConfig c = load_config("", {"flow.conditioning_source=scene_tokens"});
  CHECK(a.model_digest() == b.model_digest());
  CHECK(a.model_digest() != c.model_digest());

  // config file round trip
  const fs::path cfg_path = fs::temp_directory_path() / "cf_cfg.json";
  {
    std::ofstream f(cfg_path);
    f << a.to_json().dump(2);
  }
  RunConfig back = load_config(cfg_path.string(), {});
  CHECK(back.model_digest() == a.model_digest());
  fs::remove(cfg_path);
}

TEST_CASE("svg plan output contains every layer", "[pipeline][svg]") {
  RunConfig cfg = tiny_cfg();
  Pipeline pipe = cfg.make_pipeline();
  ParamStore ps;
  pipe.init_params(ps, 6);
  Scenario scn = generate_scenario(666, cfg.scenario);
  PlannerOutput out = run_planner(scn, ps, pipe, 1, true);

  const fs::path svg = fs::temp_directory_path() / "cf_plan.svg";
  plot_plan(scn, out, svg.string());
  std::ifstream f(svg);
  std::string body((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  CHECK(body.find("<svg") == 0);
  CHECK(body.find("#2e8b2e") != std::string::npos);  // expert stroke
  CHECK(body.find("#5b8ac5") != std::string::npos);  // proposals
  CHECK(body.find("#7a4fb0") != std::string::npos);  // refined
  CHECK(body.find("#e07b00") != std::string::npos);  // selected
  CHECK(body.rfind("</svg>\n") == body.size() - 7);
  fs::remove(svg);
}
