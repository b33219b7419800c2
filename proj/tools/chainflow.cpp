// Command-line entry point: dataset generation, two-stage training,
// evaluation arms, single-scenario planning, denoising-step sweeps.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "chainflow/config.hpp"
#include "chainflow/eval.hpp"
#include "chainflow/svg.hpp"

namespace fs = std::filesystem;
using namespace chainflow;

namespace {

// Tracks files created by the running command so a failure never leaves
// partial outputs behind.
class OutputGuard {
 public:
  void track(const std::string& path) { paths_.push_back(path); }
  void release() { paths_.clear(); }
  ~OutputGuard() {
    for (const auto& p : paths_) {
      std::error_code ec;
      fs::remove(p, ec);
    }
  }

 private:
  std::vector<std::string> paths_;
};

struct GlobalOpts {
  std::string config_path;
  std::vector<std::string> overrides;
  int threads = -1;
};

RunConfig resolve_config(const GlobalOpts& g) {
  std::string path = g.config_path;
  if (path.empty()) {
    if (const char* env = std::getenv("CHAINFLOW_CONFIG")) path = env;
  }
  RunConfig cfg = load_config(path, g.overrides);
  if (g.threads >= 0) {
    cfg.threads = g.threads;
    cfg.train_cfg.threads = g.threads;
  }
  return cfg;
}

void echo_config(const RunConfig& cfg, const std::string& dir, OutputGuard& guard) {
  fs::create_directories(dir);
  const std::string cfg_path = dir + "/resolved_config.json";
  guard.track(cfg_path);
  std::ofstream f(cfg_path, std::ios::trunc);
  f << cfg.to_json().dump(2) << "\n";
  // timestamps live only in the sidecar so artifacts stay reproducible
  const auto now = std::chrono::system_clock::now().time_since_epoch();
  nlohmann::json meta = {
      {"wall_clock_unix_ms",
       std::chrono::duration_cast<std::chrono::milliseconds>(now).count()}};
  std::ofstream m(dir + "/run_meta.json", std::ios::trunc);
  m << meta.dump(2) << "\n";
}

ParamStore load_params(const RunConfig& cfg, const std::string& path) {
  ParamStore ps;
  CheckpointInfo info = load_checkpoint(ps, path);
  if (info.config_digest != cfg.model_digest()) {
    throw std::runtime_error("checkpoint '" + path +
                             "' was written under a different model config "
                             "(digest mismatch)");
  }
  return ps;
}

int run_gen_data(const GlobalOpts& g, std::uint64_t seed, int count,
                 const std::string& out) {
  RunConfig cfg = resolve_config(g);
  OutputGuard guard;
  if (out.find('/') != std::string::npos) {
    fs::create_directories(fs::path(out).parent_path());
  }
  guard.track(out);
  Dataset ds = make_dataset(seed, count, cfg.scenario);
  save_dataset(ds, out);
  std::ofstream cf(out + ".config.json", std::ios::trunc);
  cf << cfg.to_json().dump(2) << "\n";
  guard.release();
  std::printf("wrote %zu scenarios to %s\n", ds.scenarios.size(), out.c_str());
  return 0;
}

int run_train_stage1(const GlobalOpts& g, const std::string& data, const std::string& out) {
  RunConfig cfg = resolve_config(g);
  OutputGuard guard;
  echo_config(cfg, out, guard);
  Dataset ds = load_dataset(data, cfg.scenario);
  Pipeline pipe = cfg.make_pipeline();
  ParamStore ps;
  pipe.chain_model.init_params(ps, seed_combine(cfg.train_cfg.seed, "chain"));
  pipe.scorer_model.init_params(ps, seed_combine(cfg.train_cfg.seed, "scorer"));
  guard.track(out + "/train_log.csv");
  guard.track(out + "/stage1.ckpt");
  guard.track(out + "/stage1_last.ckpt");
  train::StepMetrics last =
      train::run_stage1(pipe, ps, ds, cfg.train_cfg, out, cfg.model_digest());
  guard.release();
  std::printf("stage1 done: loss %.6f min_ade %.3f; checkpoint %s/stage1.ckpt\n",
              last.loss_total, last.min_ade, out.c_str());
  return 0;
}

int run_train_stage2(const GlobalOpts& g, const std::string& data,
                     const std::string& stage1_ckpt, const std::string& out) {
  RunConfig cfg = resolve_config(g);
  OutputGuard guard;
  echo_config(cfg, out, guard);
  Dataset ds = load_dataset(data, cfg.scenario);
  Pipeline pipe = cfg.make_pipeline();
  ParamStore ps;
  pipe.flow_model.init_params(ps, seed_combine(cfg.train_cfg.seed, "flow"));
  CheckpointInfo info = load_checkpoint(ps, stage1_ckpt);
  if (info.config_digest != cfg.model_digest()) {
    throw std::runtime_error("checkpoint '" + stage1_ckpt +
                             "' was written under a different model config "
                             "(digest mismatch)");
  }
  guard.track(out + "/train_log.csv");
  guard.track(out + "/stage2.ckpt");
  guard.track(out + "/stage2_last.ckpt");
  train::StepMetrics last =
      train::run_stage2(pipe, ps, ds, cfg.train_cfg, out, cfg.model_digest());
  guard.release();
  std::printf("stage2 done: loss %.6f min_ade %.3f; checkpoint %s/stage2.ckpt\n",
              last.loss_total, last.min_ade, out.c_str());
  return 0;
}

int run_eval(const GlobalOpts& g, const std::string& data, const std::string& ckpt,
             const std::string& ckpt_scene, const std::vector<std::string>& arms,
             const std::string& out) {
  RunConfig cfg = resolve_config(g);
  OutputGuard guard;
  echo_config(cfg, out, guard);
  Dataset ds = load_dataset(data, cfg.scenario);

  std::vector<eval::ArmReport> reports;
  for (const std::string& arm : arms) {
    if (arm == "full" || arm == "ar-only" || arm == "cond-semantic") {
      Pipeline pipe = cfg.make_pipeline();
      ParamStore ps = load_params(cfg, ckpt);
      eval::ArmReport rep = eval::evaluate_arm(
          ds, ps, pipe, arm == "ar-only" ? eval::Arm::ar_only : eval::Arm::full,
          cfg.eval_seed, cfg.threads);
      rep.arm = arm;
      reports.push_back(std::move(rep));
    } else if (arm == "cond-scene") {
      if (ckpt_scene.empty()) {
        throw std::runtime_error("arm 'cond-scene' needs --ckpt-scene");
      }
      RunConfig scfg = cfg;
      scfg.flow_cfg.conditioning_source = flow::CondSource::scene_tokens;
      Pipeline pipe = scfg.make_pipeline();
      ParamStore ps = load_params(scfg, ckpt_scene);
      eval::ArmReport rep =
          eval::evaluate_arm(ds, ps, pipe, eval::Arm::full, scfg.eval_seed, scfg.threads);
      rep.arm = "cond-scene";
      reports.push_back(std::move(rep));
    } else {
      throw std::runtime_error("unknown arm '" + arm +
                               "' (expected full, ar-only, cond-semantic, cond-scene)");
    }
  }
  const std::string report_path = out + "/report.csv";
  guard.track(report_path);
  eval::write_report_csv(reports, report_path);
  guard.release();
  std::fputs(eval::format_summary(reports).c_str(), stdout);
  return 0;
}

int run_plan(const GlobalOpts& g, const std::string& data, const std::string& scenario_id,
             const std::string& ckpt, const std::string& svg_out) {
  RunConfig cfg = resolve_config(g);
  OutputGuard guard;
  Dataset ds = load_dataset(data, cfg.scenario);
  const Scenario* scn = nullptr;
  for (const Scenario& s : ds.scenarios) {
    if (s.id == scenario_id) scn = &s;
  }
  if (!scn) {
    throw std::runtime_error("scenario '" + scenario_id + "' not found in " + data);
  }
  Pipeline pipe = cfg.make_pipeline();
  ParamStore ps = load_params(cfg, ckpt);
  PlannerOutput out = run_planner(*scn, ps, pipe, cfg.eval_seed, true);
  guard.track(svg_out);
  plot_plan(*scn, out, svg_out);
  guard.release();
  const auto score = eval::score_trajectory(out.selected_trajectory, *scn, pipe.eval_cfg);
  std::printf("plan %s: selected mode %d, pdms %.4f; svg %s\n", scenario_id.c_str(),
              out.selected, score.pdms, svg_out.c_str());
  return 0;
}

int run_sweep(const GlobalOpts& g, const std::string& data, const std::string& ckpt,
              const std::string& steps_csv, const std::string& out) {
  RunConfig cfg = resolve_config(g);
  OutputGuard guard;
  echo_config(cfg, out, guard);
  Dataset ds = load_dataset(data, cfg.scenario);

  std::vector<int> steps;
  std::size_t pos = 0;
  while (pos < steps_csv.size()) {
    const std::size_t comma = steps_csv.find(',', pos);
    steps.push_back(std::stoi(steps_csv.substr(pos, comma - pos)));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (steps.empty()) throw std::runtime_error("sweep-steps: no step counts given");

  const std::string csv_path = out + "/sweep.csv";
  guard.track(csv_path);
  std::ofstream f(csv_path, std::ios::trunc);
  f << "n_steps,pdms,nc,dac,ep,ttc,comfort\n";
  for (int n : steps) {
    RunConfig scfg = cfg;
    scfg.flow_cfg.n_infer_steps = n;
    Pipeline pipe = scfg.make_pipeline();
    ParamStore ps = load_params(scfg, ckpt);
    eval::ArmReport rep =
        eval::evaluate_arm(ds, ps, pipe, eval::Arm::full, scfg.eval_seed, scfg.threads);
    char buf[192];
    std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", n, rep.mean.pdms,
                  rep.mean.nc, rep.mean.dac, rep.mean.ep, rep.mean.ttc, rep.mean.comfort);
    f << buf;
    std::printf("n_steps %2d -> pdms %.4f\n", n, rep.mean.pdms);
  }
  f.close();
  guard.release();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"chainflow: K-mode autoregressive proposals refined by residual "
               "diffusion, with scorer-based selection"};
  app.require_subcommand(1);
  app.fallthrough();  // global options remain valid after the subcommand name

  GlobalOpts g;
  app.add_option("--config", g.config_path,
                 "JSON config file (default: $CHAINFLOW_CONFIG when set)");
  app.add_option("--set", g.overrides, "dotted-path config override, e.g. train.seed=3")
      ->take_all();
  app.add_option("--threads", g.threads, "thread cap for all modules (0 = hardware)");

  std::string data, out, ckpt, ckpt_scene, scenario_id, svg_out, steps = "2,4,8,12,16";
  std::uint64_t seed = 0;
  int count = 100;
  std::vector<std::string> arms{"full", "ar-only"};

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic scenario dataset");
  gen->add_option("--seed", seed, "master seed")->capture_default_str();
  gen->add_option("--count", count, "number of scenarios")->capture_default_str();
  gen->add_option("--out", out, "output dataset file (JSON lines)")->required();

  CLI::App* t1 = app.add_subcommand("train-stage1", "train the AR generator + scorer");
  t1->add_option("--data", data, "training dataset")->required();
  t1->add_option("--out", out, "output directory")->required();

  CLI::App* t2 = app.add_subcommand("train-stage2", "train the diffusion refiner + scorer");
  t2->add_option("--data", data, "training dataset")->required();
  t2->add_option("--stage1-ckpt", ckpt, "stage 1 checkpoint")->required();
  t2->add_option("--out", out, "output directory")->required();

  CLI::App* ev = app.add_subcommand("eval", "evaluate checkpoints over a dataset");
  ev->add_option("--data", data, "evaluation dataset")->required();
  ev->add_option("--ckpt", ckpt, "stage 2 checkpoint")->required();
  ev->add_option("--ckpt-scene", ckpt_scene, "scene-token-conditioned checkpoint "
                                             "(for the cond-scene arm)");
  ev->add_option("--arms", arms, "arms: full, ar-only, cond-semantic, cond-scene")
      ->delimiter(',')
      ->capture_default_str();
  ev->add_option("--out", out, "output directory")->required();

  CLI::App* pl = app.add_subcommand("plan", "plan one scenario and emit an SVG");
  pl->add_option("--data", data, "dataset containing the scenario")->required();
  pl->add_option("--scenario-id", scenario_id, "scenario id, e.g. scn-000007")->required();
  pl->add_option("--ckpt", ckpt, "stage 2 checkpoint")->required();
  pl->add_option("--svg-out", svg_out, "output SVG path")->required();

  CLI::App* sw = app.add_subcommand("sweep-steps", "sweep DDIM step counts");
  sw->add_option("--data", data, "evaluation dataset")->required();
  sw->add_option("--ckpt", ckpt, "stage 2 checkpoint")->required();
  sw->add_option("--steps", steps, "comma-separated step counts")->capture_default_str();
  sw->add_option("--out", out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    nlohmann::json err = {{"status", "error"}, {"command", "parse"}, {"message", e.what()}};
    std::fprintf(stderr, "%s\n", err.dump().c_str());
    return 1;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    if (gen->parsed()) return run_gen_data(g, seed, count, out);
    if (t1->parsed()) return run_train_stage1(g, data, out);
    if (t2->parsed()) return run_train_stage2(g, data, ckpt, out);
    if (ev->parsed()) return run_eval(g, data, ckpt, ckpt_scene, arms, out);
    if (pl->parsed()) return run_plan(g, data, scenario_id, ckpt, svg_out);
    if (sw->parsed()) return run_sweep(g, data, ckpt, steps, out);
  } catch (const std::exception& e) {
    nlohmann::json err = {{"status", "error"}, {"command", cmd}, {"message", e.what()}};
    std::fprintf(stderr, "%s\n", err.dump().c_str());
    return 1;
  }
  return 1;
}
