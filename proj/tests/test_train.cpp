#include <catch2/catch_amalgamated.hpp>

#include "chainflow/config.hpp"
#include "chainflow/train.hpp"
#include "helpers.hpp"

using namespace chainflow;
using testutil::close;

namespace {

// Desk-scale-but-tiny pipeline for training unit tests.
RunConfig tiny_cfg() {
  RunConfig cfg;
  cfg.scenario.horizon_steps = 4;
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
  cfg.train_cfg.batch_size = 2;
  cfg.train_cfg.threads = 1;
  return cfg;
}

chain::ProposalSet synthetic_proposals(const Trajectory& expert,
                                       const std::vector<double>& offsets) {
  chain::ProposalSet p;
  for (double off : offsets) {
    Trajectory t = expert;
    for (EgoState& s : t.states) s.x += off;
    p.trajectories.push_back(t);
  }
  return p;
}

}  // namespace

TEST_CASE("lr schedule worked examples", "[train]") {
  train::TrainConfig cfg;
  cfg.base_lr = 2e-4;
  cfg.warmup_frac = 0.10;

  SECTION("reference batch 64 reaches the base rate at warmup end") {
    cfg.batch_size = 64;
    const int total = 1000;
    CHECK(close(train::lr_at(100, total, cfg), 2e-4, 1e-12));
    CHECK(train::lr_at(0, total, cfg) == 0.0);
    CHECK(close(train::lr_at(total, total, cfg), 0.0, 1e-18));
  }
  SECTION("sqrt batch scaling") {
    cfg.batch_size = 16;
    CHECK(close(train::lr_at(100, 1000, cfg), 1e-4, 1e-12));
  }
  SECTION("monotone warmup then monotone decay") {
    cfg.batch_size = 8;
    const int total = 200;
    for (int s = 1; s < 20; ++s) {
      CHECK(train::lr_at(s, total, cfg) >= train::lr_at(s - 1, total, cfg));
    }
    for (int s = 21; s <= total; ++s) {
      CHECK(train::lr_at(s, total, cfg) <= train::lr_at(s - 1, total, cfg));
    }
  }
  SECTION("errors") {
    CHECK_THROWS_AS(train::lr_at(0, 0, cfg), std::invalid_argument);
    CHECK_THROWS_AS(train::lr_at(-1, 10, cfg), std::invalid_argument);
    CHECK_THROWS_AS(train::lr_at(11, 10, cfg), std::invalid_argument);
  }
}

TEST_CASE("wta_assign basics and brute-force agreement", "[train]") {
  Trajectory expert;
  for (int i = 1; i <= 4; ++i) expert.states.push_back({2.0 * i, 0, 0, 4});

  SECTION("single mode returns 0") {
    CHECK(train::wta_assign(synthetic_proposals(expert, {1.0}), expert) == 0);
  }
  SECTION("closer uniform offset wins") {
    CHECK(train::wta_assign(synthetic_proposals(expert, {3.0, 1.0}), expert) == 1);
    CHECK(train::wta_assign(synthetic_proposals(expert, {1.0, 3.0}), expert) == 0);
  }
  SECTION("exact tie breaks to the lowest index") {
    CHECK(train::wta_assign(synthetic_proposals(expert, {2.0, -2.0}), expert) == 0);
  }
  SECTION("random instances match the independent brute force") {
    RngStream rng(61);
    for (int rep = 0; rep < 1000; ++rep) {
      const int T = 2 + static_cast<int>(rng.uniform_int(5));
      const int K = 1 + static_cast<int>(rng.uniform_int(6));
      Trajectory ex;
      for (int i = 0; i < T; ++i)
        ex.states.push_back({rng.uniform(-10, 10), rng.uniform(-10, 10), 0, 0});
      chain::ProposalSet props;
      for (int k = 0; k < K; ++k) {
        Trajectory p;
        for (int i = 0; i < T; ++i)
          p.states.push_back({rng.uniform(-10, 10), rng.uniform(-10, 10), 0, 0});
        props.trajectories.push_back(p);
      }
      // brute force via a different formula path: per-step hypot, sqrt total
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (int k = 0; k < K; ++k) {
        double acc = 0.0;
        for (int i = 0; i < T; ++i) {
          acc += std::pow(std::hypot(props.trajectories[k].states[i].x - ex.states[i].x,
                                     props.trajectories[k].states[i].y - ex.states[i].y),
                          2.0);
        }
        const double d = std::sqrt(acc);
        if (d < best_d) {
          best_d = d;
          best = k;
        }
      }
      REQUIRE(train::wta_assign(props, ex) == best);
    }
  }
  SECTION("invariant under a common rigid translation") {
    RngStream rng(62);
    for (int rep = 0; rep < 100; ++rep) {
      chain::ProposalSet props = synthetic_proposals(
          expert, {rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3)});
      const int base = train::wta_assign(props, expert);
      const double dx = rng.uniform(-20, 20), dy = rng.uniform(-20, 20);
      Trajectory ex2 = expert;
      for (EgoState& s : ex2.states) {
        s.x += dx;
        s.y += dy;
      }
      chain::ProposalSet moved = props;
      for (Trajectory& t : moved.trajectories) {
        for (EgoState& s : t.states) {
          s.x += dx;
          s.y += dy;
        }
      }
      CHECK(train::wta_assign(moved, ex2) == base);
    }
  }
}

TEST_CASE("stage-1 trajectory loss gates on the selected mode", "[train]") {
  Trajectory expert;
  for (int i = 1; i <= 4; ++i) expert.states.push_back({2.0 * i, 0, 0, 4});

  chain::ProposalSet props = synthetic_proposals(expert, {0.0, 5.0});
  CHECK(train::loss_traj_stage1_value(props, expert) == 0.0);

  // improving a non-selected mode that stays non-selected leaves it unchanged
  chain::ProposalSet p2 = synthetic_proposals(expert, {1.0, 5.0});
  chain::ProposalSet p3 = synthetic_proposals(expert, {1.0, 4.0});
  CHECK(train::loss_traj_stage1_value(p2, expert) ==
        train::loss_traj_stage1_value(p3, expert));

  // equals the brute-force min over per-mode MSE on random instances
  RngStream rng(63);
  for (int rep = 0; rep < 200; ++rep) {
    chain::ProposalSet pr = synthetic_proposals(
        expert, {rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3)});
    double best = std::numeric_limits<double>::infinity();
    for (const Trajectory& t : pr.trajectories) {
      double mse = 0.0;
      for (std::size_t i = 0; i < t.states.size(); ++i) {
        const double dx = t.states[i].x - expert.states[i].x;
        const double dy = t.states[i].y - expert.states[i].y;
        mse += dx * dx + dy * dy;
      }
      mse /= static_cast<double>(2 * t.states.size());
      best = std::min(best, mse);
    }
    CHECK(close(train::loss_traj_stage1_value(pr, expert), best, 1e-12));
  }
}

TEST_CASE("loss_diff worked cases", "[train]") {
  RunConfig cfg = tiny_cfg();
  Pipeline pipe = cfg.make_pipeline();
  ParamStore ps;
  pipe.init_params(ps, 5);
  Scenario scn = generate_scenario(55, cfg.scenario);

  const int T = cfg.scenario.horizon_steps;
  RngStream rng(56);
  Array eps(T, 2);
  for (double& v : eps.data) v = rng.normal();
  flow::ResidualSample target = flow::residual_target(scn.expert, scn.expert);
  flow::NoisySample z = flow::q_sample(target.residual, 300, eps, pipe.schedule);

  // untrained (zero-head) predictor: loss equals mean ||eps||^2
  Tape t;
  train::DiffBatchItem item{z.z, 300, eps, scn.ego_init, &scn.semantic_ctx, &scn.expert};
  Tape::Id l = train::loss_diff(t, ps, pipe.flow_model, {item});
  double mean_sq = 0.0;
  for (double v : eps.data) mean_sq += v * v;
  mean_sq /= static_cast<double>(eps.data.size());
  CHECK(close(t.scalar(l), mean_sq, 1e-12));

  // oracle injection: eps_hat == eps -> 0 (checked via the mse identity)
  Tape t2;
  Tape::Id zero = t2.mse(t2.input(eps), t2.input(eps));
  CHECK(t2.scalar(zero) == 0.0);
}

TEST_CASE("uniform timestep sampling covers every decile", "[train]") {
  RngStream rng = RngStream::derived(0, "stage2", 0, 0, 0);
  const int n = 1000;
  std::vector<int> decile(10, 0);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) {
    const int t = 1 + static_cast<int>(rng.uniform_int(n));
    REQUIRE(t >= 1);
    REQUIRE(t <= n);
    decile[static_cast<std::size_t>((t - 1) * 10 / n)]++;
  }
  for (int d = 0; d < 10; ++d) {
    const double frac = decile[static_cast<std::size_t>(d)] / static_cast<double>(draws);
    CHECK(frac > 0.09);
    CHECK(frac < 0.11);
  }
}

TEST_CASE("stage2 loss decomposition and frozen chain", "[train]") {
  RunConfig cfg = tiny_cfg();
  Pipeline pipe = cfg.make_pipeline();
  ParamStore ps;
  pipe.init_params(ps, 7);
  Dataset ds;
  ds.T = cfg.scenario.horizon_steps;
  ds.dt = cfg.scenario.dt;
  for (int i = 0; i < 2; ++i) {
    ds.scenarios.push_back(generate_scenario(seed_combine(70, "d", i), cfg.scenario));
  }
  std::vector<const Scenario*> batch{&ds.scenarios[0], &ds.scenarios[1]};

  SECTION("lambda3 = lambda4 = 0 leaves exactly the weighted diffusion term") {
    train::TrainConfig tc = cfg.train_cfg;
    tc.weights.lambda3 = 0.0;
    tc.weights.lambda4 = 0.0;
    train::StepMetrics m = train::stage2_step(pipe, ps, batch, tc, 1e-4, 0, 0, 0);
    CHECK(m.loss_total == tc.weights.lambda2 * m.loss_diff);
  }

  SECTION("chain parameters never move in stage II") {
    std::vector<Array> before;
    for (const auto& n : ps.names_with_prefix("chain.")) before.push_back(ps.value(n));
    train::TrainConfig tc = cfg.train_cfg;
    for (int s = 0; s < 3; ++s) {
      train::stage2_step(pipe, ps, batch, tc, 1e-3, s, 0, s);
    }
    std::size_t idx = 0;
    for (const auto& n : ps.names_with_prefix("chain.")) {
      const Array& now = ps.value(n);
      for (std::size_t i = 0; i < now.data.size(); ++i) {
        REQUIRE(now.data[i] == before[idx].data[i]);
      }
      ++idx;
    }
  }

  SECTION("zeroed lambdas cut every gradient they gate") {
    train::TrainConfig tc = cfg.train_cfg;
    tc.weights = {0.0, 0.0, 0.0, 0.0};
    tc.weight_decay = 0.0;
    std::vector<Array> before;
    for (const auto& n : ps.names()) before.push_back(ps.value(n));

    // stage II: every term is lambda-weighted, so nothing moves
    train::stage2_step(pipe, ps, batch, tc, 1e-3, 0, 0, 0);
    std::size_t idx = 0;
    for (const auto& n : ps.names()) {
      const Array& now = ps.value(n);
      const Array& b = before[static_cast<std::size_t>(idx)];
      for (std::size_t i = 0; i < now.data.size(); ++i) REQUIRE(now.data[i] == b.data[i]);
      ++idx;
    }

    // stage I: the unweighted trajectory term still trains the chain, but
    // a zero lambda1 leaves the scorer untouched
    train::stage1_step(pipe, ps, batch, tc, 1e-3, 1);
    idx = 0;
    for (const auto& n : ps.names()) {
      if (n.rfind("scorer.", 0) == 0) {
        const Array& now = ps.value(n);
        const Array& b = before[static_cast<std::size_t>(idx)];
        for (std::size_t i = 0; i < now.data.size(); ++i) REQUIRE(now.data[i] == b.data[i]);
      }
      ++idx;
    }
  }

  SECTION("metrics are bit-reproducible under a fixed seed") {
    RunConfig cfg2 = tiny_cfg();
    Pipeline pipe2 = cfg2.make_pipeline();
    ParamStore psA, psB;
    pipe2.init_params(psA, 11);
    pipe2.init_params(psB, 11);
    train::TrainConfig tc = cfg2.train_cfg;
    train::StepMetrics a = train::stage2_step(pipe2, psA, batch, tc, 1e-4, 0, 0, 0);
    train::StepMetrics b = train::stage2_step(pipe2, psB, batch, tc, 1e-4, 0, 0, 0);
    CHECK(a.loss_total == b.loss_total);
    CHECK(a.loss_diff == b.loss_diff);
    CHECK(a.loss_traj == b.loss_traj);
    CHECK(a.loss_scorer == b.loss_scorer);
    // and thread count does not change the result
    train::TrainConfig tc2 = tc;
    tc2.threads = 2;
    ParamStore psC;
    pipe2.init_params(psC, 11);
    train::StepMetrics c = train::stage2_step(pipe2, psC, batch, tc2, 1e-4, 0, 0, 0);
    CHECK(c.loss_total == a.loss_total);
    for (const auto& n : psA.names()) {
      const Array& va = psA.value(n);
      const Array& vc = psC.value(n);
      for (std::size_t i = 0; i < va.data.size(); ++i) REQUIRE(va.data[i] == vc.data[i]);
    }
  }
}

TEST_CASE("one small-lr step decreases the loss on a frozen batch", "[train][slow]") {
  int successes = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    RunConfig cfg = tiny_cfg();
    cfg.train_cfg.seed = seed;
    Pipeline pipe = cfg.make_pipeline();
    ParamStore ps;
    pipe.init_params(ps, seed_combine(seed, "p"));
    Scenario scn = generate_scenario(seed_combine(81, "desc", seed), cfg.scenario);
    std::vector<const Scenario*> batch{&scn};
    train::TrainConfig tc = cfg.train_cfg;
    tc.weight_decay = 0.0;

    train::StepMetrics first = train::stage1_step(pipe, ps, batch, tc, 3e-4, 0);
    // recompute the loss on the same batch after the update
    Tape t;
    chain::ChainRollout ro = pipe.chain_model.rollout(t, ps, scn);
    Tape::Id l_traj = train::loss_traj_stage1(t, ro, scn.expert);
    Tape::Id l_scorer = scorer::scorer_loss(t, ps, pipe.scorer_model,
                                            ro.proposals.trajectories, scn, pipe.eval_cfg);
    const double after =
        t.scalar(t.add(l_traj, t.scale(l_scorer, tc.weights.lambda1)));
    if (after < first.loss_total) ++successes;
  }
  CHECK(successes >= 9);
}

TEST_CASE("stage2 descent smoke test", "[train][slow]") {
  int successes = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    RunConfig cfg = tiny_cfg();
    cfg.train_cfg.seed = seed;
    Pipeline pipe = cfg.make_pipeline();
    ParamStore ps;
    pipe.init_params(ps, seed_combine(seed, "p2"));
    Scenario scn = generate_scenario(seed_combine(82, "desc2", seed), cfg.scenario);
    std::vector<const Scenario*> batch{&scn};
    train::TrainConfig tc = cfg.train_cfg;
    tc.weight_decay = 0.0;

    // same (epoch, step) keys so both calls see the identical diffusion draw
    train::StepMetrics first = train::stage2_step(pipe, ps, batch, tc, 2e-4, 0, 0, 0);
    ParamStore& updated = ps;
    train::TrainConfig probe = tc;
    probe.clip_norm = 0.0;
    // recompute without stepping by using a zero learning-rate... adamw
    // requires lr > 0, so measure via a second step's pre-update loss
    train::StepMetrics second = train::stage2_step(pipe, updated, batch, probe, 1e-12, 1, 0, 0);
    if (second.loss_total < first.loss_total) ++successes;
  }
  CHECK(successes >= 9);
}
