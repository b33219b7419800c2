#include <catch2/catch_amalgamated.hpp>

#include "chainflow/scenario.hpp"
#include "chainflow/scorer.hpp"
#include "helpers.hpp"

using namespace chainflow;
using testutil::close;

namespace {

scorer::ScorerModel small_model(const ScenarioConfig& sc) {
  scorer::ScorerConfig cfg;
  cfg.hidden_dim = 16;
  return scorer::ScorerModel(cfg, sc);
}

Trajectory offset_copy(const Trajectory& t, double dx, double dy) {
  Trajectory o = t;
  for (EgoState& s : o.states) {
    s.x += dx;
    s.y += dy;
  }
  return o;
}

}  // namespace

TEST_CASE("duplicate candidates score identically; permutation permutes", "[scorer]") {
  ScenarioConfig sc;
  scorer::ScorerModel model = small_model(sc);
  ParamStore ps;
  model.init_params(ps, 3);
  Scenario scn = generate_scenario(33, sc);

  Trajectory a = scn.expert;
  Trajectory b = offset_copy(scn.expert, 0.0, 1.0);
  Trajectory c = offset_copy(scn.expert, -1.0, 0.0);

  auto s1 = model.score_candidates({a, b, a, c}, scn, ps);
  CHECK(s1[0].aggregate == s1[2].aggregate);
  CHECK(s1[0].collision_logit == s1[2].collision_logit);

  auto s2 = model.score_candidates({c, a, b}, scn, ps);
  CHECK(s2[0].aggregate == s1[3].aggregate);
  CHECK(s2[1].aggregate == s1[0].aggregate);
  CHECK(s2[2].aggregate == s1[1].aggregate);

  CHECK_THROWS_AS(model.score_candidates({}, scn, ps), std::invalid_argument);
}

TEST_CASE("select_best ties break to the lowest index", "[scorer]") {
  using scorer::ScoreVector;
  auto sv = [](double agg) {
    ScoreVector v;
    v.aggregate = agg;
    return v;
  };
  CHECK(scorer::select_best({sv(0.4)}) == 0);
  CHECK(scorer::select_best({sv(0.2), sv(0.9), sv(0.9)}) == 1);
  CHECK_THROWS_AS(scorer::select_best({}), std::invalid_argument);

  // argmax is invariant under strictly increasing transforms
  std::vector<ScoreVector> raw{sv(0.1), sv(0.7), sv(0.3), sv(0.69)};
  std::vector<ScoreVector> mapped = raw;
  for (auto& v : mapped) v.aggregate = std::exp(3.0 * v.aggregate) + 5.0;
  CHECK(scorer::select_best(raw) == scorer::select_best(mapped));
}

TEST_CASE("scoring is independent across candidates", "[scorer]") {
  ScenarioConfig sc;
  scorer::ScorerModel model = small_model(sc);
  ParamStore ps;
  model.init_params(ps, 4);
  Scenario scn = generate_scenario(44, sc);

  Trajectory a = scn.expert;
  Trajectory b = offset_copy(scn.expert, 2.0, 0.0);
  Trajectory c = offset_copy(scn.expert, 0.0, -2.0);
  auto full = model.score_candidates({a, b, c}, scn, ps);
  auto fewer = model.score_candidates({a, c}, scn, ps);
  CHECK(full[0].aggregate == fewer[0].aggregate);
  CHECK(full[2].aggregate == fewer[1].aggregate);
}

TEST_CASE("scorer_targets ground truth", "[scorer]") {
  ScenarioConfig sc;
  for (std::uint64_t seed : {5ull, 6ull, 7ull}) {
    Scenario scn = generate_scenario(seed, sc);
    scorer::ScorerTargets t = scorer::scorer_targets(scn.expert, scn);
    CHECK(t.collides == 0);
    CHECK(t.off_drivable == 0);
    CHECK(t.progress == 1.0);
  }

  // a trajectory through an obstacle center is labeled colliding
  Scenario scn = generate_scenario(8, sc);
  scn.obstacles.push_back({{scn.expert.states[4].x, scn.expert.states[4].y}, 0.5, {0, 0}});
  scorer::ScorerTargets t = scorer::scorer_targets(scn.expert, scn);
  CHECK(t.collides == 1);
}

TEST_CASE("aggregate formula matches the stated gating", "[scorer]") {
  const double agg = scorer::aggregate_of(2.0, -1.0, 0.8);
  CHECK(close(agg, scorer::sigmoid(2.0) * scorer::sigmoid(-1.0) * (0.5 + 0.5 * 0.8), 1e-15));
}

TEST_CASE("scorer loss gradient passes finite differences", "[scorer][gradcheck]") {
  ScenarioConfig sc;
  sc.horizon_steps = 4;
  scorer::ScorerModel model = small_model(sc);
  ParamStore ps;
  model.init_params(ps, 9);
  Scenario scn = generate_scenario(99, sc);
  Trajectory bad = offset_copy(scn.expert, 0.0, 5.0);

  auto build = [&](Tape& t) {
    return scorer::scorer_loss(t, ps, model, {scn.expert, bad}, scn);
  };
  auto res = testutil::gradcheck(ps, build, 1e-4, 1e-3, 5, 13);
  INFO(res.detail);
  CHECK(res.ok);
}
