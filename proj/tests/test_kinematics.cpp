#include <catch2/catch_amalgamated.hpp>

#include "chainflow/kinematics.hpp"
#include "chainflow/rng.hpp"
#include "helpers.hpp"

using namespace chainflow;

TEST_CASE("bicycle_step matches the worked examples", "[kinematics]") {
  // zero-control straight line
  EgoState s{0, 0, 0, 10};
  EgoState n = bicycle_step(s, {0, 0}, 0.5);
  CHECK(n.x == 5.0);
  CHECK(n.y == 0.0);
  CHECK(n.heading == 0.0);
  CHECK(n.speed == 10.0);

  // forward-Euler update evaluated by hand:
  // x' = 0 + 10*cos(0)*0.5 = 5, theta' = 0.2*0.5 = 0.1, v' = 10 + 2*0.5 = 11
  n = bicycle_step(s, {2, 0.2}, 0.5);
  CHECK(testutil::close(n.x, 5.0, 1e-12));
  CHECK(testutil::close(n.y, 0.0, 1e-12));
  CHECK(testutil::close(n.heading, 0.1, 1e-12));
  CHECK(testutil::close(n.speed, 11.0, 1e-12));

  // identity in the dt->0 limit
  EgoState s2{3.5, -2.0, 0.7, 6.0};
  n = bicycle_step(s2, {1.0, 0.5}, 1e-9);
  CHECK(testutil::close(n.x, s2.x, 1e-6));
  CHECK(testutil::close(n.y, s2.y, 1e-6));
  CHECK(testutil::close(n.heading, s2.heading, 1e-6));
  CHECK(testutil::close(n.speed, s2.speed, 1e-6));
}

TEST_CASE("bicycle_step rejects non-finite input and bad dt", "[kinematics]") {
  EgoState bad{std::nan(""), 0, 0, 1};
  CHECK_THROWS_AS(bicycle_step(bad, {0, 0}, 0.5), std::domain_error);
  EgoState ok{0, 0, 0, 1};
  ControlInput inf_ctrl{std::numeric_limits<double>::infinity(), 0};
  CHECK_THROWS_AS(bicycle_step(ok, inf_ctrl, 0.5), std::domain_error);
  CHECK_THROWS_AS(bicycle_step(ok, {0, 0}, 0.0), std::invalid_argument);
}

TEST_CASE("rollout_controls basics", "[kinematics]") {
  EgoState start{0, 0, 0, 10};
  std::vector<ControlInput> zeros(2);
  Trajectory t = rollout_controls(start, zeros, 0.5);
  REQUIRE(t.states.size() == 2);
  CHECK(t.states[0].x == 5.0);
  CHECK(t.states[1].x == 10.0);
  CHECK(t.dt == 0.5);

  CHECK_THROWS_AS(rollout_controls(start, {}, 0.5), std::invalid_argument);

  // per-step replay reproduces the rollout exactly
  RngStream rng(42);
  std::vector<ControlInput> ctrl;
  for (int i = 0; i < 8; ++i) ctrl.push_back({rng.uniform(-4, 4), rng.uniform(-1, 1)});
  Trajectory r = rollout_controls(start, ctrl, 0.5);
  EgoState s = start;
  for (std::size_t i = 0; i < ctrl.size(); ++i) {
    s = bicycle_step(s, ctrl[i], 0.5);
    CHECK(s.x == r.states[i].x);
    CHECK(s.y == r.states[i].y);
    CHECK(s.heading == r.states[i].heading);
    CHECK(s.speed == r.states[i].speed);
  }

  // hard braking never yields negative speed
  std::vector<ControlInput> brake(8, ControlInput{-4.0, 0.0});
  Trajectory b = rollout_controls(start, brake, 0.5);
  for (const auto& st : b.states) CHECK(st.speed >= 0.0);
  CHECK(b.states.back().speed == 0.0);
}

TEST_CASE("ade/fde worked examples", "[kinematics]") {
  Trajectory a, b;
  a.states = {{0, 0, 0, 0}, {0, 0, 0, 0}};
  b.states = {{3, 4, 0, 0}, {6, 8, 0, 0}};
  CHECK(testutil::close(ade(a, b), 7.5, 1e-12));
  CHECK(testutil::close(fde(a, b), 10.0, 1e-12));

  CHECK(ade(a, a) == 0.0);
  CHECK(fde(a, a) == 0.0);

  Trajectory c = a;
  for (auto& s : c.states) s.x += 1.0;
  CHECK(testutil::close(ade(c, a), 1.0, 1e-12));
  CHECK(testutil::close(fde(c, a), 1.0, 1e-12));

  Trajectory one;
  one.states = {{0, 0, 0, 0}};
  CHECK_THROWS_AS(ade(one, a), std::invalid_argument);
  CHECK_THROWS_AS(fde(one, a), std::invalid_argument);
}

TEST_CASE("rotational and translational equivariance of rollout", "[kinematics]") {
  RngStream rng(7);
  for (int rep = 0; rep < 200; ++rep) {
    EgoState start{rng.uniform(-20, 20), rng.uniform(-20, 20),
                   rng.uniform(-kPi, kPi), rng.uniform(0, 12)};
    std::vector<ControlInput> ctrl;
    for (int i = 0; i < 6; ++i) ctrl.push_back({rng.uniform(-4, 4), rng.uniform(-1, 1)});
    const double phi = rng.uniform(-kPi, kPi);
    const double c = std::cos(phi), s = std::sin(phi);

    Trajectory base = rollout_controls(start, ctrl, 0.5);

    EgoState rot{c * start.x - s * start.y, s * start.x + c * start.y,
                 wrap_angle(start.heading + phi), start.speed};
    Trajectory rotated = rollout_controls(rot, ctrl, 0.5);
    for (std::size_t i = 0; i < base.states.size(); ++i) {
      const double ex = c * base.states[i].x - s * base.states[i].y;
      const double ey = s * base.states[i].x + c * base.states[i].y;
      CHECK(testutil::close(rotated.states[i].x, ex, 1e-9));
      CHECK(testutil::close(rotated.states[i].y, ey, 1e-9));
      CHECK(std::abs(wrap_angle(rotated.states[i].heading -
                                wrap_angle(base.states[i].heading + phi))) < 1e-9);
      CHECK(rotated.states[i].speed == base.states[i].speed);
    }

    EgoState shifted{start.x + 3.0, start.y - 7.0, start.heading, start.speed};
    Trajectory moved = rollout_controls(shifted, ctrl, 0.5);
    for (std::size_t i = 0; i < base.states.size(); ++i) {
      CHECK(testutil::close(moved.states[i].x, base.states[i].x + 3.0, 1e-9));
      CHECK(testutil::close(moved.states[i].y, base.states[i].y - 7.0, 1e-9));
    }
    // ade/fde invariant under a common shift
    CHECK(testutil::close(ade(moved, base), std::hypot(3.0, 7.0), 1e-9));
  }
}

TEST_CASE("heading stays wrapped and speed stays non-negative", "[kinematics]") {
  RngStream rng(99);
  EgoState s{0, 0, 0, 5};
  for (int i = 0; i < 10000; ++i) {
    ControlInput u{rng.uniform(-4, 4), rng.uniform(-1, 1)};
    s = bicycle_step(s, u, rng.uniform(0.05, 1.0));
    REQUIRE(s.heading > -kPi);
    REQUIRE(s.heading <= kPi);
    REQUIRE(s.speed >= 0.0);
    // keep the walk bounded
    if (std::abs(s.x) > 1e6 || std::abs(s.y) > 1e6) s.x = s.y = 0;
  }
}

TEST_CASE("wrap_angle boundary behavior", "[kinematics]") {
  CHECK(wrap_angle(kPi) == kPi);
  CHECK(wrap_angle(-kPi) == kPi);
  CHECK(testutil::close(wrap_angle(3 * kPi), kPi, 1e-12));
  CHECK(testutil::close(wrap_angle(0.1), 0.1, 1e-15));
  CHECK(testutil::close(wrap_angle(2 * kPi + 0.1), 0.1, 1e-12));
}
