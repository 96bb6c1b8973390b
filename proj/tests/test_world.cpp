#include "doctest.h"

#include <algorithm>
#include <numeric>

#include "socialgf/errors.hpp"
#include "socialgf/world.hpp"

using namespace socialgf;
using namespace socialgf::world;

namespace {

std::vector<ActionVector> zero_actions(const WorldState& s) {
  return std::vector<ActionVector>(s.agents().size());
}

std::vector<ScenarioConfig> all_scenarios() {
  return {ScenarioConfig::grassland(2, 2), ScenarioConfig::grassland(4, 8),
          ScenarioConfig::vanilla_nav(3), ScenarioConfig::color_nav(2),
          ScenarioConfig::team_nav(2, 3), ScenarioConfig::team_nav(3, 5)};
}

// Brute-force success: try every injective agent->landmark assignment per group.
bool brute_assignment(const std::vector<EntityState>& es, std::vector<std::size_t> ag,
                      const std::vector<std::size_t>& lm) {
  if (lm.size() > ag.size()) return false;
  std::sort(ag.begin(), ag.end());
  do {
    bool ok = true;
    for (std::size_t k = 0; k < lm.size() && ok; ++k) {
      const auto d = es[ag[k]].position - es[lm[k]].position;
      ok = d.norm() < es[ag[k]].radius + es[lm[k]].radius;
    }
    if (ok) return true;
  } while (std::next_permutation(ag.begin(), ag.end()));
  return false;
}

// Naive pairwise scan used as the reference for detect_events.
std::vector<Event> oracle_events(const WorldState& s) {
  const auto& es = s.entities;
  const auto n = es.size();
  auto touch = [&](std::size_t i, std::size_t j) {
    const double dx = es[i].position.x - es[j].position.x;
    const double dy = es[i].position.y - es[j].position.y;
    return std::sqrt(dx * dx + dy * dy) < es[i].radius + es[j].radius;
  };
  std::vector<Event> out;
  const auto sc = s.config.scenario;
  if (sc == Scenario::grassland) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (es[i].kind.tag == Kind::wolf && es[j].kind.tag == Kind::sheep && touch(i, j)) {
          out.push_back({EventKind::sheep_eaten, {i, j}, s.timestep});
        }
      }
    }
    for (std::size_t g = 0; g < n; ++g) {
      if (es[g].kind.tag != Kind::grass) continue;
      for (std::size_t i = 0; i < n; ++i) {
        if (es[i].kind.tag == Kind::sheep && touch(i, g)) {
          out.push_back({EventKind::grass_eaten, {i, g}, s.timestep});
          break;
        }
      }
    }
  } else {
    std::vector<std::size_t> agents;
    for (std::size_t i = 0; i < n; ++i) {
      if (es[i].kind.tag == Kind::nav_agent) agents.push_back(i);
    }
    bool success = true;
    for (std::size_t l = 0; l < n; ++l) {
      if (es[l].kind.tag != Kind::landmark) continue;
      bool red = false, green = false;
      for (auto a : agents) {
        if (!touch(a, l)) continue;
        if (sc == Scenario::color_nav && es[a].kind.color != es[l].kind.color) continue;
        out.push_back({EventKind::landmark_occupied, {l, a}, s.timestep});
        red = red || es[a].kind.color == Color::red;
        green = green || es[a].kind.color == Color::green;
      }
      if (sc == Scenario::team_nav && !(red && green)) success = false;
    }
    if (sc != Scenario::team_nav) {
      for (Color c : {Color::none, Color::red, Color::green}) {
        std::vector<std::size_t> ag, lm;
        for (std::size_t i = 0; i < n; ++i) {
          if (es[i].kind.color != c) continue;
          if (es[i].kind.tag == Kind::nav_agent) ag.push_back(i);
          if (es[i].kind.tag == Kind::landmark) lm.push_back(i);
        }
        if (!lm.empty() && !brute_assignment(es, ag, lm)) success = false;
      }
    }
    if (success) out.push_back({EventKind::success, agents, s.timestep});
  }
  std::sort(out.begin(), out.end());
  return out;
}

// Squeezes a reset state into a small box so that overlaps are frequent.
WorldState crowded_state(const ScenarioConfig& cfg, std::uint64_t seed) {
  auto s = reset(cfg, seed);
  Rng rng(seed * 7919 + 1);
  const double box = 0.15 + 0.5 * rng.uniform();
  for (auto& e : s.entities) e.position = {rng.uniform(-box, box), rng.uniform(-box, box)};
  return s;
}

}  // namespace

TEST_CASE("reset spawns the configured populations without obstacle overlap") {
  auto s = reset(ScenarioConfig::grassland(4, 4), 3);
  CHECK(s.indices_of(Kind::wolf).size() == 4);
  CHECK(s.indices_of(Kind::sheep).size() == 4);
  CHECK(s.indices_of(Kind::grass).size() == 5);
  CHECK(s.indices_of(Kind::obstacle).size() == 2);
  for (auto o : s.indices_of(Kind::obstacle)) {
    for (std::size_t i = 0; i < s.entities.size(); ++i) {
      if (i != o) CHECK_FALSE(overlaps(s.entities[i], s.entities[o]));
    }
  }
  auto nav = reset(ScenarioConfig::vanilla_nav(3), 3);
  CHECK(nav.agents().size() == 3);
  CHECK(nav.indices_of(Kind::landmark).size() == 3);
  auto team = reset(ScenarioConfig::team_nav(3, 5), 1);
  CHECK(team.agents().size() == 6);
  CHECK(team.indices_of(Kind::landmark).size() == 5);
}

TEST_CASE("reset is deterministic and seed-sensitive") {
  for (const auto& cfg : all_scenarios()) {
    CHECK(reset(cfg, 42) == reset(cfg, 42));
    CHECK_FALSE(reset(cfg, 42) == reset(cfg, 43));
  }
}

TEST_CASE("configuration validation") {
  CHECK_THROWS_AS(reset(ScenarioConfig::grassland(3, 2), 0), ConfigError);
  CHECK_THROWS_AS(reset(ScenarioConfig::team_nav(2, 4), 0), ConfigError);
  auto tight = ScenarioConfig::vanilla_nav(8);
  tight.half_width = 0.3;
  CHECK_THROWS_WITH_AS(reset(tight, 0), doctest::Contains("infeasible packing"), ConfigError);
}

TEST_CASE("scenario config JSON round-trips and rejects unknown keys") {
  auto c = ScenarioConfig::grassland(2, 4);
  c.obstacle_positions = {{0.3, 0.2}, {-0.4, 0.1}};
  CHECK(scenario_from_json(to_json(c)) == c);
  auto j = to_json(ScenarioConfig::team_nav(4, 6));
  CHECK(scenario_from_json(j) == ScenarioConfig::team_nav(4, 6));
  j["bogus"] = 1;
  CHECK_THROWS_AS(scenario_from_json(j), ConfigError);
  CHECK_THROWS_AS(scenario_from_json(nlohmann::json{{"scenario", "tag"}}), ConfigError);
}

TEST_CASE("zero action at rest leaves positions unchanged") {
  auto s = reset(ScenarioConfig::vanilla_nav(2), 5);
  const auto before = s.entities;
  auto r = step(s, zero_actions(s));
  CHECK(r.state.timestep == 1);
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(r.state.entities[i].position == before[i].position);
}

TEST_CASE("non-finite actions are rejected with the agent index") {
  auto s = reset(ScenarioConfig::vanilla_nav(2), 5);
  std::vector<ActionVector> a(2);
  a[1].fy = std::nan("");
  CHECK_THROWS_WITH_AS(step(s, a), doctest::Contains("agent 1"), UsageError);
  CHECK_THROWS_AS(step(s, std::vector<ActionVector>(1)), UsageError);
}

TEST_CASE("wolf overlapping a sheep emits sheep_eaten and the sheep respawns") {
  auto s = reset(ScenarioConfig::grassland(2, 2), 9);
  const auto w = s.indices_of(Kind::wolf)[0];
  const auto sh = s.indices_of(Kind::sheep)[0];
  s.entities[sh].position = s.entities[w].position;
  auto r = step(s, zero_actions(s));
  const auto it = std::find_if(r.events.begin(), r.events.end(),
                               [](const Event& e) { return e.kind == EventKind::sheep_eaten; });
  REQUIRE(it != r.events.end());
  CHECK(it->participants == std::vector<std::size_t>{w, sh});
  CHECK(it->timestep == 1);
  CHECK_FALSE(overlaps(r.state.entities[w], r.state.entities[sh]));
  CHECK(reward_original(r.state, r.events, w) == 5.0);
  CHECK(reward_original(r.state, r.events, sh) == -5.0);
}

TEST_CASE("grass eaten by a sheep reappears elsewhere with constant count") {
  auto s = reset(ScenarioConfig::grassland(2, 2), 11);
  const auto sh = s.indices_of(Kind::sheep)[1];
  const auto g = s.indices_of(Kind::grass)[0];
  s.entities[g].position = s.entities[sh].position;
  const auto grass_before = s.indices_of(Kind::grass).size();
  auto r = step(s, zero_actions(s));
  const Event expected{EventKind::grass_eaten, {sh, g}, 1};
  CHECK(std::find(r.events.begin(), r.events.end(), expected) != r.events.end());
  CHECK_FALSE(r.state.entities[g].position == r.state.entities[sh].position);
  CHECK(r.state.indices_of(Kind::grass).size() == grass_before);
  CHECK(reward_original(r.state, r.events, sh) == 2.0);
}

TEST_CASE("detect_events matches the pairwise oracle on random states") {
  for (const auto& cfg : all_scenarios()) {
    std::size_t nonempty = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const auto s = crowded_state(cfg, seed);
      const auto got = detect_events(s);
      const auto want = oracle_events(s);
      CHECK(got == want);
      nonempty += !got.empty();
    }
    CHECK(nonempty > 20);
  }
}

TEST_CASE("success requires a conflict-free assignment") {
  auto s = reset(ScenarioConfig::vanilla_nav(2), 2);
  const auto ag = s.agents();
  const auto lm = s.indices_of(Kind::landmark);
  CHECK(detect_events(s).empty());
  // Both agents on the first landmark: not a success.
  s.entities[ag[0]].position = s.entities[lm[0]].position;
  s.entities[ag[1]].position = s.entities[lm[0]].position;
  CHECK_FALSE(success_predicate(s));
  s.entities[ag[1]].position = s.entities[lm[1]].position;
  CHECK(success_predicate(s));
  const auto ev = detect_events(s);
  CHECK(std::count_if(ev.begin(), ev.end(), [](const Event& e) { return e.kind == EventKind::success; }) == 1);
  CHECK(reward_original(s, ev, ag[0]) == 10.0);
}

TEST_CASE("team navigation needs one agent of each team per landmark") {
  auto s = reset(ScenarioConfig::team_nav(2, 3), 4);
  const auto ag = s.agents();  // red, red, green, green
  const auto lm = s.indices_of(Kind::landmark);
  for (std::size_t k = 0; k < 3; ++k) {
    s.entities[ag[k % 2]].position = s.entities[lm[k]].position;
  }
  CHECK_FALSE(success_predicate(s));
  s.entities[ag[0]].position = s.entities[lm[0]].position;
  s.entities[ag[2]].position = s.entities[lm[0]].position;
  // Landmarks 1 and 2 still lack a green toucher.
  CHECK_FALSE(success_predicate(s));
  for (auto& e : s.entities) {
    if (e.kind.tag == Kind::landmark) e.position = {0.0, 0.0};
    if (e.kind.tag == Kind::nav_agent) e.position = {0.01, 0.0};
  }
  CHECK(success_predicate(s));
}

TEST_CASE("boundary safety and speed clamp hold under random actions") {
  for (const auto& cfg : all_scenarios()) {
    auto s = reset(cfg, 77);
    Rng rng(5);
    for (int t = 0; t < 200; ++t) {
      std::vector<ActionVector> a(s.agents().size());
      for (auto& v : a) v = {rng.uniform(-3, 3), rng.uniform(-3, 3)};
      const auto counts = s.entities.size();
      s = step(s, a).state;
      CHECK(s.entities.size() == counts);
      for (const auto& e : s.entities) {
        CHECK(std::abs(e.position.x) <= cfg.half_width);
        CHECK(std::abs(e.position.y) <= cfg.half_width);
        if (is_agent(e.kind.tag)) CHECK(e.velocity.norm() <= cfg.max_speed(e.kind.tag) + 1e-12);
      }
    }
    CHECK(s.timestep == 200);
  }
}

TEST_CASE("trajectories are bit-identical for identical inputs") {
  auto run = [](std::uint64_t seed) {
    auto s = reset(ScenarioConfig::grassland(4, 4), seed);
    Rng rng(seed);
    std::vector<nlohmann::json> out;
    for (int t = 0; t < 100; ++t) {
      std::vector<ActionVector> a(s.agents().size());
      for (auto& v : a) v = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
      auto r = step(s, a);
      out.push_back(trajectory_record(r.state, r.events));
      s = std::move(r.state);
    }
    return nlohmann::json(out).dump();
  };
  CHECK(run(8) == run(8));
}

TEST_CASE("baseline observation layout") {
  auto g = reset(ScenarioConfig::grassland(2, 2), 1);
  // self 4 + 3 other agents x 4 + 5 grass x 2 + 2 obstacles x 2
  CHECK(baseline_observation_size(g.config, Kind::sheep) == 30);
  for (auto a : g.agents()) CHECK(observe_baseline(g, a).size() == 30);

  auto c = reset(ScenarioConfig::color_nav(2), 1);
  // self 6 + 3 others x 6 + 4 landmarks x 4
  CHECK(observe_baseline(c, 0).size() == 40);
  CHECK(baseline_observation_size(c.config, Kind::nav_agent) == 40);

  auto lone = reset(ScenarioConfig::vanilla_nav(1), 1);
  lone.entities[0].position = {};
  const auto o = observe_baseline(lone, 0);
  CHECK(std::all_of(o.begin(), o.begin() + 4, [](double v) { return v == 0.0; }));

  auto shifted = g;
  for (auto& e : shifted.entities) e.position += Vec2{0.25, -0.125};
  const auto a = observe_baseline(g, 0);
  const auto b = observe_baseline(shifted, 0);
  for (std::size_t i = 4; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
}

TEST_CASE("engineered rewards add the dense distance terms") {
  auto s = reset(ScenarioConfig::grassland(2, 2), 1);
  const auto sh = s.indices_of(Kind::sheep)[0];
  const auto w = s.indices_of(Kind::wolf)[0];
  for (auto& e : s.entities) {
    if (e.kind.tag == Kind::grass) e.position = {0.9, 0.9};
    if (e.kind.tag == Kind::sheep) e.position = {-0.9, -0.9};
  }
  s.entities[sh].position = {-0.1, 0.9};
  CHECK(reward_engineering(s, {}, sh) == doctest::Approx(-1.0));
  s.entities[w].position = s.entities[sh].position;
  CHECK(reward_engineering(s, {}, w) == doctest::Approx(0.0));

  auto nav = reset(ScenarioConfig::vanilla_nav(2), 3);
  const auto lm = nav.indices_of(Kind::landmark)[0];
  nav.entities[0].position = nav.entities[lm].position;
  const auto ev = detect_events(nav);
  CHECK(reward_original(nav, ev, 0) == 0.0);
  CHECK(reward_engineering(nav, ev, 0) == doctest::Approx(1.0));
}
