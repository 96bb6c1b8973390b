#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "socialgf/errors.hpp"
#include "socialgf/representation.hpp"

using namespace socialgf;
using namespace socialgf::representation;
using examples::Polarity;
using examples::Role;

namespace {

FieldHandle random_field(const std::string& category, const world::ScenarioConfig& scenario,
                         std::uint64_t seed) {
  Rng rng(seed);
  scorefield::GradientField f;
  f.category = examples::standard_category(category, scenario);
  f.net = scorefield::ScoreNetwork::create(f.category.layout, 16, rng);
  return std::make_shared<const scorefield::GradientField>(std::move(f));
}

GFSlot slot_for(const FieldHandle& f) { return {f->category.name, f->category.polarity, f, ""}; }

GFRepresentation sheep_rep(const world::ScenarioConfig& scenario) {
  GFRepresentation rep;
  rep.role = Role::sheep;
  rep.slots = {slot_for(random_field("grass_eaten", scenario, 1)),
               slot_for(random_field("boundary_avoid", scenario, 2)),
               slot_for(random_field("wolf_avoid", scenario, 3))};
  return rep;
}

}  // namespace

TEST_CASE("sheep observation is velocity plus three field values") {
  const auto scenario = world::ScenarioConfig::grassland(2, 2);
  auto state = world::reset(scenario, 4);
  const auto sheep = state.indices_of(world::Kind::sheep);
  state.entities[sheep[0]].velocity = {0.3, -0.2};
  const auto rep = sheep_rep(scenario);
  const auto obs = compose_observation(state, sheep[0], rep);
  REQUIRE(obs.size() == 8);
  CHECK(obs[0] == 0.3);
  CHECK(obs[1] == -0.2);
  for (std::size_t k = 0; k < 3; ++k) {
    const auto& f = *rep.slots[k].field;
    const auto v = scorefield::eval_field(f, examples::gather(state, sheep[0], f.category.layout));
    CHECK(std::abs(obs[rep.slot_offset(k)] - v.x) < 1e-12);
    CHECK(std::abs(obs[rep.slot_offset(k) + 1] - v.y) < 1e-12);
  }

  GFRepresentation no_velocity = rep;
  no_velocity.include_velocity = false;
  const auto bare = compose_observation(state, sheep[0], no_velocity);
  REQUIRE(bare.size() == 6);
  for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(bare[i] - obs[i + 2]) < 1e-12);
}

TEST_CASE("navigation observation has four entries") {
  const auto scenario = world::ScenarioConfig::vanilla_nav(2);
  const auto state = world::reset(scenario, 9);
  GFRepresentation rep;
  rep.role = Role::nav_agent;
  rep.slots = {slot_for(random_field("navigation", scenario, 5))};
  CHECK(compose_observation(state, 0, rep).size() == 4);
}

TEST_CASE("batched composition matches per-agent composition") {
  const auto scenario = world::ScenarioConfig::grassland(2, 4);
  const auto rep = sheep_rep(scenario);
  std::vector<world::WorldState> states;
  for (std::uint64_t s = 0; s < 4; ++s) states.push_back(world::reset(scenario, s));
  std::vector<ObservationQuery> queries;
  for (const auto& st : states) {
    for (auto a : st.indices_of(world::Kind::sheep)) queries.push_back({&st, a});
  }
  const auto batched = compose_observations(queries, rep);
  REQUIRE(batched.size() == queries.size());
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const auto single = compose_observation(*queries[q].state, queries[q].agent, rep);
    for (std::size_t i = 0; i < single.size(); ++i) CHECK(std::abs(single[i] - batched[q][i]) < 1e-12);
  }
}

TEST_CASE("missing entity kind names the offending slot") {
  const auto rep = sheep_rep(world::ScenarioConfig::grassland(2, 2));
  const auto nav = world::reset(world::ScenarioConfig::vanilla_nav(2), 1);
  try {
    compose_observation(nav, 0, rep);
    FAIL("expected AdaptationError");
  } catch (const AdaptationError& e) {
    CHECK(std::string(e.what()).find("grass_eaten") != std::string::npos);
  }
}

TEST_CASE("shaped reward subtracts scaled attractive magnitude") {
  ShapingConfig on{0.01, true};
  CHECK(shaped_reward(0.0, std::hypot(3.0, 4.0), on) == doctest::Approx(-0.05));
  CHECK(shaped_reward(2.0, 5.0, ShapingConfig{0.01, false}) == 2.0);
  CHECK(shaped_reward(2.0, 5.0, ShapingConfig{0.0, true}) == 2.0);
  CHECK_THROWS_AS((ShapingConfig{-0.1, true}.validate()), ConfigError);

  GFRepresentation rep;
  rep.slots = {{"a", Polarity::attractive, nullptr, ""},
               {"r", Polarity::repulsive, nullptr, ""},
               {"b", Polarity::attractive, nullptr, ""}};
  const std::vector<double> obs = {9.0, 9.0, 3.0, 4.0, 100.0, 100.0, 0.0, 1.0};
  CHECK(attractive_magnitude(obs, rep) == doctest::Approx(6.0));
  CHECK_THROWS_AS(attractive_magnitude(std::vector<double>(3, 0.0), rep), UsageError);
}

TEST_CASE("shaped reward rises monotonically toward a Gaussian mode") {
  const scorefield::NoiseSchedule sched;
  const std::vector<double> mean = {0.4, -0.3};
  const ShapingConfig shaping{0.01, true};
  double previous = -1e300;
  for (int i = 0; i <= 20; ++i) {
    const double a = 1.0 - i / 20.0;
    const std::vector<double> x = {mean[0] + a * 1.2, mean[1] - a * 0.7};
    const auto s = scorefield::analytic_gaussian_score(mean, 0.05, sched, 0.01, x);
    const double r = shaped_reward(0.0, std::hypot(s[0], s[1]), shaping);
    CHECK(r > previous);
    previous = r;
  }
  CHECK(previous == doctest::Approx(0.0));
}

TEST_CASE("representation swap") {
  const auto grass = world::ScenarioConfig::grassland(2, 2);
  const auto rep = sheep_rep(grass);
  const auto state = world::reset(grass, 12);
  const auto sheep = state.indices_of(world::Kind::sheep)[0];

  SUBCASE("identity mapping is bit-identical") {
    std::map<std::string, FieldHandle> same;
    SlotMapping m;
    for (const auto& s : rep.slots) {
      same[s.name] = s.field;
      m.assignments[s.name] = s.name;
    }
    const auto swapped = swap_representation(rep, same, m);
    CHECK(compose_observation(state, sheep, swapped) == compose_observation(state, sheep, rep));
  }

  SUBCASE("unmapped slot without fallback is rejected") {
    SlotMapping m;
    m.assignments["grass_eaten"] = kZeroFill;
    CHECK_THROWS_AS(swap_representation(rep, {}, m), ConfigError);
    m.fallback = kZeroFill;
    const auto zeroed = swap_representation(rep, {}, m);
    const auto obs = compose_observation(state, sheep, zeroed);
    for (std::size_t i = 2; i < obs.size(); ++i) CHECK(obs[i] == 0.0);
  }

  SUBCASE("unknown names are rejected") {
    SlotMapping m{{{"grass_eaten", "nope"}}, std::string(kZeroFill)};
    CHECK_THROWS_AS(swap_representation(rep, {}, m), ConfigError);
    SlotMapping bad{{{"not_a_slot", kZeroFill}}, std::string(kZeroFill)};
    CHECK_THROWS_AS(swap_representation(rep, {}, bad), ConfigError);
  }

  SUBCASE("sheep representation adapted to navigation") {
    const auto nav = world::ScenarioConfig::vanilla_nav(2);
    const auto nav_field = random_field("navigation", nav, 8);
    SlotMapping m{{{"grass_eaten", "navigation"}}, std::string(kZeroFill)};
    const auto swapped = swap_representation(rep, {{"navigation", nav_field}}, m);
    REQUIRE(swapped.slots.size() == 3);
    CHECK(swapped.role == Role::sheep);
    CHECK(swapped.slots[0].name == "grass_eaten");
    CHECK(swapped.slots[1].zero_fill());
    CHECK(swapped.slots[2].zero_fill());
    const auto nav_state = world::reset(nav, 3);
    const auto obs = compose_observation(nav_state, 1, swapped);
    REQUIRE(obs.size() == 8);
    const auto v = scorefield::eval_field(*nav_field, examples::gather(nav_state, 1, nav_field->category.layout));
    CHECK(obs[2] == doctest::Approx(v.x).epsilon(1e-12));
    CHECK(obs[3] == doctest::Approx(v.y).epsilon(1e-12));
    CHECK(obs[4] == 0.0);
    CHECK(obs[7] == 0.0);
  }
}

TEST_CASE("manifest round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "socialgf_test_manifest";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir / "fields");
  const auto grass = world::ScenarioConfig::grassland(2, 2);
  auto rep = sheep_rep(grass);
  for (auto& s : rep.slots) {
    s.field_path = "fields/" + s.name + ".sgff";
    scorefield::save_field(*s.field, dir / s.field_path);
  }
  rep.slots[2].field = nullptr;
  rep.slots[2].field_path.clear();
  const ShapingConfig shaping{0.02, true};
  const auto j = manifest_to_json(rep, shaping);
  CHECK(j["slots"][2]["field"].is_null());
  const auto [back, back_shaping] = manifest_from_json(j, dir);
  CHECK(back_shaping == shaping);
  CHECK(back.role == Role::sheep);
  REQUIRE(back.slots.size() == 3);
  CHECK(back.slots[2].zero_fill());
  const auto state = world::reset(grass, 5);
  const auto sheep = state.indices_of(world::Kind::sheep)[1];
  CHECK(compose_observation(state, sheep, back) == compose_observation(state, sheep, rep));

  auto missing = j;
  missing["slots"][0]["field"] = "fields/absent.sgff";
  CHECK_THROWS_AS(manifest_from_json(missing, dir), ConfigError);
  auto no_attractive = j;
  no_attractive["slots"][0]["field"] = nullptr;
  no_attractive["slots"][1]["field"] = nullptr;
  CHECK_THROWS_AS(manifest_from_json(no_attractive, dir), ConfigError);
  CHECK_THROWS_AS(manifest_from_json(nlohmann::json::object(), dir), ConfigError);
  std::filesystem::remove_all(dir);
}
