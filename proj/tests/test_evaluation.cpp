#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "socialgf/errors.hpp"
#include "socialgf/evaluation.hpp"

using namespace socialgf;
using namespace socialgf::evaluation;
using marl::MethodVariant;

namespace {

marl::RolePolicy baseline_policy(Role role, const world::ScenarioConfig& scenario, std::uint64_t seed) {
  Rng rng(seed);
  return marl::make_role_policy(role, MethodVariant::original_reward, scenario, std::nullopt, {}, 16, rng);
}

marl::RolePolicy frozen(marl::RolePolicy p) {
  for (const auto& t : p.actor.params()) {
    if (t.name != "log_std") p.actor.set(t.name, numerics::DenseTensor::zeros(t.value.shape()));
  }
  return p;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("reward normalization") {
  CHECK(normalize_rewards({2.0, 4.0}) == std::vector<double>{0.1, 1.0});
  const auto three = normalize_rewards({0.0, 5.0, 10.0});
  CHECK(three[0] == 0.1);
  CHECK(three[1] == doctest::Approx(0.55));
  CHECK(three[2] == 1.0);
  CHECK(normalize_rewards({3.0, 3.0, 3.0}) == std::vector<double>{1.0, 1.0, 1.0});
  Rng rng(3);
  std::vector<double> xs(50);
  for (auto& x : xs) x = rng.normal() * 7.0;
  const auto ys = normalize_rewards(xs);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    CHECK(ys[i] >= 0.1);
    CHECK(ys[i] <= 1.0);
    for (std::size_t j = 0; j < xs.size(); ++j) {
      if (xs[i] < xs[j]) CHECK(ys[i] < ys[j]);
    }
  }
}

TEST_CASE("grass rate") {
  const auto grass = world::ScenarioConfig::grassland(2, 2);
  const auto wolf = frozen(baseline_policy(Role::wolf, grass, 1));
  const auto sheep = frozen(baseline_policy(Role::sheep, grass, 2));
  CHECK(grass_rate(grass, {{Role::wolf, &wolf}, {Role::sheep, &sheep}}, 8, 4) == 0.0);
  const double random = grass_rate(grass, {{Role::wolf, nullptr}, {Role::sheep, nullptr}}, 8, 4);
  CHECK(std::isfinite(random));
  CHECK(random >= 0.0);
  CHECK_THROWS_AS(grass_rate(world::ScenarioConfig::vanilla_nav(2), {{Role::nav_agent, nullptr}}, 2, 1), UsageError);
}

TEST_CASE("navigation metrics") {
  const auto nav5 = world::ScenarioConfig::vanilla_nav(5);
  const auto m = nav_metrics(nav5, {{Role::nav_agent, nullptr}}, 40, 7);
  CHECK(m.success_rate <= 0.025);
  CHECK(m.occupation_rate >= 0.0);
  CHECK(m.occupation_rate <= 1.0);
  CHECK(m.episodes == 40);

  // A successful final step implies every landmark is occupied then.
  const auto nav2 = world::ScenarioConfig::vanilla_nav(2);
  const auto seeds = episode_seeds(5, 200);
  const auto outcomes = marl::run_episodes(nav2, {{Role::nav_agent, nullptr}}, seeds, true);
  for (const auto& o : outcomes) {
    if (o.final_success) {
      CHECK(o.final_occupation == 1.0);
      CHECK(o.occupation > 0.0);
    }
  }
  CHECK_THROWS_AS(nav_metrics(world::ScenarioConfig::grassland(2, 2), {}, 1, 1), UsageError);
}

TEST_CASE("evaluation is deterministic") {
  const auto grass = world::ScenarioConfig::grassland(2, 2);
  const auto wolf = baseline_policy(Role::wolf, grass, 1);
  const auto sheep = baseline_policy(Role::sheep, grass, 2);
  const PolicyMap pm{{Role::wolf, &wolf}, {Role::sheep, &sheep}};
  CHECK(to_json(evaluate(grass, pm, 6, 3)) == to_json(evaluate(grass, pm, 6, 3)));
  CHECK_THROWS_AS(evaluate(grass, {{Role::wolf, &wolf}}, 2, 1), UsageError);
}

TEST_CASE("cross match") {
  const auto grass = world::ScenarioConfig::grassland(2, 2);
  const auto w1 = baseline_policy(Role::wolf, grass, 1);
  const auto w2 = baseline_policy(Role::wolf, grass, 2);
  const auto s1 = baseline_policy(Role::sheep, grass, 3);
  const auto s2 = baseline_policy(Role::sheep, grass, 4);

  SUBCASE("identical checkpoints give a constant matrix") {
    const auto r = cross_match(grass, {{"A", &w1}, {"B", &w1}}, {{"A", &s1}, {"B", &s1}}, 4, 9);
    for (const auto& row : r.cells) {
      for (const auto& c : row) {
        CHECK(c.wolf_reward == r.cells[0][0].wolf_reward);
        CHECK(c.sheep_reward == r.cells[0][0].sheep_reward);
        CHECK(c.wolf_normalized == 1.0);
      }
    }
  }

  SUBCASE("four by four schema") {
    const std::vector<NamedPolicy> wolves = {{"OriginalReward", &w1}, {"RewardEngineering", &w2},
                                             {"SocialGFs", &w1}, {"SocialGFsPlus", nullptr}};
    const std::vector<NamedPolicy> sheep = {{"OriginalReward", &s1}, {"RewardEngineering", &s2},
                                            {"SocialGFs", nullptr}, {"SocialGFsPlus", &s2}};
    const auto r = cross_match(grass, wolves, sheep, 3, 2);
    const auto j = to_json(r);
    CHECK_NOTHROW(check_cross_match_schema(j));
    CHECK(j["cells"].size() == 4);
    CHECK(j["cells"][0].size() == 4);
    CHECK(j["scale"] == "2-2");
    const auto text = to_text(r);
    CHECK(text.find("wolf \\ sheep | OriginalReward | RewardEngineering | SocialGFs | SocialGFsPlus") !=
          std::string::npos);

    auto bad = j;
    bad["cells"].erase(1);
    CHECK_THROWS_AS(check_cross_match_schema(bad), DataError);
    bad = j;
    bad["cells"][0][0]["wolf_normalized"] = 0.05;
    CHECK_THROWS_AS(check_cross_match_schema(bad), DataError);
    bad = j;
    bad["schema"] = "other";
    CHECK_THROWS_AS(check_cross_match_schema(bad), DataError);
  }

  SUBCASE("preconditions") {
    CHECK_THROWS_AS(cross_match(grass, {{"A", &w1}}, {{"A", &s1}, {"B", &s2}}, 2, 1), UsageError);
    const auto navp = baseline_policy(Role::nav_agent, world::ScenarioConfig::vanilla_nav(2), 5);
    CHECK_THROWS_AS(cross_match(grass, {{"A", &w1}, {"N", &navp}}, {{"A", &s1}, {"B", &s2}}, 2, 1), ConfigError);
  }
}

TEST_CASE("navigation table schema") {
  NavTable t;
  t.scenario = "vanilla_nav";
  t.methods = {"OriginalReward", "SocialGFsPlus"};
  t.populations = {"N=2", "N=3"};
  t.cells = {{{0.0, 0.1, 10}, {0.1, 0.2, 10}}, {{0.9, 0.8, 10}, {0.5, 0.6, 10}}};
  const auto j = to_json(t);
  CHECK_NOTHROW(check_nav_table_schema(j));
  CHECK(to_text(t, "success_rate").find("method | N=2 | N=3") != std::string::npos);
  CHECK(to_text(t, "occupation_rate").find("SocialGFsPlus | 0.800 | 0.600") != std::string::npos);
  CHECK_THROWS_AS(to_text(t, "speed"), UsageError);
  auto bad = j;
  bad["cells"][1][0]["success_rate"] = 1.5;
  CHECK_THROWS_AS(check_nav_table_schema(bad), DataError);
}

TEST_CASE("quiver grids") {
  const scorefield::NoiseSchedule sched;
  const std::vector<double> mean = {0.3, -0.2};
  auto gaussian = [&](world::Vec2 p) {
    const std::vector<double> x = {p.x, p.y};
    const auto s = scorefield::analytic_gaussian_score(mean, 0.04, sched, 0.01, x);
    return world::Vec2{s[0], s[1]};
  };
  const auto q = field_quiver(gaussian);
  CHECK(q.points.size() == 1600);
  for (const auto& p : q.points) {
    const double toward = p.u * (mean[0] - p.x) + p.v * (mean[1] - p.y);
    CHECK(toward >= 0.0);
  }

  const std::vector<double> origin = {0.0, 0.0};
  auto centred = [&](world::Vec2 p) {
    const std::vector<double> x = {p.x, p.y};
    const auto s = scorefield::analytic_gaussian_score(origin, 0.04, sched, 0.01, x);
    return world::Vec2{s[0], s[1]};
  };
  const GridSpec g{9, 7, 1.0};
  const auto c = field_quiver(centred, g);
  for (int iy = 0; iy < g.ny; ++iy) {
    for (int ix = 0; ix < g.nx; ++ix) {
      const auto& a = c.points[static_cast<std::size_t>(iy * g.nx + ix)];
      const auto& b = c.points[static_cast<std::size_t>(iy * g.nx + (g.nx - 1 - ix))];
      CHECK(a.u == doctest::Approx(-b.u));
      CHECK(a.v == doctest::Approx(b.v));
    }
  }
  const auto csv = to_csv(c);
  CHECK(csv.rfind("x,y,u,v\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 63);

  const auto grass = world::ScenarioConfig::grassland(2, 2);
  Rng rng(4);
  scorefield::GradientField f;
  f.category = examples::standard_category("grass_eaten", grass);
  f.net = scorefield::ScoreNetwork::create(f.category.layout, 8, rng);
  const auto scene = world::reset(grass, 3);
  const auto sheep = scene.indices_of(world::Kind::sheep)[0];
  const auto fq = field_quiver(f, scene, sheep, GridSpec{5, 5, 1.0});
  auto moved = scene;
  moved.entities[sheep].position = {fq.points[7].x, fq.points[7].y};
  const auto direct = scorefield::eval_field(f, examples::gather(moved, sheep, f.category.layout));
  CHECK(std::abs(fq.points[7].u - direct.x) < 1e-12);
  CHECK(std::abs(fq.points[7].v - direct.y) < 1e-12);
}

TEST_CASE("frame rendering") {
  const auto dir = std::filesystem::temp_directory_path() / "socialgf_test_frames";
  std::filesystem::remove_all(dir);
  const auto grass = world::ScenarioConfig::grassland(2, 2);
  const auto wolf = baseline_policy(Role::wolf, grass, 1);
  const PolicyMap pm{{Role::wolf, &wolf}, {Role::sheep, nullptr}};
  const auto paths = render_frames(grass, pm, 11, dir, {true, 32});
  CHECK(paths.size() == 101);
  const auto text = slurp(dir / "frames.jsonl");
  CHECK(std::count(text.begin(), text.end(), '\n') == 100);
  const auto first = nlohmann::json::parse(text.substr(0, text.find('\n')));
  CHECK(first["t"] == 1);
  CHECK(first["entities"][0]["kind"] == "wolf");
  CHECK(first["entities"][0]["rgb"] == "#dc2828");
  CHECK(first["entities"][2]["rgb"] == "#2850dc");
  const auto img = slurp(dir / "frame_001.ppm");
  CHECK(img.rfind("P6\n32 32\n255\n", 0) == 0);
  CHECK(img.size() == std::string("P6\n32 32\n255\n").size() + 32 * 32 * 3);

  const auto again = dir / "again";
  render_frames(grass, pm, 11, again, {true, 32});
  CHECK(slurp(again / "frames.jsonl") == text);
  CHECK(slurp(again / "frame_050.ppm") == slurp(dir / "frame_050.ppm"));
  std::filesystem::remove_all(dir);
}
